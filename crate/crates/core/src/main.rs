fn main() {
    env_logger::init();
    std::process::exit(hdrv::cli::run(std::env::args_os()));
}

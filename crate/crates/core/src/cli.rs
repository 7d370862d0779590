//! Batch command-line interface.
//!
//! Exit codes: 0 on success, 2 for invalid input or configuration, 3 for
//! numeric failures. `HDRV_THREADS` sets the default worker count.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imagecore::{load_image, save_image, Domain, Image};
use crate::metrics::{diversity_report, quality_report, MetricReport, MetricRow};
use crate::radiometry::{
    load_stack, merge_stack_to_hdr, parse_pattern, read_stack_metadata, validate_pattern, InputFrame,
    ManifestFrame, SequenceManifest, STACK_METADATA_FILE,
};
use crate::reconstruct::{reconstruct_frames, ReconstructionConfig};
use crate::synth::{SceneKind, SyntheticScene};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const THREADS_ENV: &str = "HDRV_THREADS";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "hdrv", version, about = "Alternating-exposure HDR video reconstruction and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge one bracketed stack directory into an HDR .pfm.
    Merge {
        stack_dir: PathBuf,
        out: PathBuf,
        /// Validate and merge without writing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Build an alternating-exposure manifest from per-frame stack directories.
    Sequence {
        scene_dir: PathBuf,
        out_manifest: PathBuf,
        /// EV cycle such as "-3,0" or "-2,+1".
        #[arg(long, allow_hyphen_values = true, default_value = "-3,0")]
        pattern: String,
    },
    /// Reconstruct every frame of a manifest.
    Reconstruct(ReconstructArgs),
    /// Score estimated HDR frames against ground truth.
    Eval {
        estimates_dir: PathBuf,
        truth_dir: PathBuf,
        out_csv: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Diversity statistics of a directory of HDR frames.
    Stats {
        hdr_dir: PathBuf,
        out_csv: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Render a synthetic scene as bracketed stacks plus radiance truth.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// JSON reconstruction config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Frame-level worker threads (defaults to $HDRV_THREADS, then all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Skip both alignment stages.
    #[arg(long)]
    pub no_align: bool,
    /// Also write aligned neighbours and confidence maps.
    #[arg(long)]
    pub dump_intermediates: bool,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub radius: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "global-motion")]
    pub scene: SceneKind,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    /// Bracket EVs written for every frame.
    #[arg(long, allow_hyphen_values = true, default_value = "-3,-2,-1,0,1,2,3")]
    pub evs: String,
    /// Display-domain read-noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = crate::radiometry::DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) | Error::Degenerate(_) => EXIT_NUMERIC,
        _ => EXIT_VALIDATION,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Merge {
            stack_dir,
            out,
            dry_run,
        } => cmd_merge(&stack_dir, &out, dry_run),
        Command::Sequence {
            scene_dir,
            out_manifest,
            pattern,
        } => cmd_sequence(&scene_dir, &pattern, &out_manifest),
        Command::Reconstruct(args) => cmd_reconstruct(&args),
        Command::Eval {
            estimates_dir,
            truth_dir,
            out_csv,
            workers,
        } => with_pool(workers, || cmd_eval(&estimates_dir, &truth_dir, &out_csv)),
        Command::Stats {
            hdr_dir,
            out_csv,
            workers,
        } => with_pool(workers, || cmd_stats(&hdr_dir, &out_csv)),
        Command::Synth(args) => cmd_synth(&args),
    }
}

/// Worker count from the flag, then `HDRV_THREADS`; `None` means the rayon default.
pub fn resolve_workers(flag: Option<usize>) -> Result<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Parameter(format!("{THREADS_ENV}={v:?} is not a count")))?,
            ),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Error::Parameter("worker count must be at least 1".into()));
    }
    Ok(n)
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match resolve_workers(workers)? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Parameter(format!("cannot start {n} workers: {e}")))?
            .install(f),
        None => f(),
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Serialize)]
struct InputHash {
    file: String,
    sha256: String,
}

fn hash_inputs(paths: &[PathBuf]) -> Result<Vec<InputHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(InputHash {
                file: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(format!("report serialization: {e}")))?;
    write_text(path, &(text + "\n"))
}

pub fn cmd_merge(stack_dir: &Path, out: &Path, dry_run: bool) -> Result<()> {
    let stack = load_stack(stack_dir).map_err(|e| e.context(stack_dir.display()))?;
    let hdr = merge_stack_to_hdr(&stack)?;
    let (lo, hi) = hdr
        .data()
        .iter()
        .fold((f32::INFINITY, 0.0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!(
        "frame {}: {} shots EV {:?}, {}x{}, radiance [{lo:.4}, {hi:.4}]",
        stack.frame_id,
        stack.shots().len(),
        stack.evs(),
        hdr.height(),
        hdr.width()
    );
    if dry_run {
        println!("dry run: {} not written", out.display());
        return Ok(());
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_image(&hdr, out)
}

/// `path` relative to `base` when both share a root, else `path` unchanged.
fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let p: Vec<_> = path.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return path.to_path_buf();
    }
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    for c in &p[common..] {
        rel.push(c);
    }
    rel
}

/// Subdirectories holding a stack, sorted by name.
fn stack_dirs(scene_dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(scene_dir).map_err(|e| Error::io(scene_dir, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(scene_dir, e))?.path();
        if path.join(STACK_METADATA_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Validation(format!(
            "{} contains no frame directories with {STACK_METADATA_FILE}",
            scene_dir.display()
        )));
    }
    Ok(dirs)
}

pub fn cmd_sequence(scene_dir: &Path, pattern: &str, out_manifest: &Path) -> Result<()> {
    let pattern = parse_pattern(pattern)?;
    let dirs = stack_dirs(scene_dir)?;
    let manifest_dir = match out_manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            d.canonicalize().map_err(|e| Error::io(d, e))?
        }
        None => std::env::current_dir().map_err(|e| Error::io(".", e))?,
    };
    let mut gamma = None;
    let mut frames = Vec::with_capacity(dirs.len());
    for (i, dir) in dirs.iter().enumerate() {
        let meta = read_stack_metadata(dir)?;
        match gamma {
            None => gamma = Some(meta.gamma),
            Some(g) if g != meta.gamma => {
                return Err(Error::Validation(format!(
                    "{} uses gamma {} but earlier frames use {g}",
                    dir.display(),
                    meta.gamma
                )))
            }
            _ => {}
        }
        let ev = pattern[i % pattern.len()];
        let shot = meta.shots.iter().find(|s| s.ev == ev).ok_or_else(|| {
            Error::Validation(format!(
                "frame {i} ({}) has no shot at EV {ev}; available {:?}",
                dir.display(),
                meta.shots.iter().map(|s| s.ev).collect::<Vec<_>>()
            ))
        })?;
        let abs = dir.join(&shot.file);
        let abs = abs.canonicalize().map_err(|e| Error::io(&abs, e))?;
        let file = relative_to(&abs, &manifest_dir);
        frames.push(ManifestFrame {
            index: i,
            file,
            ev,
            time_s: shot.time_s,
        });
    }
    let manifest = SequenceManifest {
        pattern,
        gamma: gamma.expect("at least one frame"),
        frames,
    };
    write_json(out_manifest, &manifest)?;
    println!(
        "{}: {} frames, pattern {:?}",
        out_manifest.display(),
        manifest.frames.len(),
        manifest.pattern
    );
    Ok(())
}

/// Config file (if any) with flag overrides applied.
pub fn resolve_config(args: &ReconstructArgs) -> Result<ReconstructionConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?
        }
        None => ReconstructionConfig::default(),
    };
    if args.no_align {
        cfg.align = false;
    }
    if args.dump_intermediates {
        cfg.dump_intermediates = true;
    }
    if let Some(l) = args.levels {
        cfg.local.levels = l;
        cfg.global.levels = l;
    }
    if let Some(r) = args.radius {
        cfg.local.radius = r;
    }
    Ok(cfg)
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let mut cfg = resolve_config(args)?;
    let workers = resolve_workers(args.workers)?;
    let manifest = SequenceManifest::load(&args.manifest)?;
    let base = args.manifest.parent().unwrap_or(Path::new(""));
    cfg.pattern = manifest.pattern.clone();
    validate_pattern(&cfg.pattern)?;
    cfg.validate()?;
    let seq = manifest.load_sequence(base)?;
    let frames = seq
        .frames
        .iter()
        .map(|(img, spec)| InputFrame::new(img.clone(), *spec))
        .collect::<Result<Vec<_>>>()?;

    let start = Instant::now();
    let results = with_pool(workers, || reconstruct_frames(&frames, &cfg))?;
    let elapsed = start.elapsed().as_secs_f64();

    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let mut frame_reports = Vec::with_capacity(results.len());
    for (i, r) in results.iter().enumerate() {
        let name = format!("frame_{i:04}.pfm");
        save_image(&r.hdr, args.out_dir.join(&name))?;
        if let Some([prev, next]) = &r.intermediates {
            let dir = args.out_dir.join("intermediates");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (tag, n) in [("prev", prev), ("next", next)] {
                save_image(&n.linear, dir.join(format!("frame_{i:04}_{tag}_aligned.pfm")))?;
                save_image(&n.confidence, dir.join(format!("frame_{i:04}_{tag}_confidence.pfm")))?;
            }
        }
        frame_reports.push(json!({
            "index": i,
            "output": name,
            "ev": frames[i].spec.ev,
            "global_alpha_prev": r.global_alpha_prev.alpha,
            "global_alpha_next": r.global_alpha_next.alpha,
            "diagnostics": r.diagnostics,
            "wall_clock_s": r.wall_clock_s,
        }));
    }
    let inputs: Vec<PathBuf> = std::iter::once(args.manifest.clone())
        .chain(manifest.frames.iter().map(|f| {
            if f.file.is_absolute() {
                f.file.clone()
            } else {
                base.join(&f.file)
            }
        }))
        .collect();
    let report = json!({
        "command": "reconstruct",
        "config": cfg,
        "workers": workers,
        "inputs": hash_inputs(&inputs)?,
        "frames": frame_reports,
        "total_wall_clock_s": elapsed,
    });
    write_json(&args.out_dir.join(REPORT_FILE), &report)?;
    println!(
        "reconstructed {} frames into {} in {elapsed:.2} s",
        results.len(),
        args.out_dir.display()
    );
    Ok(())
}

/// `.pfm` files in a directory keyed by file name, sorted.
fn pfm_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_pfm = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
        if is_pfm && path.is_file() {
            let name = path.file_name().expect("file has a name").to_string_lossy().into_owned();
            files.push((name, path));
        }
    }
    files.sort();
    Ok(files)
}

fn load_hdr(path: &Path) -> Result<Image> {
    load_image(path, Domain::LinearHdr).map_err(|e| e.context(path.display()))
}

fn write_report<T: MetricRow + Serialize>(
    out_csv: &Path,
    command: &str,
    inputs: &[PathBuf],
    report: &MetricReport<T>,
) -> Result<()> {
    write_text(out_csv, &report.to_csv())?;
    let doc = json!({
        "command": command,
        "config": { "columns": T::COLUMNS },
        "inputs": hash_inputs(inputs)?,
        "rows": report.rows,
        "aggregates": report.aggregates,
    });
    write_json(&out_csv.with_extension("json"), &doc)
}

pub fn cmd_eval(estimates_dir: &Path, truth_dir: &Path, out_csv: &Path) -> Result<()> {
    let est = pfm_files(estimates_dir)?;
    let truth = pfm_files(truth_dir)?;
    let est_names: Vec<&String> = est.iter().map(|(n, _)| n).collect();
    let truth_names: Vec<&String> = truth.iter().map(|(n, _)| n).collect();
    let only_est: Vec<&&String> = est_names.iter().filter(|n| !truth_names.contains(n)).collect();
    let only_truth: Vec<&&String> = truth_names.iter().filter(|n| !est_names.contains(n)).collect();
    if !only_est.is_empty() || !only_truth.is_empty() {
        return Err(Error::Validation(format!(
            "frame mismatch ({} estimates, {} truths): no truth for {only_est:?}; no estimate for {only_truth:?}",
            est.len(),
            truth.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::Validation(format!("{} holds no .pfm frames", estimates_dir.display())));
    }
    let mut frames = Vec::with_capacity(est.len());
    let mut inputs = Vec::with_capacity(2 * est.len());
    for ((name, e), (_, t)) in est.iter().zip(&truth) {
        frames.push((name.clone(), load_hdr(e)?, load_hdr(t)?));
        inputs.push(e.clone());
        inputs.push(t.clone());
    }
    let report = quality_report(&frames)?;
    write_report(out_csv, "eval", &inputs, &report)?;
    let m = &report.aggregates.mean;
    println!(
        "{} frames: PSNR-mu {} dB, SSIM-mu {}, PU-PSNR {} dB, PU-SSIM {}",
        report.rows.len(),
        m.psnr_mu,
        m.ssim_mu,
        m.pu_psnr,
        m.pu_ssim
    );
    Ok(())
}

pub fn cmd_stats(hdr_dir: &Path, out_csv: &Path) -> Result<()> {
    let files = pfm_files(hdr_dir)?;
    if files.is_empty() {
        return Err(Error::Validation(format!("{} holds no .pfm frames", hdr_dir.display())));
    }
    let frames = files
        .iter()
        .map(|(name, p)| Ok((name.clone(), load_hdr(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = diversity_report(&frames)?;
    let inputs: Vec<PathBuf> = files.into_iter().map(|(_, p)| p).collect();
    write_report(out_csv, "stats", &inputs, &report)?;
    println!("{} frames: statistics written to {}", report.rows.len(), out_csv.display());
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let evs = args
        .evs
        .split(',')
        .map(|t| {
            t.trim()
                .trim_start_matches('+')
                .parse::<i32>()
                .map_err(|_| Error::Parameter(format!("bad EV {t:?} in {:?}", args.evs)))
        })
        .collect::<Result<Vec<_>>>()?;
    if args.frames < 3 || args.height < 16 || args.width < 16 {
        return Err(Error::Parameter("synthetic scenes need at least 3 frames of 16x16".into()));
    }
    let scene = SyntheticScene::new(args.scene, args.height, args.width, args.frames, args.seed);
    scene.write_stacks(&args.out_dir, &evs, args.noise, args.gamma, args.seed)?;
    println!(
        "{} scene: {} frames of {}x{} at EV {evs:?} in {}",
        args.scene.name(),
        args.frames,
        args.height,
        args.width,
        args.out_dir.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Numeric("nan".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Degenerate("empty".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Validation("bad".into())), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::Parameter("bad".into())), EXIT_VALIDATION);
        assert_eq!(run(["hdrv", "--help"]), EXIT_OK);
        assert_eq!(run(["hdrv", "merge"]), EXIT_VALIDATION);
    }

    #[test]
    fn relative_paths() {
        assert_eq!(relative_to(Path::new("/a/b/c.png"), Path::new("/a/b")), PathBuf::from("c.png"));
        assert_eq!(relative_to(Path::new("/a/s/f/c.png"), Path::new("/a/m")), PathBuf::from("../s/f/c.png"));
    }

    #[test]
    fn flags_override_config() {
        let args = ReconstructArgs {
            manifest: "m.json".into(),
            out_dir: "out".into(),
            config: None,
            workers: None,
            no_align: true,
            dump_intermediates: true,
            levels: Some(2),
            radius: Some(7),
        };
        let cfg = resolve_config(&args).unwrap();
        assert!(!cfg.align && cfg.dump_intermediates);
        assert_eq!((cfg.local.levels, cfg.global.levels, cfg.local.radius), (2, 2, 7));
    }
}

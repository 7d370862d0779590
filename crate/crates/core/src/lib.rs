//! Alternating-exposure HDR video reconstruction.
//!
//! The pipeline linearizes each LDR frame, aligns its neighbours to it in two
//! stages (a global fit over eight offset bases, then a coarse-to-fine
//! adaptive separable convolution), and fuses the aligned frames with
//! exposure-quality weights. Quality and dataset-diversity metrics live in
//! [`metrics`].

pub mod cli;
pub mod error;
pub mod imagecore;
pub mod global_align;
pub mod local_align;
pub mod masks;
pub mod metrics;
pub mod radiometry;
pub mod reconstruct;
pub mod synth;

pub use error::{Error, Result};
pub use imagecore::{Domain, Image};

//! Per-frame fusion and the whole-video driver.
//!
//! Each frame is reconstructed from a three-frame window: both neighbours are
//! linearized, globally warped onto the center frame, refined with the local
//! pyramid and then merged with well-exposedness weights in the linear domain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global_align::{
    compose_global_flow, fit_global_weights_masked, make_offset_bases, validity_from_ldr, warp_bilinear,
    FitOptions, GlobalFit, GlobalWeights,
};
use crate::imagecore::{to_luminance, Domain, Image};
use crate::local_align::{align_local_pyramid, AlignSource, LocalAlignOptions};
use crate::masks::{wellness_map, DEFAULT_WELLNESS_SIGMA};
use crate::radiometry::{
    display_to_linear, mu_law, validate_pattern, AlternatingSequence, ExposureSpec, InputFrame, DEFAULT_GAMMA, DEFAULT_MU,
};

/// Extra weight given to the center frame during fusion.
pub const REFERENCE_WEIGHT: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub pattern: Vec<i32>,
    pub gamma: f64,
    pub mu: f64,
    pub align: bool,
    pub global: FitOptions,
    pub local: LocalAlignOptions,
    pub dump_intermediates: bool,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            pattern: vec![-3, 0],
            gamma: DEFAULT_GAMMA,
            mu: DEFAULT_MU,
            align: true,
            global: FitOptions::default(),
            local: LocalAlignOptions::default(),
            dump_intermediates: false,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        validate_pattern(&self.pattern)?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Parameter(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Parameter(format!("mu must be positive, got {}", self.mu)));
        }
        if self.global.levels == 0 || !(self.global.step > 0.0) {
            return Err(Error::Parameter("global fit needs levels >= 1 and a positive step".into()));
        }
        let l = &self.local;
        if l.levels == 0
            || l.block == 0
            || l.kernel_size % 2 == 0
            || l.radius > l.kernel_size / 2
            || !(0.0..=1.0).contains(&l.min_confidence)
        {
            return Err(Error::Parameter(format!(
                "invalid local alignment options: levels {}, block {}, kernel {}, radius {}, min confidence {}",
                l.levels, l.block, l.kernel_size, l.radius, l.min_confidence
            )));
        }
        Ok(())
    }
}

/// A neighbour resampled onto the reference grid, ready for fusion.
#[derive(Clone, Debug)]
pub struct AlignedNeighbor {
    pub ldr: Image,
    pub linear: Image,
    pub confidence: Image,
    pub spec: ExposureSpec,
}

impl AlignedNeighbor {
    /// An unaligned neighbour trusted everywhere.
    pub fn unaligned(frame: &InputFrame) -> Self {
        Self {
            ldr: frame.ldr.clone(),
            linear: frame.linear.clone(),
            confidence: Image::filled(frame.ldr.height(), frame.ldr.width(), 1, 1.0, Domain::LinearHdr)
                .expect("unit confidence"),
            spec: frame.spec,
        }
    }
}

/// Per-neighbour diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborDiagnostics {
    pub ev: i32,
    pub global_identity_loss: f64,
    pub global_final_loss: f64,
    pub mean_confidence: f64,
    pub voted_fraction: f64,
    pub max_local_displacement: f64,
    pub levels_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub prev: Option<NeighborDiagnostics>,
    pub next: Option<NeighborDiagnostics>,
}

#[derive(Clone, Debug)]
pub struct FrameResult {
    pub hdr: Image,
    pub global_alpha_prev: GlobalWeights,
    pub global_alpha_next: GlobalWeights,
    pub diagnostics: FrameDiagnostics,
    /// Aligned neighbours, kept only when intermediates are requested.
    pub intermediates: Option<[AlignedNeighbor; 2]>,
    pub wall_clock_s: f64,
}

/// Well-exposedness-weighted mean of the linearizations; the reference also
/// gets [`REFERENCE_WEIGHT`]. Pixels with no weight fall back to the reference.
pub fn fuse_aligned(reference: &InputFrame, neighbors: &[AlignedNeighbor]) -> Result<Image> {
    reference.spec.validate()?;
    let (h, w, c) = (reference.ldr.height(), reference.ldr.width(), reference.ldr.channels());
    for n in neighbors {
        n.spec.validate()?;
        if !n.ldr.same_shape(&reference.ldr) || !n.linear.same_shape(&reference.linear) {
            return Err(Error::Parameter("aligned neighbour shape differs from the reference".into()));
        }
        if n.confidence.height() != h || n.confidence.width() != w || n.confidence.channels() != 1 {
            return Err(Error::Parameter("confidence map must be one channel on the reference grid".into()));
        }
    }
    let ref_well = wellness_map(&reference.ldr, DEFAULT_WELLNESS_SIGMA)?;
    let weights: Vec<Vec<f64>> = neighbors
        .iter()
        .map(|n| {
            let well = wellness_map(&n.ldr, DEFAULT_WELLNESS_SIGMA)?;
            Ok(well
                .data()
                .iter()
                .zip(n.confidence.data())
                .map(|(&a, &b)| f64::from(a) * f64::from(b).clamp(0.0, 1.0))
                .collect())
        })
        .collect::<Result<_>>()?;
    let n = h * w;
    let mut data = vec![0.0f32; n * c];
    data.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        let ch = row / h;
        let base = (row % h) * w;
        let ref_lin = &reference.linear.plane(ch)[base..base + w];
        for (x, o) in out.iter_mut().enumerate() {
            let i = base + x;
            let wr = REFERENCE_WEIGHT * f64::from(ref_well.data()[i]);
            let mut num = wr * f64::from(ref_lin[x]);
            let mut den = wr;
            for (nb, wt) in neighbors.iter().zip(&weights) {
                num += wt[i] * f64::from(nb.linear.plane(ch)[i]);
                den += wt[i];
            }
            *o = if den > 0.0 { (num / den) as f32 } else { ref_lin[x] };
        }
    });
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("fusion produced non-finite values".into()));
    }
    Ok(Image::from_raw(h, w, c, data, Domain::LinearHdr))
}

/// Display levels bounding the radiance range both exposures record faithfully.
const COMMON_RANGE_DISPLAY: (f64, f64) = (0.05, 0.95);

/// Linear range recorded by both exposures: above the shorter one's shadows
/// and below the longer one's highlights.
fn common_range(a: &ExposureSpec, b: &ExposureSpec) -> (f32, f32) {
    let (short, long) = if a.time <= b.time { (a, b) } else { (b, a) };
    let lo = display_to_linear(COMMON_RANGE_DISPLAY.0, short);
    let hi = display_to_linear(COMMON_RANGE_DISPLAY.1, long);
    (lo.min(hi) as f32, hi as f32)
}

/// Stage 1 and 2 alignment of one neighbour onto the reference.
fn align_neighbor(
    cur: &InputFrame,
    nbr: &InputFrame,
    cfg: &ReconstructionConfig,
) -> Result<(AlignedNeighbor, GlobalWeights, NeighborDiagnostics)> {
    let (h, w) = (cur.ldr.height(), cur.ldr.width());
    let ref_valid = validity_from_ldr(&cur.ldr)?;
    let nbr_valid = validity_from_ldr(&nbr.ldr)?;
    let (lo, hi) = common_range(&cur.spec, &nbr.spec);
    let clip = |img: &Image| to_luminance(&img.map_values(Domain::LinearHdr, |v| v.clamp(lo, hi)));
    let fit = match fit_global_weights_masked(
        &clip(&cur.linear),
        &clip(&nbr.linear),
        Some(&ref_valid),
        Some(&nbr_valid),
        &cfg.global,
    ) {
        Err(Error::Degenerate(m)) => {
            log::warn!("global alignment skipped: {m}");
            GlobalFit {
                weights: GlobalWeights::zero(),
                identity_loss: f64::NAN,
                final_loss: f64::NAN,
            }
        }
        r => r.map_err(|e| e.context("global alignment"))?,
    };
    let bases = make_offset_bases(h, w)?;
    let flow = compose_global_flow(&fit.weights, &bases);
    let warped_lin = warp_bilinear(&nbr.linear, &flow)?;
    let warped_ldr = warp_bilinear(&nbr.ldr, &flow)?;

    let matching = |img: &Image| {
        img.map_values(Domain::LinearHdr, |v| mu_law(f64::from(v.clamp(lo, hi) / hi), cfg.mu) as f32)
    };
    let reference = AlignSource::new(matching(&cur.linear), Some(cur.ldr.clone()))?;
    let source = AlignSource::new(matching(&warped_lin), Some(warped_ldr.clone()))?;
    let local = align_local_pyramid(&reference, &source, &cfg.local).map_err(|e| e.context("local alignment"))?;
    let ldr = local.apply(&warped_ldr)?;
    let linear = local.apply(&warped_lin)?;
    // Blocks without valid votes carry no evidence against the committed
    // displacement; the reference is unusable there, so trust the neighbour.
    let confidence = Image::new(
        h,
        w,
        1,
        local
            .confidence
            .data()
            .iter()
            .zip(local.support.data())
            .map(|(&c, &s)| if s > 0.0 { c } else { 1.0 })
            .collect(),
        Domain::LinearHdr,
    )?;
    let diag = NeighborDiagnostics {
        ev: nbr.spec.ev,
        global_identity_loss: fit.identity_loss,
        global_final_loss: fit.final_loss,
        mean_confidence: local.confidence.mean(),
        voted_fraction: local.support.mean(),
        max_local_displacement: local.displacement.max_magnitude(),
        levels_used: local.levels_used,
    };
    if local.level_clamped() {
        log::warn!("local pyramid clamped to {} of {} levels", local.levels_used, local.levels_requested);
    }
    Ok((
        AlignedNeighbor {
            ldr,
            linear,
            confidence,
            spec: nbr.spec,
        },
        fit.weights,
        diag,
    ))
}

/// Reconstructs the HDR frame for `cur` from its two neighbours.
pub fn reconstruct_frame(
    prev: &InputFrame,
    cur: &InputFrame,
    next: &InputFrame,
    cfg: &ReconstructionConfig,
) -> Result<FrameResult> {
    let start = std::time::Instant::now();
    cfg.validate()?;
    for f in [prev, next] {
        if !f.ldr.same_shape(&cur.ldr) {
            return Err(Error::Parameter(format!(
                "frame dimensions differ: {}x{}x{} vs {}x{}x{}",
                f.ldr.height(),
                f.ldr.width(),
                f.ldr.channels(),
                cur.ldr.height(),
                cur.ldr.width(),
                cur.ldr.channels()
            )));
        }
    }
    if !cfg.align {
        let neighbors = [AlignedNeighbor::unaligned(prev), AlignedNeighbor::unaligned(next)];
        let hdr = fuse_aligned(cur, &neighbors).map_err(|e| e.context("fusion"))?;
        return Ok(FrameResult {
            hdr,
            global_alpha_prev: GlobalWeights::zero(),
            global_alpha_next: GlobalWeights::zero(),
            diagnostics: FrameDiagnostics { prev: None, next: None },
            intermediates: cfg.dump_intermediates.then_some(neighbors),
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
    }
    let (ap, alpha_prev, dp) = align_neighbor(cur, prev, cfg).map_err(|e| e.context("previous neighbour"))?;
    let (an, alpha_next, dn) = align_neighbor(cur, next, cfg).map_err(|e| e.context("next neighbour"))?;
    let neighbors = [ap, an];
    let hdr = fuse_aligned(cur, &neighbors).map_err(|e| e.context("fusion"))?;
    Ok(FrameResult {
        hdr,
        global_alpha_prev: alpha_prev,
        global_alpha_next: alpha_next,
        diagnostics: FrameDiagnostics {
            prev: Some(dp),
            next: Some(dn),
        },
        intermediates: cfg.dump_intermediates.then_some(neighbors),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Indices of the `(prev, next)` neighbours of frame `i`; boundary frames
/// reuse their single neighbour twice.
pub fn window(i: usize, n: usize) -> (usize, usize) {
    let prev = if i == 0 { 1 } else { i - 1 };
    let next = if i + 1 == n { n - 2 } else { i + 1 };
    (prev, next)
}

/// Reconstructs every frame, in order, on the current rayon pool.
pub fn reconstruct_frames(frames: &[InputFrame], cfg: &ReconstructionConfig) -> Result<Vec<FrameResult>> {
    if frames.len() < 3 {
        return Err(Error::Parameter(format!(
            "sequence needs at least 3 frames, got {}",
            frames.len()
        )));
    }
    cfg.validate()?;
    let n = frames.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (p, q) = window(i, n);
            reconstruct_frame(&frames[p], &frames[i], &frames[q], cfg).map_err(|e| e.context(format!("frame {i}")))
        })
        .collect()
}

pub fn reconstruct_video(seq: &AlternatingSequence, cfg: &ReconstructionConfig) -> Result<Vec<FrameResult>> {
    let frames = seq
        .frames
        .iter()
        .map(|(img, spec)| InputFrame::new(img.clone(), *spec))
        .collect::<Result<Vec<_>>>()?;
    reconstruct_frames(&frames, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radiometry::simulate_exposure_stack;
    use crate::synth::Texture;

    fn textured_hdr(h: usize, w: usize, seed: u64) -> Image {
        let tex = Texture::random(seed, (0.05, 3.0));
        Image::from_fn(h, w, 3, Domain::LinearHdr, |c, y, x| tex.radiance(y as f64, x as f64)[c] as f32).unwrap()
    }

    fn frame(hdr: &Image, ev: i32) -> InputFrame {
        let s = simulate_exposure_stack(hdr, &[ev], 16, 0.0, DEFAULT_GAMMA, 0).unwrap();
        let (spec, ldr) = s.shots()[0].clone();
        InputFrame::new(ldr, spec).unwrap()
    }

    #[test]
    fn identical_neighbors_reproduce_reference() {
        let hdr = textured_hdr(16, 16, 1);
        let f = frame(&hdr, 0);
        let n = AlignedNeighbor::unaligned(&f);
        let out = fuse_aligned(&f, &[n.clone(), n]).unwrap();
        assert!(out.max_abs_diff(&f.linear).unwrap() < 1e-6 * 4.0);
    }

    #[test]
    fn zero_confidence_neighbors_are_ignored() {
        let hdr = textured_hdr(16, 16, 2);
        let f = frame(&hdr, 0);
        let mut n = AlignedNeighbor::unaligned(&frame(&hdr, -3));
        n.confidence = Image::filled(16, 16, 1, 0.0, Domain::LinearHdr).unwrap();
        let out = fuse_aligned(&f, &[n.clone(), n]).unwrap();
        assert_eq!(out, f.linear);
    }

    #[test]
    fn clipped_reference_takes_neighbor() {
        let hdr = Image::filled(8, 8, 3, 3.0, Domain::LinearHdr).unwrap();
        let f = frame(&hdr, 0);
        assert!(f.ldr.data().iter().all(|&v| v == 1.0));
        let nb = frame(&hdr, -3);
        let n = AlignedNeighbor::unaligned(&nb);
        let out = fuse_aligned(&f, &[n.clone(), n]).unwrap();
        for (o, t) in out.data().iter().zip(nb.linear.data()) {
            assert!((o / t - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn fusion_stays_in_source_envelope() {
        let hdr = textured_hdr(24, 24, 3);
        let a = frame(&hdr, 0);
        let b = frame(&hdr, -2);
        let c = frame(&hdr, 1);
        let out = fuse_aligned(&a, &[AlignedNeighbor::unaligned(&b), AlignedNeighbor::unaligned(&c)]).unwrap();
        for i in 0..out.data().len() {
            let vals = [a.linear.data()[i], b.linear.data()[i], c.linear.data()[i]];
            let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = vals.iter().copied().fold(0.0, f32::max);
            let v = out.data()[i];
            assert!(v >= lo * (1.0 - 1e-6) && v <= hi * (1.0 + 1e-6));
        }
    }

    #[test]
    fn invalid_exposure_rejected() {
        let hdr = textured_hdr(8, 8, 4);
        let f = frame(&hdr, 0);
        let mut n = AlignedNeighbor::unaligned(&f);
        n.spec = ExposureSpec {
            ev: 0,
            time: 0.0,
            gamma: 2.2,
        };
        assert!(matches!(fuse_aligned(&f, &[n]), Err(Error::Parameter(_))));
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(window(0, 8), (1, 1));
        assert_eq!(window(7, 8), (6, 6));
        assert_eq!(window(3, 8), (2, 4));
        let interior = (0..8).filter(|&i| window(i, 8).0 != window(i, 8).1).count();
        assert_eq!(interior, 6);
    }

    #[test]
    fn short_sequence_rejected() {
        let hdr = textured_hdr(16, 16, 5);
        let frames = vec![frame(&hdr, 0), frame(&hdr, -3)];
        assert!(matches!(
            reconstruct_frames(&frames, &ReconstructionConfig::default()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = ReconstructionConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ReconstructionConfig>(&text).unwrap(), cfg);
        let partial: ReconstructionConfig = serde_json::from_str(r#"{"align": false}"#).unwrap();
        assert!(!partial.align);
        assert_eq!(partial.pattern, vec![-3, 0]);
        let bad = ReconstructionConfig {
            pattern: vec![0, 0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

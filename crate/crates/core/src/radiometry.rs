//! Exposure-domain conversions, μ-law tonemapping, multi-exposure merging and
//! alternating-exposure sequence assembly.
//!
//! The camera response is modelled as a pure power law: a display value `z`
//! shot with exposure time `t` corresponds to linear radiance `z^γ / t`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{load_image, Domain, Image};

pub const DEFAULT_GAMMA: f64 = 2.2;
pub const DEFAULT_MU: f64 = 5000.0;
/// Exposure time of the EV 0 shot; only time ratios matter.
pub const REFERENCE_TIME: f64 = 1.0;

/// Tolerance when accepting tonemapper input slightly outside `[0, 1]`.
const UNIT_RANGE_TOL: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureSpec {
    /// Stops relative to the reference exposure.
    pub ev: i32,
    /// Exposure time in seconds.
    pub time: f64,
    pub gamma: f64,
}

impl ExposureSpec {
    /// `time = REFERENCE_TIME * 2^ev`.
    pub fn from_ev(ev: i32, gamma: f64) -> Self {
        Self::from_ev_with_reference(ev, REFERENCE_TIME, gamma)
    }

    pub fn from_ev_with_reference(ev: i32, reference_time: f64, gamma: f64) -> Self {
        Self {
            ev,
            time: reference_time * 2f64.powi(ev),
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.time > 0.0 && self.time.is_finite()) {
            return Err(Error::Parameter(format!(
                "exposure time must be positive, got {}",
                self.time
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Parameter(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Co-registered LDR shots of one static frame, sorted by EV.
#[derive(Clone, Debug)]
pub struct MultiExposureStack {
    pub frame_id: usize,
    shots: Vec<(ExposureSpec, Image)>,
}

impl MultiExposureStack {
    pub fn new(frame_id: usize, mut shots: Vec<(ExposureSpec, Image)>) -> Result<Self> {
        if shots.len() < 2 {
            return Err(Error::Parameter(format!(
                "frame {frame_id}: a stack needs at least 2 shots, got {}",
                shots.len()
            )));
        }
        shots.sort_by_key(|(s, _)| s.ev);
        let first = &shots[0].1;
        for (i, (spec, img)) in shots.iter().enumerate() {
            spec.validate()
                .map_err(|e| e.context(format!("frame {frame_id} shot EV {}", spec.ev)))?;
            if img.domain() != Domain::LdrDisplay {
                return Err(Error::Validation(format!(
                    "frame {frame_id} shot EV {}: shots must be LDR",
                    spec.ev
                )));
            }
            if !img.same_shape(first) {
                return Err(Error::Validation(format!(
                    "frame {frame_id} shot EV {}: dimensions differ from EV {}",
                    spec.ev, shots[0].0.ev
                )));
            }
            if i > 0 && shots[i - 1].0.ev == spec.ev {
                return Err(Error::Validation(format!(
                    "frame {frame_id}: duplicate EV {}",
                    spec.ev
                )));
            }
        }
        Ok(Self { frame_id, shots })
    }

    pub fn shots(&self) -> &[(ExposureSpec, Image)] {
        &self.shots
    }

    pub fn shot(&self, ev: i32) -> Option<&(ExposureSpec, Image)> {
        self.shots.iter().find(|(s, _)| s.ev == ev)
    }

    pub fn evs(&self) -> Vec<i32> {
        self.shots.iter().map(|(s, _)| s.ev).collect()
    }
}

/// Frames cycling through a fixed EV pattern.
#[derive(Clone, Debug)]
pub struct AlternatingSequence {
    pub frames: Vec<(Image, ExposureSpec)>,
    pub pattern: Vec<i32>,
}

/// An LDR frame together with its linearization.
#[derive(Clone, Debug)]
pub struct InputFrame {
    pub ldr: Image,
    pub linear: Image,
    pub spec: ExposureSpec,
}

impl InputFrame {
    pub fn new(ldr: Image, spec: ExposureSpec) -> Result<Self> {
        let linear = ldr_to_linear(&ldr, &spec)?;
        Ok(Self { ldr, linear, spec })
    }
}

/// Scalar form of [`ldr_to_linear`].
#[inline]
pub fn display_to_linear(z: f64, spec: &ExposureSpec) -> f64 {
    z.powf(spec.gamma) / spec.time
}

/// Scalar form of [`linear_to_ldr`]: clip, gamma-compress, quantize.
#[inline]
pub fn linear_to_display(e: f64, spec: &ExposureSpec, bits: u32) -> f64 {
    let levels = f64::from((1u32 << bits) - 1);
    let z = (e * spec.time).max(0.0).powf(1.0 / spec.gamma).clamp(0.0, 1.0);
    (z * levels).round() / levels
}

pub fn ldr_to_linear(img: &Image, spec: &ExposureSpec) -> Result<Image> {
    spec.validate()?;
    if img.domain() != Domain::LdrDisplay {
        return Err(Error::Domain("ldr_to_linear expects an LDR image".into()));
    }
    let spec = *spec;
    Ok(img.map_values(Domain::LinearHdr, move |z| {
        display_to_linear(f64::from(z), &spec) as f32
    }))
}

pub fn linear_to_ldr(img: &Image, spec: &ExposureSpec, bits: u32) -> Result<Image> {
    spec.validate()?;
    if bits != 8 && bits != 16 {
        return Err(Error::Parameter(format!("bits must be 8 or 16, got {bits}")));
    }
    if img.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("linear_to_ldr input must be finite".into()));
    }
    let spec = *spec;
    Ok(img.map_values(Domain::LdrDisplay, move |e| {
        linear_to_display(f64::from(e), &spec, bits) as f32
    }))
}

/// `T(h) = ln(1 + μh) / ln(1 + μ)`.
#[inline]
pub fn mu_law(h: f64, mu: f64) -> f64 {
    (mu * h).ln_1p() / mu.ln_1p()
}

/// Elementwise μ-law of an image normalized to `[0, 1]`.
pub fn mu_tonemap(img: &Image, mu: f64) -> Result<Image> {
    if !(mu > 0.0) {
        return Err(Error::Parameter(format!("mu must be positive, got {mu}")));
    }
    if let Some(v) = img
        .data()
        .iter()
        .find(|v| !(-UNIT_RANGE_TOL..=1.0 + UNIT_RANGE_TOL).contains(*v))
    {
        return Err(Error::Domain(format!(
            "mu_tonemap input {v} outside [0, 1]; normalize by the peak first"
        )));
    }
    Ok(img.map_values(Domain::LdrDisplay, move |h| {
        mu_law(f64::from(h.clamp(0.0, 1.0)), mu) as f32
    }))
}

/// Mean absolute difference between μ-law tonemapped images.
pub fn mu_l1_loss(estimate: &Image, truth: &Image, mu: f64) -> Result<f64> {
    if !estimate.same_shape(truth) {
        return Err(Error::Parameter(format!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            estimate.height(),
            estimate.width(),
            estimate.channels(),
            truth.height(),
            truth.width(),
            truth.channels()
        )));
    }
    let a = mu_tonemap(estimate, mu)?;
    let b = mu_tonemap(truth, mu)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Triangle weight peaking at mid-gray, zero at both clip points.
#[inline]
pub fn hat_weight(z: f64) -> f64 {
    (1.0 - (2.0 * z - 1.0).abs()).max(0.0)
}

/// Weighted merge of a stack into linear radiance.
///
/// A sample with zero total weight falls back to the shortest exposure when it
/// is bright-clipped and to the longest exposure when it is dark-clipped.
pub fn merge_stack_to_hdr(stack: &MultiExposureStack) -> Result<Image> {
    let shots = stack.shots();
    if shots.len() < 2 {
        return Err(Error::Parameter("merge needs at least 2 shots".into()));
    }
    let proto = &shots[0].1;
    let shortest = shots
        .iter()
        .min_by(|a, b| a.0.time.total_cmp(&b.0.time))
        .unwrap();
    let longest = shots
        .iter()
        .max_by(|a, b| a.0.time.total_cmp(&b.0.time))
        .unwrap();
    let n = proto.data().len();
    let data: Vec<f32> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (spec, img) in shots {
                let z = f64::from(img.data()[i]);
                let w = hat_weight(z);
                if w > 0.0 {
                    num += w * display_to_linear(z, spec);
                    den += w;
                }
            }
            if den > 0.0 {
                (num / den) as f32
            } else {
                let zs = f64::from(shortest.1.data()[i]);
                if zs >= 0.5 {
                    display_to_linear(zs, &shortest.0) as f32
                } else {
                    display_to_linear(f64::from(longest.1.data()[i]), &longest.0) as f32
                }
            }
        })
        .collect();
    Image::new(
        proto.height(),
        proto.width(),
        proto.channels(),
        data,
        Domain::LinearHdr,
    )
}

/// Checks that an EV cycle alternates, including across the wrap-around.
pub fn validate_pattern(pattern: &[i32]) -> Result<()> {
    if pattern.len() < 2 {
        return Err(Error::Parameter(format!(
            "an exposure pattern needs at least 2 entries, got {pattern:?}"
        )));
    }
    for i in 0..pattern.len() {
        let next = pattern[(i + 1) % pattern.len()];
        if pattern[i] == next {
            return Err(Error::Parameter(format!(
                "pattern {pattern:?} places EV {next} on consecutive frames"
            )));
        }
    }
    Ok(())
}

/// Parses `"-3,0"`, `"-2,+1"` and similar.
pub fn parse_pattern(s: &str) -> Result<Vec<i32>> {
    let pattern = s
        .split(',')
        .map(|t| {
            let t = t.trim();
            t.trim_start_matches('+')
                .parse::<i32>()
                .map_err(|_| Error::Parameter(format!("bad EV {t:?} in pattern {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_pattern(&pattern)?;
    Ok(pattern)
}

/// Frame `i` takes the shot with EV `pattern[i % len]` from `stacks[i]`.
pub fn make_alternating_sequence(
    stacks: &[MultiExposureStack],
    pattern: &[i32],
) -> Result<AlternatingSequence> {
    validate_pattern(pattern)?;
    let frames = stacks
        .iter()
        .enumerate()
        .map(|(i, stack)| {
            let ev = pattern[i % pattern.len()];
            stack
                .shot(ev)
                .map(|(spec, img)| (img.clone(), *spec))
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "frame {i} (stack {}) has no shot at EV {ev}; available {:?}",
                        stack.frame_id,
                        stack.evs()
                    ))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlternatingSequence {
        frames,
        pattern: pattern.to_vec(),
    })
}

/// Renders an HDR image at each EV with optional Gaussian read noise.
///
/// Noise is added in the display domain before quantization and is a pure
/// function of `seed`.
pub fn simulate_exposure_stack(
    hdr: &Image,
    evs: &[i32],
    bits: u32,
    noise_sigma: f64,
    gamma: f64,
    seed: u64,
) -> Result<MultiExposureStack> {
    if evs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(format!(
            "EVs must be strictly increasing, got {evs:?}"
        )));
    }
    if hdr.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("simulated radiance must be finite".into()));
    }
    if noise_sigma < 0.0 {
        return Err(Error::Parameter("noise sigma must be non-negative".into()));
    }
    let mut shots = Vec::with_capacity(evs.len());
    for (k, &ev) in evs.iter().enumerate() {
        let spec = ExposureSpec::from_ev(ev, gamma);
        let img = if noise_sigma == 0.0 {
            linear_to_ldr(hdr, &spec, bits)?
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 0x9E37_79B9));
            let normal = Normal::new(0.0, noise_sigma)
                .map_err(|e| Error::Parameter(format!("noise: {e}")))?;
            let levels = f64::from((1u32 << bits) - 1);
            let data = hdr
                .data()
                .iter()
                .map(|&e| {
                    let z = (f64::from(e) * spec.time).max(0.0).powf(1.0 / gamma);
                    let z = (z + normal.sample(&mut rng)).clamp(0.0, 1.0);
                    ((z * levels).round() / levels) as f32
                })
                .collect();
            Image::new(
                hdr.height(),
                hdr.width(),
                hdr.channels(),
                data,
                Domain::LdrDisplay,
            )?
        };
        shots.push((spec, img));
    }
    if shots.len() == 1 {
        // Degenerate single-shot stacks are allowed for simulation only.
        return Ok(MultiExposureStack {
            frame_id: 0,
            shots,
        });
    }
    MultiExposureStack::new(0, shots)
}

/// Per-frame stack metadata stored as `stack.json` in a frame directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StackMetadata {
    pub frame: usize,
    pub shots: Vec<ShotMetadata>,
    pub gamma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShotMetadata {
    pub ev: i32,
    pub time_s: f64,
    pub file: String,
}

pub const STACK_METADATA_FILE: &str = "stack.json";

pub fn read_stack_metadata(dir: &Path) -> Result<StackMetadata> {
    let path = dir.join(STACK_METADATA_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Decode {
        offset: 0,
        msg: format!("{}: {e}", path.display()),
    })
}

/// Loads every shot listed in a frame directory's `stack.json`.
pub fn load_stack(dir: &Path) -> Result<MultiExposureStack> {
    let meta = read_stack_metadata(dir)?;
    let mut shots = Vec::with_capacity(meta.shots.len());
    for shot in &meta.shots {
        let spec = ExposureSpec {
            ev: shot.ev,
            time: shot.time_s,
            gamma: meta.gamma,
        };
        spec.validate()
            .map_err(|e| e.context(format!("shot {} (EV {})", shot.file, shot.ev)))?;
        let img = load_image(dir.join(&shot.file), Domain::LdrDisplay)
            .map_err(|e| e.context(format!("shot {} (EV {})", shot.file, shot.ev)))?;
        shots.push((spec, img));
    }
    MultiExposureStack::new(meta.frame, shots)
}

/// Sequence manifest pointing at the chosen LDR shot of every frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub pattern: Vec<i32>,
    pub gamma: f64,
    pub frames: Vec<ManifestFrame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub index: usize,
    pub file: PathBuf,
    pub ev: i32,
    pub time_s: f64,
}

impl SequenceManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Decode {
            offset: 0,
            msg: format!("{}: {e}", path.display()),
        })?;
        validate_pattern(&m.pattern)?;
        Ok(m)
    }

    /// Loads the referenced frames; relative paths resolve against `base`.
    pub fn load_sequence(&self, base: &Path) -> Result<AlternatingSequence> {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let path = if f.file.is_absolute() {
                    f.file.clone()
                } else {
                    base.join(&f.file)
                };
                let img = load_image(&path, Domain::LdrDisplay)
                    .map_err(|e| e.context(format!("frame {}", f.index)))?;
                let spec = ExposureSpec {
                    ev: f.ev,
                    time: f.time_s,
                    gamma: self.gamma,
                };
                spec.validate()
                    .map_err(|e| e.context(format!("frame {}", f.index)))?;
                Ok((img, spec))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AlternatingSequence {
            frames,
            pattern: self.pattern.clone(),
        })
    }
}

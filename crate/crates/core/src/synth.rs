//! Seeded synthetic scenes with exactly known motion.
//!
//! Textures are continuous functions of position, so every warped frame is
//! rendered by evaluating the texture at the pre-image of each pixel rather
//! than by resampling another raster.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global_align::{global_flow_at, FlowField, GlobalWeights};
use crate::imagecore::{save_image, save_image_with_depth, BitDepth, Domain, Image};
use crate::radiometry::{
    simulate_exposure_stack, ExposureSpec, InputFrame, ShotMetadata, StackMetadata, STACK_METADATA_FILE,
};

#[derive(Clone, Debug)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

/// Smooth random field with values in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct Texture {
    waves: Vec<Wave>,
    norm: f64,
    tint: [Vec<Wave>; 3],
    /// Radiance at texture value 0 and 1.
    pub radiance_range: (f64, f64),
}

fn random_waves(rng: &mut ChaCha8Rng, n: usize, min_wavelength: f64, max_wavelength: f64) -> Vec<Wave> {
    (0..n)
        .map(|_| {
            let lambda = min_wavelength * (max_wavelength / min_wavelength).powf(rng.random::<f64>());
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let k = std::f64::consts::TAU / lambda;
            Wave {
                kx: k * theta.cos(),
                ky: k * theta.sin(),
                phase: rng.random::<f64>() * std::f64::consts::TAU,
                // Longer waves carry more energy, like natural images.
                amp: (lambda / max_wavelength).sqrt(),
            }
        })
        .collect()
}

fn wave_sum(waves: &[Wave], y: f64, x: f64) -> f64 {
    waves
        .iter()
        .map(|w| w.amp * (w.kx * x + w.ky * y + w.phase).sin())
        .sum()
}

impl Texture {
    pub fn random(seed: u64, radiance_range: (f64, f64)) -> Self {
        Self::with_scale(seed, radiance_range, 6.0, 64.0)
    }

    pub fn with_scale(seed: u64, radiance_range: (f64, f64), min_wavelength: f64, max_wavelength: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = random_waves(&mut rng, 40, min_wavelength, max_wavelength);
        let norm = (waves.iter().map(|w| w.amp * w.amp).sum::<f64>() / 2.0).sqrt();
        let tint = [
            random_waves(&mut rng, 3, 80.0, 200.0),
            random_waves(&mut rng, 3, 80.0, 200.0),
            random_waves(&mut rng, 3, 80.0, 200.0),
        ];
        Self {
            waves,
            norm,
            tint,
            radiance_range,
        }
    }

    pub fn value(&self, y: f64, x: f64) -> f64 {
        0.5 + 0.5 * (1.2 * wave_sum(&self.waves, y, x) / self.norm).tanh()
    }

    /// Linear RGB radiance, log-spaced across `radiance_range` with a mild tint.
    pub fn radiance(&self, y: f64, x: f64) -> [f64; 3] {
        let (lo, hi) = self.radiance_range;
        let e = lo * (hi / lo).powf(self.value(y, x));
        std::array::from_fn(|c| {
            let t = 1.0 + 0.15 * (wave_sum(&self.tint[c], y, x) / 1.5).tanh();
            e * t
        })
    }
}

/// Renders a single-channel image of `texture.value` at `map(y, x)`.
pub fn render_value(height: usize, width: usize, texture: &Texture, map: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    Image::from_fn(height, width, 1, Domain::LinearHdr, |_, y, x| {
        let (sy, sx) = map(y as f64, x as f64);
        texture.value(sy, sx) as f32
    })
    .expect("texture values are finite and positive")
}

/// Solves `p + flow(p) = q` for `p` by fixed-point iteration.
pub fn invert_flow(q: (f64, f64), flow: impl Fn(f64, f64) -> (f64, f64)) -> (f64, f64) {
    let (qy, qx) = q;
    let (mut py, mut px) = q;
    for _ in 0..50 {
        let (u, v) = flow(py, px);
        let (ny, nx) = (qy - v, qx - u);
        let done = (ny - py).abs() + (nx - px).abs() < 1e-10;
        py = ny;
        px = nx;
        if done {
            break;
        }
    }
    (py, px)
}

/// A reference/neighbour pair where `neighbor(p + flow(p)) == reference(p)` exactly.
pub struct WarpPair {
    pub reference: Image,
    pub neighbor: Image,
    pub flow: FlowField,
}

/// Builds a pair related by the continuous backward flow `flow(y, x) -> (u, v)`.
pub fn warp_pair(
    height: usize,
    width: usize,
    texture: &Texture,
    flow: impl Fn(f64, f64) -> (f64, f64) + Copy,
) -> Result<WarpPair> {
    let reference = render_value(height, width, texture, |y, x| (y, x));
    let neighbor = render_value(height, width, texture, |y, x| invert_flow((y, x), flow));
    let truth = FlowField::from_fn(height, width, |y, x| {
        let (u, v) = flow(y as f64, x as f64);
        (u as f32, v as f32)
    })?;
    Ok(WarpPair {
        reference,
        neighbor,
        flow: truth,
    })
}

pub fn translation_pair(height: usize, width: usize, texture: &Texture, dx: f64, dy: f64) -> Result<WarpPair> {
    warp_pair(height, width, texture, move |_, _| (dx, dy))
}

/// Rigid rotation by `degrees` about the grid center.
pub fn rotation_pair(height: usize, width: usize, texture: &Texture, degrees: f64) -> Result<WarpPair> {
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (height - 1) as f64 / 2.0;
    let cx = (width - 1) as f64 / 2.0;
    warp_pair(height, width, texture, move |y, x| {
        let (ry, rx) = (y - cy, x - cx);
        let nx = c * rx - s * ry + cx;
        let ny = s * rx + c * ry + cy;
        (nx - x, ny - y)
    })
}

/// Flow built from basis weights, evaluated continuously.
pub fn basis_pair(height: usize, width: usize, texture: &Texture, weights: GlobalWeights) -> Result<WarpPair> {
    warp_pair(height, width, texture, move |y, x| global_flow_at(&weights, height, width, y, x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// Whole-frame camera motion only.
    GlobalMotion,
    /// Static background with a moving object.
    LocalMotion,
    /// Camera motion plus an independently moving object.
    FullMotion,
}

impl SceneKind {
    pub fn all() -> [SceneKind; 3] {
        [SceneKind::GlobalMotion, SceneKind::LocalMotion, SceneKind::FullMotion]
    }

    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::GlobalMotion => "global-motion",
            SceneKind::LocalMotion => "local-motion",
            SceneKind::FullMotion => "full-motion",
        }
    }
}

/// A synthetic video: background texture, optional moving disc, per-frame motion.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub kind: SceneKind,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Background displacement per frame, pixels (x, y).
    pub camera_step: (f64, f64),
    /// Object displacement per frame relative to the background, pixels (x, y).
    pub object_step: (f64, f64),
    pub object_radius: f64,
    background: Texture,
    object: Texture,
}

pub const DEFAULT_RADIANCE_RANGE: (f64, f64) = (0.03, 4.0);

impl SyntheticScene {
    pub fn new(kind: SceneKind, height: usize, width: usize, frames: usize, seed: u64) -> Self {
        let (camera_step, object_step) = match kind {
            SceneKind::GlobalMotion => ((3.0, -2.0), (0.0, 0.0)),
            SceneKind::LocalMotion => ((0.0, 0.0), (4.0, 3.0)),
            SceneKind::FullMotion => ((2.0, 1.5), (-4.0, 3.0)),
        };
        Self {
            kind,
            height,
            width,
            frames,
            camera_step,
            object_step,
            object_radius: height.min(width) as f64 / 5.0,
            background: Texture::random(seed, DEFAULT_RADIANCE_RANGE),
            object: Texture::with_scale(seed ^ 0xA5A5_5A5A, (0.08, 6.0), 5.0, 30.0),
        }
    }

    fn has_object(&self) -> bool {
        self.kind != SceneKind::GlobalMotion
    }

    /// Object center in scene coordinates at frame `t`.
    fn object_center(&self, t: usize) -> (f64, f64) {
        let mid = self.frames as f64 / 2.0;
        let dt = t as f64 - mid;
        (
            self.height as f64 / 2.0 + dt * self.object_step.1,
            self.width as f64 / 2.0 + dt * self.object_step.0,
        )
    }

    /// Scene position seen by pixel `(y, x)` of frame `t`.
    fn background_coords(&self, t: usize, y: f64, x: f64) -> (f64, f64) {
        let dt = t as f64;
        // The camera pans by -step so content moves by +step in the image.
        (y - dt * self.camera_step.1, x - dt * self.camera_step.0)
    }

    pub fn radiance_at(&self, t: usize, y: f64, x: f64) -> [f64; 3] {
        let (sy, sx) = self.background_coords(t, y, x);
        if self.has_object() {
            let (cy, cx) = self.object_center(t);
            // Object coordinates ride with the camera too.
            let (oy, ox) = (sy - cy, sx - cx);
            let r = (oy * oy + ox * ox).sqrt();
            if r < self.object_radius {
                return self.object.radiance(oy, ox);
            }
        }
        self.background.radiance(sy, sx)
    }

    pub fn render_radiance(&self, t: usize) -> Image {
        Image::from_fn(self.height, self.width, 3, Domain::LinearHdr, |c, y, x| {
            self.radiance_at(t, y as f64, x as f64)[c] as f32
        })
        .expect("radiance is finite and positive")
    }

    /// Ground-truth backward flow from frame `from` onto frame `to`:
    /// `frame_to(p + flow(p)) == frame_from(p)` for background pixels.
    pub fn background_flow(&self, from: usize, to: usize) -> (f64, f64) {
        let dt = to as f64 - from as f64;
        (dt * self.camera_step.0, dt * self.camera_step.1)
    }

    /// Renders the alternating-exposure sequence plus per-frame radiance truth.
    pub fn render_sequence(&self, pattern: &[i32], bits: u32, noise_sigma: f64, gamma: f64, seed: u64) -> Result<SceneSequence> {
        crate::radiometry::validate_pattern(pattern)?;
        let mut frames = Vec::with_capacity(self.frames);
        let mut truths = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let hdr = self.render_radiance(t);
            let ev = pattern[t % pattern.len()];
            let stack = simulate_exposure_stack(&hdr, &[ev], bits, noise_sigma, gamma, seed.wrapping_add(t as u64))?;
            let (spec, ldr) = stack.shots()[0].clone();
            frames.push(InputFrame::new(ldr, spec)?);
            truths.push(hdr);
        }
        Ok(SceneSequence {
            frames,
            truths,
            pattern: pattern.to_vec(),
        })
    }

    /// Writes one directory per frame holding a full bracketed stack (16-bit PNG
    /// shots and `stack.json`) plus `truth/frame_%04d.pfm` radiance.
    pub fn write_stacks(&self, dir: &Path, evs: &[i32], noise_sigma: f64, gamma: f64, seed: u64) -> Result<()> {
        let truth_dir = dir.join("truth");
        std::fs::create_dir_all(&truth_dir).map_err(|e| Error::io(&truth_dir, e))?;
        for t in 0..self.frames {
            let hdr = self.render_radiance(t);
            save_image(&hdr, truth_dir.join(format!("frame_{t:04}.pfm")))?;
            let frame_dir = dir.join(format!("frame_{t:04}"));
            std::fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
            let stack = simulate_exposure_stack(&hdr, evs, 16, noise_sigma, gamma, seed.wrapping_add(t as u64))?;
            let mut shots = Vec::new();
            for (spec, img) in stack.shots() {
                let file = format!("ev{:+}.png", spec.ev);
                save_image_with_depth(img, frame_dir.join(&file), BitDepth::Sixteen)?;
                shots.push(ShotMetadata {
                    ev: spec.ev,
                    time_s: spec.time,
                    file,
                });
            }
            let meta = StackMetadata {
                frame: t,
                shots,
                gamma,
            };
            let path = frame_dir.join(STACK_METADATA_FILE);
            let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Fixed parameters of the reference motion scenes used for benchmarking.
pub mod shipped {
    pub const SIZE: usize = 192;
    pub const FRAMES: usize = 5;
    pub const SCENE_SEED: u64 = 7;
    pub const PATTERN: [i32; 2] = [-3, 0];
    pub const BITS: u32 = 8;
    pub const NOISE_SIGMA: f64 = 0.002;
    pub const NOISE_SEED: u64 = 1;
}

/// Renders the shipped alternating-exposure sequence for `kind`.
pub fn shipped_sequence(kind: SceneKind) -> Result<SceneSequence> {
    SyntheticScene::new(kind, shipped::SIZE, shipped::SIZE, shipped::FRAMES, shipped::SCENE_SEED).render_sequence(
        &shipped::PATTERN,
        shipped::BITS,
        shipped::NOISE_SIGMA,
        crate::radiometry::DEFAULT_GAMMA,
        shipped::NOISE_SEED,
    )
}

/// Rendered frames with their exposure metadata and radiance truth.
pub struct SceneSequence {
    pub frames: Vec<InputFrame>,
    pub truths: Vec<Image>,
    pub pattern: Vec<i32>,
}

impl SceneSequence {
    pub fn exposure(&self, t: usize) -> ExposureSpec {
        self.frames[t].spec
    }
}

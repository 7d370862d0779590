//! Global alignment with a fixed 8-field offset basis.
//!
//! A global flow is `O = Σ_k α_k n_k` where the `n_k` are dense fields spanning
//! the tangent space of 8-DoF homographies. The weights are fitted by
//! coarse-to-fine gradient descent on a robust photometric objective, with the
//! gradient taken analytically through bilinear sampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{bilinear_plane, bilinear_plane_grad, build_pyramid, Domain, Image};
use crate::masks::{wellness_map, DEFAULT_WELLNESS_SIGMA};

pub const NUM_BASES: usize = 8;
/// Charbonnier smoothing constant.
pub const CHARBONNIER_EPS: f64 = 1e-3;
/// Pixels whose well-exposedness falls below this carry no usable brightness.
pub const SATURATION_WELLNESS: f32 = 0.02;

/// Dense per-pixel displacement in pixels (x right, y down).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::Parameter("flow components do not match grid".into()));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("flow contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            u,
            v,
        })
    }

    /// Builds a flow from `f(y, x) -> (u, v)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Result<Self> {
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(y, x);
                u.push(a);
                v.push(b);
            }
        }
        Self::new(height, width, u, v)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn max_magnitude(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(a, b)| f64::from(*a).hypot(f64::from(*b)))
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f32) -> FlowField {
        FlowField {
            height: self.height,
            width: self.width,
            u: self.u.iter().map(|a| a * s).collect(),
            v: self.v.iter().map(|a| a * s).collect(),
        }
    }

    /// Elementwise sum; grids must match.
    pub fn add(&self, other: &FlowField) -> Result<FlowField> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Parameter("flow grid mismatch".into()));
        }
        Ok(FlowField {
            height: self.height,
            width: self.width,
            u: self.u.iter().zip(&other.u).map(|(a, b)| a + b).collect(),
            v: self.v.iter().zip(&other.v).map(|(a, b)| a + b).collect(),
        })
    }

    /// Nearest-neighbour upsample onto a finer grid with displacements scaled by `factor`.
    pub fn upsample_nearest(&self, height: usize, width: usize, factor: f32) -> FlowField {
        let ry = self.height as f64 / height as f64;
        let rx = self.width as f64 / width as f64;
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = ((y as f64 * ry) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = ((x as f64 * rx) as usize).min(self.width - 1);
                let (a, b) = self.at(sy, sx);
                u.push(a * factor);
                v.push(b * factor);
            }
        }
        FlowField {
            height,
            width,
            u,
            v,
        }
    }

    /// Mean Euclidean distance to `other`, ignoring a `margin`-pixel border.
    pub fn mean_endpoint_error(&self, other: &FlowField, margin: usize) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Parameter("flow grid mismatch".into()));
        }
        if 2 * margin >= self.height || 2 * margin >= self.width {
            return Err(Error::Parameter("margin leaves no pixels".into()));
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in margin..self.height - margin {
            for x in margin..self.width - margin {
                let (a, b) = self.at(y, x);
                let (c, d) = other.at(y, x);
                sum += (f64::from(a) - f64::from(c)).hypot(f64::from(b) - f64::from(d));
                n += 1;
            }
        }
        Ok(sum / n as f64)
    }
}

/// The eight normalized offset fields for one grid.
#[derive(Clone, Debug)]
pub struct OffsetBases {
    height: usize,
    width: usize,
    bases: Vec<FlowField>,
}

impl OffsetBases {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bases(&self) -> &[FlowField] {
        &self.bases
    }

    /// `G[k][l] = mean_p <n_k(p), n_l(p)>`, the metric the optimizer measures steps in.
    pub fn gram(&self) -> [[f64; NUM_BASES]; NUM_BASES] {
        let n = (self.height * self.width) as f64;
        let mut g = [[0.0; NUM_BASES]; NUM_BASES];
        for k in 0..NUM_BASES {
            for l in k..NUM_BASES {
                let (a, b) = (&self.bases[k], &self.bases[l]);
                let s: f64 = (0..a.u.len())
                    .map(|i| {
                        f64::from(a.u[i]) * f64::from(b.u[i]) + f64::from(a.v[i]) * f64::from(b.v[i])
                    })
                    .sum();
                g[k][l] = s / n;
                g[l][k] = s / n;
            }
        }
        g
    }
}

/// Weights of the eight offset bases, in pixels of peak displacement each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalWeights {
    pub alpha: [f64; NUM_BASES],
}

impl GlobalWeights {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn norm(&self) -> f64 {
        self.alpha.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().all(|a| a.is_finite())
    }
}

type Generator = fn(f64, f64) -> (f64, f64);

const GENERATORS: [Generator; NUM_BASES] = [
    |_, _| (1.0, 0.0),
    |_, _| (0.0, 1.0),
    |x, y| (-y, x),
    |x, y| (y, x),
    |x, _| (x, 0.0),
    |_, y| (0.0, y),
    |x, y| (x * x, x * y),
    |x, y| (x * y, y * y),
];

/// Per-basis peak magnitude over the pixel grid, before normalization.
fn basis_peaks(height: usize, width: usize) -> [f64; NUM_BASES] {
    let mut peaks = [0.0f64; NUM_BASES];
    for y in 0..height {
        for x in 0..width {
            let (nx, ny) = normalized_coords(height, width, y as f64, x as f64);
            for (p, g) in peaks.iter_mut().zip(GENERATORS) {
                let (a, b) = g(nx, ny);
                *p = p.max(a.hypot(b));
            }
        }
    }
    peaks
}

#[inline]
fn normalized_coords(height: usize, width: usize, y: f64, x: f64) -> (f64, f64) {
    (
        2.0 * x / (width - 1) as f64 - 1.0,
        2.0 * y / (height - 1) as f64 - 1.0,
    )
}

/// Builds the translation, rotation/shear, scale and quadratic perspective
/// fields on normalized coordinates in `[-1, 1]^2`, each scaled to a peak
/// displacement of one pixel.
pub fn make_offset_bases(height: usize, width: usize) -> Result<OffsetBases> {
    if height < 8 || width < 8 {
        return Err(Error::Parameter(format!(
            "offset bases need at least an 8x8 grid, got {height}x{width}"
        )));
    }
    let peaks = basis_peaks(height, width);
    let bases = GENERATORS
        .iter()
        .zip(peaks)
        .map(|(g, peak)| {
            let mut u = Vec::with_capacity(height * width);
            let mut v = Vec::with_capacity(height * width);
            for y in 0..height {
                for x in 0..width {
                    let (nx, ny) = normalized_coords(height, width, y as f64, x as f64);
                    let (a, b) = g(nx, ny);
                    u.push((a / peak) as f32);
                    v.push((b / peak) as f32);
                }
            }
            FlowField {
                height,
                width,
                u,
                v,
            }
        })
        .collect();
    Ok(OffsetBases {
        height,
        width,
        bases,
    })
}

/// Evaluates `Σ α_k n_k` at a continuous position of a `height x width` grid.
pub fn global_flow_at(weights: &GlobalWeights, height: usize, width: usize, y: f64, x: f64) -> (f64, f64) {
    let peaks = basis_peaks_cached(height, width);
    let (nx, ny) = normalized_coords(height, width, y, x);
    let mut u = 0.0;
    let mut v = 0.0;
    for k in 0..NUM_BASES {
        let (a, b) = GENERATORS[k](nx, ny);
        u += weights.alpha[k] * a / peaks[k];
        v += weights.alpha[k] * b / peaks[k];
    }
    (u, v)
}

fn basis_peaks_cached(height: usize, width: usize) -> [f64; NUM_BASES] {
    use std::collections::HashMap;
    use std::sync::Mutex;
    static CACHE: Mutex<Option<HashMap<(usize, usize), [f64; NUM_BASES]>>> = Mutex::new(None);
    let mut guard = CACHE.lock().unwrap_or_else(|e| e.into_inner());
    *guard
        .get_or_insert_with(HashMap::new)
        .entry((height, width))
        .or_insert_with(|| basis_peaks(height, width))
}

pub fn compose_global_flow(weights: &GlobalWeights, bases: &OffsetBases) -> FlowField {
    let n = bases.height * bases.width;
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    for (a, b) in weights.alpha.iter().zip(&bases.bases) {
        if *a == 0.0 {
            continue;
        }
        for i in 0..n {
            u[i] += a * f64::from(b.u[i]);
            v[i] += a * f64::from(b.v[i]);
        }
    }
    FlowField {
        height: bases.height,
        width: bases.width,
        u: u.into_iter().map(|x| x as f32).collect(),
        v: v.into_iter().map(|x| x as f32).collect(),
    }
}

/// Backward warp: `out(p) = img(p + flow(p))`, bilinear with edge clamping.
pub fn warp_bilinear(img: &Image, flow: &FlowField) -> Result<Image> {
    if flow.height != img.height() || flow.width != img.width() {
        return Err(Error::Parameter(format!(
            "flow {}x{} does not match image {}x{}",
            flow.height,
            flow.width,
            img.height(),
            img.width()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let mut data = vec![0.0f32; h * w * img.channels()];
    data.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        let c = row / h;
        let y = row % h;
        let plane = img.plane(c);
        for (x, o) in out.iter_mut().enumerate() {
            let (u, v) = flow.at(y, x);
            *o = bilinear_plane(plane, h, w, y as f64 + f64::from(v), x as f64 + f64::from(u)) as f32;
        }
    });
    if img.domain() == Domain::LdrDisplay {
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(Image::from_raw(h, w, img.channels(), data, img.domain()))
}

/// 0/1 validity map: pixels whose LDR well-exposedness is at least the saturation threshold.
pub fn validity_from_ldr(ldr: &Image) -> Result<Image> {
    let well = wellness_map(ldr, DEFAULT_WELLNESS_SIGMA)?;
    Ok(well.map_values(Domain::LinearHdr, |e| {
        if e >= SATURATION_WELLNESS {
            1.0
        } else {
            0.0
        }
    }))
}

#[inline]
fn charbonnier(r: f64) -> (f64, f64) {
    let rho = (r * r + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt();
    (rho, r / rho)
}

/// Robust photometric objective between a reference and a warped neighbour.
///
/// Pixels are excluded when the reference is invalid at `p` or the neighbour
/// is invalid at the nearest pixel to the warped sample point.
pub struct PhotometricObjective<'a> {
    reference: &'a Image,
    neighbor: &'a Image,
    ref_valid: Option<&'a Image>,
    nbr_valid: Option<&'a Image>,
    bases: &'a OffsetBases,
}

impl<'a> PhotometricObjective<'a> {
    pub fn new(reference: &'a Image, neighbor: &'a Image, bases: &'a OffsetBases) -> Result<Self> {
        if !reference.same_shape(neighbor) {
            return Err(Error::Parameter("reference and neighbour shapes differ".into()));
        }
        if bases.height != reference.height() || bases.width != reference.width() {
            return Err(Error::Parameter("bases built for a different grid".into()));
        }
        Ok(Self {
            reference,
            neighbor,
            ref_valid: None,
            nbr_valid: None,
            bases,
        })
    }

    pub fn with_validity(mut self, ref_valid: Option<&'a Image>, nbr_valid: Option<&'a Image>) -> Result<Self> {
        for m in [ref_valid, nbr_valid].into_iter().flatten() {
            if !m.same_size(self.reference) || m.channels() != 1 {
                return Err(Error::Parameter("validity map must be 1-channel on the image grid".into()));
            }
        }
        self.ref_valid = ref_valid;
        self.nbr_valid = nbr_valid;
        Ok(self)
    }

    pub fn loss(&self, alpha: &GlobalWeights) -> Result<f64> {
        self.evaluate(alpha, false).map(|(l, _)| l)
    }

    pub fn loss_and_grad(&self, alpha: &GlobalWeights) -> Result<(f64, [f64; NUM_BASES])> {
        self.evaluate(alpha, true)
    }

    fn evaluate(&self, alpha: &GlobalWeights, want_grad: bool) -> Result<(f64, [f64; NUM_BASES])> {
        let (h, w) = (self.reference.height(), self.reference.width());
        let channels = self.reference.channels();
        let bases = &self.bases.bases;
        let a = alpha.alpha;
        // Rows reduce independently, then sum in row order for determinism.
        let rows: Vec<(f64, usize, [f64; NUM_BASES])> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut loss = 0.0;
                let mut count = 0usize;
                let mut grad = [0.0; NUM_BASES];
                for x in 0..w {
                    let i = y * w + x;
                    if let Some(m) = self.ref_valid {
                        if m.data()[i] < 0.5 {
                            continue;
                        }
                    }
                    let mut u = 0.0;
                    let mut v = 0.0;
                    for k in 0..NUM_BASES {
                        u += a[k] * f64::from(bases[k].u[i]);
                        v += a[k] * f64::from(bases[k].v[i]);
                    }
                    let qy = y as f64 + v;
                    let qx = x as f64 + u;
                    if let Some(m) = self.nbr_valid {
                        let ny = qy.round().clamp(0.0, (h - 1) as f64) as usize;
                        let nx = qx.round().clamp(0.0, (w - 1) as f64) as usize;
                        if m.data()[ny * w + nx] < 0.5 {
                            continue;
                        }
                    }
                    count += 1;
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for c in 0..channels {
                        let plane = self.neighbor.plane(c);
                        let target = f64::from(self.reference.plane(c)[i]);
                        if want_grad {
                            let (val, dy, dx) = bilinear_plane_grad(plane, h, w, qy, qx);
                            let (rho, drho) = charbonnier(val - target);
                            loss += rho;
                            gx += drho * dx;
                            gy += drho * dy;
                        } else {
                            let val = bilinear_plane(plane, h, w, qy, qx);
                            loss += charbonnier(val - target).0;
                        }
                    }
                    if want_grad {
                        for k in 0..NUM_BASES {
                            grad[k] += gx * f64::from(bases[k].u[i]) + gy * f64::from(bases[k].v[i]);
                        }
                    }
                }
                (loss, count, grad)
            })
            .collect();
        let mut loss = 0.0;
        let mut count = 0usize;
        let mut grad = [0.0; NUM_BASES];
        for (l, n, g) in rows {
            loss += l;
            count += n;
            for k in 0..NUM_BASES {
                grad[k] += g[k];
            }
        }
        if count == 0 {
            return Err(Error::Degenerate("every pixel is masked out of the photometric loss".into()));
        }
        let norm = (count * channels) as f64;
        grad.iter_mut().for_each(|g| *g /= norm);
        Ok((loss / norm, grad))
    }
}

/// Loss and analytic gradient over all pixels (no validity masking).
pub fn photometric_loss_and_grad(
    reference: &Image,
    neighbor: &Image,
    alpha: &GlobalWeights,
    bases: &OffsetBases,
) -> Result<(f64, [f64; NUM_BASES])> {
    PhotometricObjective::new(reference, neighbor, bases)?.loss_and_grad(alpha)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub levels: usize,
    pub iters_per_level: usize,
    /// Initial step, as RMS flow displacement in pixels of the current level.
    pub step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            levels: 3,
            iters_per_level: 100,
            step: 1.0,
        }
    }
}

/// Fitted weights plus the full-resolution losses at identity and at the result.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalFit {
    pub weights: GlobalWeights,
    pub identity_loss: f64,
    pub final_loss: f64,
}

const MAX_STEP: f64 = 4.0;
const MIN_STEP: f64 = 1e-4;

pub fn fit_global_weights(reference: &Image, neighbor: &Image, opts: &FitOptions) -> Result<GlobalWeights> {
    fit_global_weights_masked(reference, neighbor, None, None, opts).map(|f| f.weights)
}

/// Coarse-to-fine fit; validity maps, when given, follow the images down the pyramid.
pub fn fit_global_weights_masked(
    reference: &Image,
    neighbor: &Image,
    ref_valid: Option<&Image>,
    nbr_valid: Option<&Image>,
    opts: &FitOptions,
) -> Result<GlobalFit> {
    if opts.levels == 0 || !(opts.step > 0.0) {
        return Err(Error::Parameter("fit needs levels >= 1 and a positive step".into()));
    }
    let ref_pyr = build_pyramid(reference, opts.levels);
    let nbr_pyr = build_pyramid(neighbor, opts.levels);
    let levels = ref_pyr.len().min(nbr_pyr.len());
    // A downsampled validity map keeps mostly valid neighbourhoods.
    let mask_pyr = |m: Option<&Image>| -> Option<Vec<Image>> {
        m.map(|m| {
            build_pyramid(m, levels)
                .levels
                .into_iter()
                .map(|l| l.map_values(Domain::LinearHdr, |v| if v >= 0.5 { 1.0 } else { 0.0 }))
                .collect()
        })
    };
    let ref_masks = mask_pyr(ref_valid);
    let nbr_masks = mask_pyr(nbr_valid);

    let mut alpha = GlobalWeights::zero();
    let mut result = None;
    for level in (0..levels).rev() {
        let r = &ref_pyr.levels[level];
        let n = &nbr_pyr.levels[level];
        let bases = make_offset_bases(r.height(), r.width())?;
        let objective = PhotometricObjective::new(r, n, &bases)?.with_validity(
            ref_masks.as_ref().map(|m| &m[level]),
            nbr_masks.as_ref().map(|m| &m[level]),
        )?;
        let (best, best_loss) = match descend(&objective, &bases, alpha, opts, level) {
            Err(Error::Degenerate(m)) if level > 0 => {
                log::debug!("global fit skips level {}: {m}", level + 1);
                (alpha, f64::NAN)
            }
            r => r?,
        };
        if level == 0 {
            let identity_loss = objective.loss(&GlobalWeights::zero())?;
            result = Some(if best_loss <= identity_loss {
                GlobalFit {
                    weights: best,
                    identity_loss,
                    final_loss: best_loss,
                }
            } else {
                GlobalFit {
                    weights: GlobalWeights::zero(),
                    identity_loss,
                    final_loss: identity_loss,
                }
            });
        } else {
            // Unit-peak bases are measured in pixels, so every weight doubles.
            alpha = GlobalWeights {
                alpha: best.alpha.map(|a| 2.0 * a),
            };
        }
    }
    Ok(result.expect("finest level always visited"))
}

fn descend(
    objective: &PhotometricObjective,
    bases: &OffsetBases,
    start: GlobalWeights,
    opts: &FitOptions,
    level: usize,
) -> Result<(GlobalWeights, f64)> {
    let numeric = |it: usize, what: &str| {
        Error::Numeric(format!("global fit level {} iteration {it}: {what}", level + 1))
    };
    let metric = bases.gram();
    let chol = cholesky(&metric).ok_or_else(|| numeric(0, "singular basis metric"))?;
    let mut alpha = start;
    let (mut loss, mut grad) = objective.loss_and_grad(&alpha)?;
    if !loss.is_finite() {
        return Err(numeric(0, "non-finite loss"));
    }
    let mut step = opts.step;
    for it in 0..opts.iters_per_level {
        if grad.iter().all(|g| *g == 0.0) {
            break;
        }
        let dir = cholesky_solve(&chol, &grad);
        let gram = quad_form(&metric, &dir);
        if !(gram > 0.0) {
            break;
        }
        let scale = step / gram.sqrt();
        let cand = GlobalWeights {
            alpha: std::array::from_fn(|k| alpha.alpha[k] - scale * dir[k]),
        };
        let (cl, cg) = objective.loss_and_grad(&cand)?;
        if !cl.is_finite() || !cand.is_finite() {
            return Err(numeric(it, "non-finite loss"));
        }
        if cl < loss {
            alpha = cand;
            loss = cl;
            grad = cg;
            step = (step * 1.5).min(MAX_STEP);
        } else {
            step *= 0.5;
            if step < MIN_STEP {
                break;
            }
        }
    }
    Ok((alpha, loss))
}

fn quad_form(g: &Mat8, d: &[f64; NUM_BASES]) -> f64 {
    let mut s = 0.0;
    for k in 0..NUM_BASES {
        for l in 0..NUM_BASES {
            s += d[k] * g[k][l] * d[l];
        }
    }
    s
}

type Mat8 = [[f64; NUM_BASES]; NUM_BASES];

fn cholesky(a: &Mat8) -> Option<Mat8> {
    let mut l = [[0.0; NUM_BASES]; NUM_BASES];
    for i in 0..NUM_BASES {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 1e-12 {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Mat8, b: &[f64; NUM_BASES]) -> [f64; NUM_BASES] {
    let mut y = [0.0; NUM_BASES];
    for i in 0..NUM_BASES {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i][i];
    }
    let mut x = [0.0; NUM_BASES];
    for i in (0..NUM_BASES).rev() {
        let s: f64 = (i + 1..NUM_BASES).map(|k| l[k][i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i][i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texture(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, Domain::LinearHdr, |_, y, x| {
            let (x, y) = (x as f32, y as f32);
            0.5 + 0.2 * (x * 0.31).sin() * (y * 0.17).cos() + 0.15 * ((x + 2.0 * y) * 0.11).sin()
        })
        .unwrap()
    }

    #[test]
    fn basis_examples() {
        let b = make_offset_bases(9, 13).unwrap();
        assert_eq!(b.bases().len(), 8);
        assert!(b.bases()[0].u().iter().all(|&a| a == 1.0));
        assert!(b.bases()[0].v().iter().all(|&a| a == 0.0));
        assert!(b.bases()[1].v().iter().all(|&a| a == 1.0));
        assert_eq!(b.bases()[2].at(4, 6), (0.0, 0.0));
        for f in b.bases() {
            assert!((f.max_magnitude() - 1.0).abs() < 1e-6);
        }
        assert!(cholesky(&b.gram()).is_some(), "bases must be linearly independent");
        assert!(make_offset_bases(7, 20).is_err());
    }

    #[test]
    fn compose_examples() {
        let b = make_offset_bases(10, 12).unwrap();
        let z = compose_global_flow(&GlobalWeights::zero(), &b);
        assert_eq!(z, FlowField::zeros(10, 12));
        let mut w = GlobalWeights::zero();
        w.alpha[0] = 3.0;
        let f = compose_global_flow(&w, &b);
        assert!(f.u().iter().all(|&a| a == 3.0) && f.v().iter().all(|&a| a == 0.0));
    }

    proptest! {
        #[test]
        fn compose_is_linear(a in proptest::array::uniform8(-5.0f64..5.0), c in proptest::array::uniform8(-5.0f64..5.0)) {
            let b = make_offset_bases(12, 9).unwrap();
            let sum = GlobalWeights { alpha: std::array::from_fn(|k| a[k] + c[k]) };
            let lhs = compose_global_flow(&sum, &b);
            let rhs = compose_global_flow(&GlobalWeights { alpha: a }, &b)
                .add(&compose_global_flow(&GlobalWeights { alpha: c }, &b)).unwrap();
            for (x, y) in lhs.u().iter().chain(lhs.v()).zip(rhs.u().iter().chain(rhs.v())) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn warp_examples() {
        let img = texture(16, 20);
        let zero = FlowField::zeros(16, 20);
        assert_eq!(warp_bilinear(&img, &zero).unwrap(), img);
        let shift = FlowField::from_fn(16, 20, |_, _| (1.0, 0.0)).unwrap();
        let out = warp_bilinear(&img, &shift).unwrap();
        for y in 0..16 {
            for x in 0..19 {
                assert_eq!(out.at(0, y, x), img.at(0, y, x + 1));
            }
        }
        let flat = Image::filled(16, 20, 3, 0.42, Domain::LdrDisplay).unwrap();
        let wild = FlowField::from_fn(16, 20, |y, x| ((x as f32 * 0.7).sin() * 9.0, y as f32 * 0.3 - 4.0)).unwrap();
        assert!(warp_bilinear(&flat, &wild).unwrap().data().iter().all(|&v| v == 0.42));
        assert!(warp_bilinear(&img, &FlowField::zeros(15, 20)).is_err());
    }

    #[test]
    fn loss_stationary_at_identity() {
        let img = texture(24, 24);
        let b = make_offset_bases(24, 24).unwrap();
        let (loss, grad) = photometric_loss_and_grad(&img, &img, &GlobalWeights::zero(), &b).unwrap();
        assert!((loss - CHARBONNIER_EPS).abs() < 1e-9);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn loss_is_permutation_invariant() {
        // Pixel order only enters through the mean: transposing both images and
        // the flow leaves the loss unchanged for a symmetric grid.
        let img = texture(16, 16);
        let nbr = Image::from_fn(16, 16, 1, Domain::LinearHdr, |_, y, x| img.at(0, y, (x + 1).min(15))).unwrap();
        let t = |im: &Image| Image::from_fn(16, 16, 1, Domain::LinearHdr, |_, y, x| im.at(0, x, y)).unwrap();
        let b = make_offset_bases(16, 16).unwrap();
        let l1 = photometric_loss_and_grad(&img, &nbr, &GlobalWeights::zero(), &b).unwrap().0;
        let l2 = photometric_loss_and_grad(&t(&img), &t(&nbr), &GlobalWeights::zero(), &b).unwrap().0;
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_is_degenerate() {
        let img = texture(16, 16);
        let b = make_offset_bases(16, 16).unwrap();
        let none = Image::filled(16, 16, 1, 0.0, Domain::LinearHdr).unwrap();
        let obj = PhotometricObjective::new(&img, &img, &b)
            .unwrap()
            .with_validity(Some(&none), None)
            .unwrap();
        assert!(matches!(obj.loss(&GlobalWeights::zero()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn identical_frames_fit_to_zero() {
        let img = texture(64, 64);
        let w = fit_global_weights(&img, &img, &FitOptions::default()).unwrap();
        assert!(w.norm() <= 1e-2);
    }

    #[test]
    fn cholesky_solves() {
        let b = make_offset_bases(16, 16).unwrap();
        let g = b.gram();
        let l = cholesky(&g).unwrap();
        let rhs = [1.0, -2.0, 0.5, 0.0, 3.0, 1.0, -1.0, 2.0];
        let x = cholesky_solve(&l, &rhs);
        for i in 0..8 {
            let s: f64 = (0..8).map(|j| g[i][j] * x[j]).sum();
            assert!((s - rhs[i]).abs() < 1e-9);
        }
    }
}

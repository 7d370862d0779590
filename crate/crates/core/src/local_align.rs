//! Local alignment through adaptive separable convolution.
//!
//! Every output pixel is filtered with the outer product of its own vertical
//! and horizontal 1-D kernels. Kernels come from an exhaustive block-matching
//! search run coarse-to-fine over an image pyramid: each block commits to an
//! integer displacement, which becomes a delta kernel, and deltas of
//! neighbouring blocks are blended with triangular weights so seams between
//! blocks are smooth while uniform motion stays an exact shift.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::global_align::{warp_bilinear, FlowField};
use crate::imagecore::{build_pyramid, to_luminance, Domain, Image};
use crate::masks::{adaptive_mask, MaskSet};

pub const DEFAULT_KERNEL_SIZE: usize = 31;
pub const DEFAULT_RADIUS: usize = 15;
pub const DEFAULT_BLOCK: usize = 8;
pub const DEFAULT_LEVELS: usize = 3;
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.3;

/// Blocks whose mean matching weight falls below this have no usable votes.
const MIN_MEAN_WEIGHT: f64 = 1e-3;
const CONFIDENCE_EPS: f64 = 1e-9;

/// Per-pixel vertical and horizontal kernels of odd length `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableKernelField {
    height: usize,
    width: usize,
    k: usize,
    kv: Vec<f32>,
    kh: Vec<f32>,
}

impl SeparableKernelField {
    /// Takes raw kernels laid out pixel-major (`[pixel][tap]`); signed taps are allowed.
    pub fn new(height: usize, width: usize, k: usize, kv: Vec<f32>, kh: Vec<f32>) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Parameter(format!("kernel length must be odd, got {k}")));
        }
        if kv.len() != height * width * k || kh.len() != height * width * k {
            return Err(Error::Parameter("kernel buffers do not match the grid".into()));
        }
        Ok(Self {
            height,
            width,
            k,
            kv,
            kh,
        })
    }

    /// Like [`new`](Self::new) but rescales every kernel to sum to one.
    pub fn normalized(height: usize, width: usize, k: usize, mut kv: Vec<f32>, mut kh: Vec<f32>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Parameter("kernel length must be positive".into()));
        }
        for buf in [&mut kv, &mut kh] {
            for ker in buf.chunks_mut(k) {
                let s: f64 = ker.iter().map(|&v| f64::from(v)).sum();
                if s.abs() < 1e-12 {
                    return Err(Error::Numeric("kernel sums to zero".into()));
                }
                ker.iter_mut().for_each(|v| *v = (f64::from(*v) / s) as f32);
            }
        }
        Self::new(height, width, k, kv, kh)
    }

    /// Centered delta kernels everywhere.
    pub fn identity(height: usize, width: usize, k: usize) -> Result<Self> {
        let mut ker = vec![0.0f32; k];
        ker[k / 2] = 1.0;
        let buf: Vec<f32> = ker.iter().copied().cycle().take(height * width * k).collect();
        Self::new(height, width, k, buf.clone(), buf)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn vertical(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.k;
        &self.kv[i..i + self.k]
    }

    pub fn horizontal(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.k;
        &self.kh[i..i + self.k]
    }
}

/// Range of taps that are non-zero.
#[inline]
fn support(ker: &[f32]) -> (usize, usize) {
    let first = ker.iter().position(|&v| v != 0.0).unwrap_or(0);
    let last = ker.iter().rposition(|&v| v != 0.0).unwrap_or(0);
    (first, last + 1)
}

/// `out(p) = Σ_{i,j} kv_p[i] kh_p[j] img(p + (j - r, i - r))`, edge-clamped, per channel.
pub fn asconv(img: &Image, kernels: &SeparableKernelField) -> Result<Image> {
    if kernels.k % 2 == 0 {
        return Err(Error::Parameter(format!("kernel length must be odd, got {}", kernels.k)));
    }
    if kernels.height != img.height() || kernels.width != img.width() {
        return Err(Error::Parameter(format!(
            "kernel field {}x{} does not match image {}x{}",
            kernels.height,
            kernels.width,
            img.height(),
            img.width()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let r = (kernels.k / 2) as isize;
    let channels = img.channels();
    let mut data = vec![0.0f32; h * w * channels];
    data.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        let c = row / h;
        let y = row % h;
        let plane = img.plane(c);
        for (x, o) in out.iter_mut().enumerate() {
            let kv = kernels.vertical(y, x);
            let kh = kernels.horizontal(y, x);
            // Estimator kernels are sparse; only visit the non-zero taps.
            let (v0, v1) = support(kv);
            let (h0, h1) = support(kh);
            let mut acc = 0.0f64;
            for i in v0..v1 {
                let wv = f64::from(kv[i]);
                if wv == 0.0 {
                    continue;
                }
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                let src = &plane[yy * w..(yy + 1) * w];
                let mut rowacc = 0.0f64;
                for j in h0..h1 {
                    let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                    rowacc += f64::from(kh[j]) * f64::from(src[xx]);
                }
                acc += wv * rowacc;
            }
            *o = acc as f32;
        }
    });
    if img.domain() == Domain::LdrDisplay {
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    } else {
        data.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(Image::from_raw(h, w, channels, data, img.domain()))
}

/// Result of one block-matching pass.
#[derive(Clone, Debug)]
pub struct BlockMatch {
    pub kernels: SeparableKernelField,
    /// Per-pixel integer displacement of the pixel's block.
    pub displacement: FlowField,
    /// Per-pixel match confidence of the pixel's block, in `[0, 1]`.
    pub confidence: Image,
    /// 1 where the pixel's block had enough valid pixels to vote, else 0.
    pub support: Image,
}

#[derive(Clone, Copy, Debug)]
struct BlockResult {
    dy: i32,
    dx: i32,
    confidence: f32,
    voted: bool,
}

/// Exhaustive integer block matching between luminances, weighted by the
/// smaller of the two frames' well-exposedness at each pixel.
///
/// Ties go to the smaller displacement magnitude, then to lexicographic
/// `(dy, dx)`. Confidence is `1 - best / second_best`, where the runner-up is
/// the best candidate outside the winner's 8-neighbourhood. Blocks whose
/// confidence is below `min_confidence` keep a zero displacement.
pub fn estimate_kernels_block_match(
    reference: &Image,
    neighbor: &Image,
    masks_ref: &MaskSet,
    masks_nbr: &MaskSet,
    radius: usize,
    block: usize,
    kernel_size: usize,
    min_confidence: f64,
) -> Result<BlockMatch> {
    if !reference.same_size(neighbor) {
        return Err(Error::Parameter("reference and neighbour sizes differ".into()));
    }
    if block == 0 || block > reference.height() || block > reference.width() {
        return Err(Error::Parameter(format!(
            "block {block} does not fit a {}x{} image",
            reference.height(),
            reference.width()
        )));
    }
    if kernel_size % 2 == 0 {
        return Err(Error::Parameter(format!("kernel length must be odd, got {kernel_size}")));
    }
    if radius > kernel_size / 2 {
        return Err(Error::Parameter(format!(
            "search radius {radius} exceeds kernel half-width {}",
            kernel_size / 2
        )));
    }
    for m in [masks_ref, masks_nbr] {
        if !m.wellness.same_size(reference) {
            return Err(Error::Parameter("mask size does not match image".into()));
        }
    }
    let (h, w) = (reference.height(), reference.width());
    let ly = to_luminance(reference);
    let ln = to_luminance(neighbor);
    let by = h.div_ceil(block);
    let bx = w.div_ceil(block);
    let r = radius as i32;

    // Candidate order: magnitude, then (dy, dx). The first strict minimum wins.
    let mut candidates: Vec<(i32, i32)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
    candidates.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));

    let blocks: Vec<BlockResult> = (0..by * bx)
        .into_par_iter()
        .map(|b| {
            let (y0, x0) = ((b / bx) * block, (b % bx) * block);
            let (y1, x1) = ((y0 + block).min(h), (x0 + block).min(w));
            let mut weights = Vec::with_capacity(block * block);
            let mut wsum = 0.0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    let wt = masks_ref.wellness.at(0, y, x).min(masks_nbr.wellness.at(0, y, x));
                    weights.push(f64::from(wt));
                    wsum += f64::from(wt);
                }
            }
            let npix = ((y1 - y0) * (x1 - x0)) as f64;
            if wsum / npix < MIN_MEAN_WEIGHT {
                return BlockResult {
                    dy: 0,
                    dx: 0,
                    confidence: 0.0,
                    voted: false,
                };
            }
            let costs: Vec<f64> = candidates
                .iter()
                .map(|&(dy, dx)| {
                    let mut sad = 0.0f64;
                    let mut i = 0;
                    for y in y0..y1 {
                        let yy = y as isize + dy as isize;
                        for x in x0..x1 {
                            let a = f64::from(ly.at(0, y, x));
                            let b = f64::from(ln.at_clamped(0, yy, x as isize + dx as isize));
                            sad += weights[i] * (a - b).abs();
                            i += 1;
                        }
                    }
                    sad
                })
                .collect();
            let mut best = 0;
            for (i, c) in costs.iter().enumerate() {
                if *c < costs[best] {
                    best = i;
                }
            }
            let (bdy, bdx) = candidates[best];
            let second = candidates
                .iter()
                .zip(&costs)
                .filter(|((dy, dx), _)| (dy - bdy).abs() > 1 || (dx - bdx).abs() > 1)
                .map(|(_, c)| *c)
                .fold(f64::INFINITY, f64::min);
            let confidence = if second.is_finite() {
                (1.0 - costs[best] / (second + CONFIDENCE_EPS)).clamp(0.0, 1.0)
            } else {
                1.0
            };
            if confidence < min_confidence {
                return BlockResult {
                    dy: 0,
                    dx: 0,
                    confidence: confidence as f32,
                    voted: true,
                };
            }
            BlockResult {
                dy: bdy,
                dx: bdx,
                confidence: confidence as f32,
                voted: true,
            }
        })
        .collect();

    let grid = BlockGrid { by, bx, block };
    let displacement = FlowField::from_fn(h, w, |y, x| {
        let b = blocks[(y / block) * bx + x / block];
        (b.dx as f32, b.dy as f32)
    })?;
    let per_pixel = |f: fn(&BlockResult) -> f32| {
        let data = (0..h * w).map(|i| f(&blocks[(i / w / block) * bx + (i % w) / block])).collect();
        Image::from_raw(h, w, 1, data, Domain::LinearHdr)
    };
    let confidence = per_pixel(|b| b.confidence);
    let support = per_pixel(|b| if b.voted { 1.0 } else { 0.0 });
    let kernels = grid.kernel_field(h, w, kernel_size, |b| (blocks[b].dy, blocks[b].dx))?;
    Ok(BlockMatch {
        kernels,
        displacement,
        confidence,
        support,
    })
}

struct BlockGrid {
    by: usize,
    bx: usize,
    block: usize,
}

impl BlockGrid {
    /// Triangular (bilinear) interpolation weights over the two nearest block
    /// centers along one axis.
    fn axis_weights(&self, p: usize, nblocks: usize) -> [(usize, f64); 2] {
        let c = (p as f64 + 0.5) / self.block as f64 - 0.5;
        let c = c.clamp(0.0, (nblocks - 1) as f64);
        let b0 = c.floor() as usize;
        let b1 = (b0 + 1).min(nblocks - 1);
        let t = c - b0 as f64;
        [(b0, 1.0 - t), (b1, t)]
    }

    /// Kernels mixing the delta kernels of neighbouring blocks.
    fn kernel_field(
        &self,
        h: usize,
        w: usize,
        k: usize,
        disp: impl Fn(usize) -> (i32, i32) + Sync,
    ) -> Result<SeparableKernelField> {
        let r = (k / 2) as i32;
        let mut kv = vec![0.0f32; h * w * k];
        let mut kh = vec![0.0f32; h * w * k];
        kv.par_chunks_mut(w * k)
            .zip(kh.par_chunks_mut(w * k))
            .enumerate()
            .for_each(|(y, (kv_row, kh_row))| {
                let wy = self.axis_weights(y, self.by);
                for x in 0..w {
                    let wx = self.axis_weights(x, self.bx);
                    let kvp = &mut kv_row[x * k..(x + 1) * k];
                    let khp = &mut kh_row[x * k..(x + 1) * k];
                    for &(byi, ty) in &wy {
                        for &(bxi, tx) in &wx {
                            let t = (ty * tx) as f32;
                            if t == 0.0 {
                                continue;
                            }
                            let (dy, dx) = disp(byi * self.bx + bxi);
                            kvp[(r + dy.clamp(-r, r)) as usize] += t;
                            khp[(r + dx.clamp(-r, r)) as usize] += t;
                        }
                    }
                }
            });
        SeparableKernelField::normalized(h, w, k, kv, kh)
    }
}

/// Alignment options shared by the pyramid driver.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalAlignOptions {
    pub levels: usize,
    pub radius: usize,
    pub block: usize,
    pub kernel_size: usize,
    /// Blocks matching with lower confidence commit no displacement.
    pub min_confidence: f64,
}

impl Default for LocalAlignOptions {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS,
            radius: DEFAULT_RADIUS,
            block: DEFAULT_BLOCK,
            kernel_size: DEFAULT_KERNEL_SIZE,
            min_confidence: DEFAULT_MIN_CONFIDENCE,
        }
    }
}

/// An image to align: exposure-normalized intensities plus the display-referred
/// frame its masks are computed from.
#[derive(Clone, Debug)]
pub struct AlignSource {
    pub intensity: Image,
    pub ldr: Option<Image>,
}

impl AlignSource {
    pub fn new(intensity: Image, ldr: Option<Image>) -> Result<Self> {
        if let Some(l) = &ldr {
            if !l.same_size(&intensity) || l.domain() != Domain::LdrDisplay {
                return Err(Error::Parameter("LDR companion must be an equally sized LDR image".into()));
            }
        }
        Ok(Self { intensity, ldr })
    }

    /// Source without exposure information; every pixel votes with full weight.
    pub fn plain(intensity: Image) -> Self {
        Self { intensity, ldr: None }
    }
}

/// A neighbour resampled onto the reference grid.
#[derive(Clone, Debug)]
pub struct AlignedFrame {
    pub image: Image,
    /// Total committed displacement (pre-warp plus finest residual).
    pub displacement: FlowField,
    /// Finest-level match confidence.
    pub confidence: Image,
    /// Finest-level vote mask (see [`BlockMatch::support`]).
    pub support: Image,
    /// Integer pre-warp carried down from coarser levels.
    pub prewarp: FlowField,
    /// Finest-level residual kernels applied after the pre-warp.
    pub kernels: SeparableKernelField,
    pub levels_used: usize,
    pub levels_requested: usize,
}

impl AlignedFrame {
    /// Applies the same pre-warp and kernel field to another image on this grid.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        let warped = warp_bilinear(img, &self.prewarp)?;
        asconv(&warped, &self.kernels)
    }

    pub fn level_clamped(&self) -> bool {
        self.levels_used < self.levels_requested
    }
}

fn masks_for(ldr: Option<&Image>, like: &Image) -> Result<MaskSet> {
    match ldr {
        Some(l) => adaptive_mask(l),
        None => Ok(MaskSet::neutral(like.height(), like.width())),
    }
}

/// Coarse-to-fine block matching; the coarsest level searches the full radius,
/// finer levels refine a residual with radius `ceil(radius / 2^(level - 1))`.
pub fn align_local_pyramid(reference: &AlignSource, neighbor: &AlignSource, opts: &LocalAlignOptions) -> Result<AlignedFrame> {
    if !reference.intensity.same_shape(&neighbor.intensity) {
        return Err(Error::Parameter("reference and neighbour shapes differ".into()));
    }
    if opts.levels == 0 {
        return Err(Error::Parameter("levels must be at least 1".into()));
    }
    let ref_pyr = build_pyramid(&reference.intensity, opts.levels);
    let levels = ref_pyr.len();
    let nbr_pyr = build_pyramid(&neighbor.intensity, levels);
    let ref_ldr = reference.ldr.as_ref().map(|l| build_pyramid(l, levels));
    let nbr_ldr = neighbor.ldr.as_ref().map(|l| build_pyramid(l, levels));
    if levels < opts.levels {
        log::warn!(
            "image {}x{} supports only {levels} of {} pyramid levels",
            reference.intensity.height(),
            reference.intensity.width(),
            opts.levels
        );
    }

    let mut prewarp: Option<FlowField> = None;
    let mut last = None;
    for level in (0..levels).rev() {
        let r_img = &ref_pyr.levels[level];
        let (h, w) = (r_img.height(), r_img.width());
        let pre = match &prewarp {
            Some(coarse) => coarse.upsample_nearest(h, w, 2.0),
            None => FlowField::zeros(h, w),
        };
        let n_img = warp_bilinear(&nbr_pyr.levels[level], &pre)?;
        let n_ldr = match &nbr_ldr {
            Some(p) => Some(warp_bilinear(&p.levels[level], &pre)?),
            None => None,
        };
        let r_masks = masks_for(ref_ldr.as_ref().map(|p| &p.levels[level]), r_img)?;
        let n_masks = masks_for(n_ldr.as_ref(), r_img)?;
        let coarsest = level + 1 == levels;
        let radius = if coarsest {
            opts.radius
        } else {
            opts.radius.div_ceil(1 << (levels - 1 - level)).max(2).min(opts.radius)
        };
        let block = opts.block.min(h).min(w);
        let m = estimate_kernels_block_match(r_img, &n_img, &r_masks, &n_masks, radius, block, opts.kernel_size, opts.min_confidence)
            .map_err(|e| e.context(format!("local alignment level {}", level + 1)))?;
        let total = pre.add(&m.displacement)?;
        prewarp = Some(total);
        last = Some((pre, m));
    }
    let (pre, m) = last.expect("at least one level");
    let warped = warp_bilinear(&neighbor.intensity, &pre)?;
    let image = asconv(&warped, &m.kernels)?;
    Ok(AlignedFrame {
        image,
        displacement: prewarp.expect("at least one level"),
        confidence: m.confidence,
        support: m.support,
        prewarp: pre,
        kernels: m.kernels,
        levels_used: levels,
        levels_requested: opts.levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f32>()).collect(), Domain::LinearHdr).unwrap()
    }

    fn delta_field(h: usize, w: usize, k: usize, dy: i32, dx: i32) -> SeparableKernelField {
        let r = (k / 2) as i32;
        let mut kv = vec![0.0; h * w * k];
        let mut kh = vec![0.0; h * w * k];
        for p in 0..h * w {
            kv[p * k + (r + dy) as usize] = 1.0;
            kh[p * k + (r + dx) as usize] = 1.0;
        }
        SeparableKernelField::new(h, w, k, kv, kh).unwrap()
    }

    #[test]
    fn asconv_delta_kernels() {
        let img = noise_image(20, 24, 3, 1);
        let id = SeparableKernelField::identity(20, 24, 31).unwrap();
        assert_eq!(asconv(&img, &id).unwrap(), img);
        let shifted = asconv(&img, &delta_field(20, 24, 31, 0, 5)).unwrap();
        for c in 0..3 {
            for y in 0..20 {
                for x in 0..19 {
                    assert_eq!(shifted.at(c, y, x), img.at(c, y, x + 5));
                }
            }
        }
    }

    #[test]
    fn asconv_rejects_bad_fields() {
        assert!(SeparableKernelField::new(2, 2, 4, vec![0.0; 16], vec![0.0; 16]).is_err());
        let img = noise_image(4, 4, 1, 2);
        let f = SeparableKernelField::identity(4, 5, 3).unwrap();
        assert!(asconv(&img, &f).is_err());
    }

    #[test]
    fn identical_frames_match_at_zero() {
        let img = noise_image(32, 40, 1, 3);
        let m = MaskSet::neutral(32, 40);
        let bm = estimate_kernels_block_match(&img, &img, &m, &m, 6, 8, 31, 0.0).unwrap();
        assert!(bm.displacement.u().iter().chain(bm.displacement.v()).all(|&d| d == 0.0));
        let c0 = bm.confidence.data()[0];
        assert!(bm.confidence.data().iter().all(|&c| c == c0));
        assert_eq!(bm.kernels, SeparableKernelField::identity(32, 40, 31).unwrap());
    }

    #[test]
    fn integer_shift_found() {
        let img = noise_image(48, 48, 1, 4);
        // nbr(p + (4, -3)) == ref(p): content moved right 4 and up 3
        let nbr = Image::from_fn(48, 48, 1, Domain::LinearHdr, |_, y, x| {
            img.at_clamped(0, y as isize + 3, x as isize - 4)
        })
        .unwrap();
        let m = MaskSet::neutral(48, 48);
        let bm = estimate_kernels_block_match(&img, &nbr, &m, &m, 6, 8, 31, 0.0).unwrap();
        for y in 8..40 {
            for x in 8..40 {
                assert_eq!(bm.displacement.at(y, x), (4.0, -3.0));
            }
        }
    }

    #[test]
    fn saturated_reference_falls_back() {
        let img = noise_image(16, 16, 3, 5);
        let ldr_white = Image::filled(16, 16, 3, 1.0, Domain::LdrDisplay).unwrap();
        let ldr_mid = Image::filled(16, 16, 3, 0.5, Domain::LdrDisplay).unwrap();
        let mr = adaptive_mask(&ldr_white).unwrap();
        let mn = adaptive_mask(&ldr_mid).unwrap();
        let other = noise_image(16, 16, 3, 6);
        let bm = estimate_kernels_block_match(&img, &other, &mr, &mn, 4, 8, 31, 0.0).unwrap();
        assert!(bm.displacement.u().iter().chain(bm.displacement.v()).all(|&d| d == 0.0));
        assert!(bm.confidence.data().iter().all(|&c| c == 0.0));
        assert!(bm.support.data().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn block_and_radius_validation() {
        let img = noise_image(8, 8, 1, 7);
        let m = MaskSet::neutral(8, 8);
        assert!(estimate_kernels_block_match(&img, &img, &m, &m, 4, 9, 31, 0.0).is_err());
        assert!(estimate_kernels_block_match(&img, &img, &m, &m, 16, 4, 31, 0.0).is_err());
    }

    #[test]
    fn estimator_kernels_are_normalized() {
        let img = noise_image(40, 40, 1, 8);
        let nbr = noise_image(40, 40, 1, 9);
        let m = MaskSet::neutral(40, 40);
        let bm = estimate_kernels_block_match(&img, &nbr, &m, &m, 5, 8, 31, 0.0).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                for ker in [bm.kernels.vertical(y, x), bm.kernels.horizontal(y, x)] {
                    let s: f64 = ker.iter().map(|&v| f64::from(v)).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                    assert!(ker.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn pyramid_identity_cascade() {
        let img = noise_image(64, 64, 3, 10);
        let src = AlignSource::plain(img.clone());
        let out = align_local_pyramid(&src, &src, &LocalAlignOptions::default()).unwrap();
        assert!(out.image.max_abs_diff(&img).unwrap() < 1e-6);
        assert_eq!(out.displacement.max_magnitude(), 0.0);
    }

    #[test]
    fn single_level_equals_direct_estimation() {
        let img = noise_image(40, 40, 1, 11);
        let nbr = Image::from_fn(40, 40, 1, Domain::LinearHdr, |_, y, x| img.at_clamped(0, y as isize - 2, x as isize + 5)).unwrap();
        let opts = LocalAlignOptions {
            levels: 1,
            ..Default::default()
        };
        let out = align_local_pyramid(&AlignSource::plain(img.clone()), &AlignSource::plain(nbr.clone()), &opts).unwrap();
        let m = MaskSet::neutral(40, 40);
        let bm = estimate_kernels_block_match(&img, &nbr, &m, &m, 15, 8, 31, DEFAULT_MIN_CONFIDENCE).unwrap();
        assert_eq!(out.displacement, bm.displacement);
        assert_eq!(out.image, asconv(&nbr, &bm.kernels).unwrap());
    }
}

//! HDR quality metrics and dataset diversity statistics.
//!
//! Quality scores compare an estimate with a ground truth after both are
//! divided by the truth's 99.9th-percentile luminance and clipped to `[0, 1]`.
//! PSNR-μ and SSIM-μ then apply the μ-law; PU-PSNR and PU-SSIM apply the PU21
//! encoding with the normalized white mapped to [`DEFAULT_PEAK_NITS`].

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{to_luminance, Domain, Image};
use crate::radiometry::{mu_law, DEFAULT_MU};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
pub const NORMALIZATION_PERCENTILE: f64 = 99.9;
pub const DEFAULT_PEAK_NITS: f64 = 1000.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// PU21 banding+glare fit.
pub const PU21_PAR: [f64; 7] = [
    0.353487901,
    0.3734658629,
    8.277049286e-05,
    0.9062562627,
    0.09150303166,
    0.9099517204,
    596.3148142,
];
pub const PU21_L_MIN: f64 = 0.005;
pub const PU21_L_MAX: f64 = 10000.0;

pub const HIGHLIGHT_THRESHOLD: f64 = 0.9;
pub const DR_TAIL_FRACTION: f64 = 0.02;
pub const DR_FLOOR: f64 = 1e-6;
pub const MIN_DIVERSITY_PIXELS: usize = 50;

/// Linearly interpolated percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f32], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v: Vec<f64> = values.iter().map(|&x| f64::from(x)).collect();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Population mean and standard deviation; constant input gives exactly zero spread.
pub fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let shift = values.clone().next().unwrap_or(0.0);
    let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
    for v in values {
        let d = v - shift;
        n += 1;
        s += d;
        s2 += d * d;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let m = s / n as f64;
    (shift + m, (s2 / n as f64 - m * m).max(0.0).sqrt())
}

fn check_pair(estimate: &Image, truth: &Image) -> Result<()> {
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
    for img in [estimate, truth] {
        if img.domain() != Domain::LinearHdr {
            return Err(Error::Domain("quality metrics expect linear HDR images".into()));
        }
    }
    Ok(())
}

/// Divides both images by the truth's 99.9th-percentile luminance and clips to `[0, 1]`.
pub fn normalize_pair(estimate: &Image, truth: &Image) -> Result<(Image, Image)> {
    check_pair(estimate, truth)?;
    let p = percentile(to_luminance(truth).data(), NORMALIZATION_PERCENTILE);
    let scale = if p > 0.0 { 1.0 / p } else { 1.0 };
    let norm = |img: &Image| img.map_values(Domain::LinearHdr, |v| (f64::from(v) * scale).clamp(0.0, 1.0) as f32);
    Ok((norm(estimate), norm(truth)))
}

/// Raw PU21 value of a luminance in cd/m², clamped to the encoder's range.
pub fn pu21_raw(nits: f64) -> f64 {
    let p = &PU21_PAR;
    let y = nits.clamp(PU21_L_MIN, PU21_L_MAX);
    let yp = y.powf(p[3]);
    (p[6] * (((p[0] + p[1] * yp) / (1.0 + p[2] * yp)).powf(p[4]) - p[5])).max(0.0)
}

/// PU21 encoding of a relative image (1.0 = `peak_nits`), offset so 0 maps to
/// 0 and rescaled so the peak maps to 1.
pub fn pu_encode(img: &Image, peak_nits: f64) -> Result<Image> {
    if !(peak_nits > 0.0 && peak_nits.is_finite()) {
        return Err(Error::Parameter(format!("peak must be positive, got {peak_nits}")));
    }
    if let Some(v) = img.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("PU encoding needs non-negative input, got {v}")));
    }
    let v0 = pu21_raw(0.0);
    let span = pu21_raw(peak_nits) - v0;
    Ok(img.map_values(Domain::LinearHdr, move |v| {
        ((pu21_raw(f64::from(v) * peak_nits) - v0) / span) as f32
    }))
}

fn mu_encode(img: &Image) -> Image {
    img.map_values(Domain::LinearHdr, |v| mu_law(f64::from(v), DEFAULT_MU) as f32)
}

/// `10 log10(1 / MSE)` for signals on a unit range, capped at [`PSNR_CAP_DB`].
pub fn psnr_unit(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Parameter("shape mismatch".into()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum();
    let mse = sum / a.data().len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable filtering of a plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|j| g[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel images on a unit range.
pub fn ssim_unit(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) || a.channels() != 1 {
        return Err(Error::Parameter("SSIM needs two equally sized 1-channel images".into()));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let x: Vec<f64> = a.data().iter().map(|&v| f64::from(v)).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| f64::from(v)).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let planes = [x.clone(), y.clone(), prod(&x, &x), prod(&y, &y), prod(&x, &y)];
    let f: Vec<Vec<f64>> = planes.par_iter().map(|p| filter_valid(p, h, w, &g)).collect();
    let n = f[0].len();
    let mut sum = 0.0;
    for i in 0..n {
        let (mx, my) = (f[0][i], f[1][i]);
        let vx = f[2][i] - mx * mx;
        let vy = f[3][i] - my * my;
        let cxy = f[4][i] - mx * my;
        sum += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(sum / n as f64)
}

pub fn psnr_mu(estimate: &Image, truth: &Image) -> Result<f64> {
    let (e, t) = normalize_pair(estimate, truth)?;
    psnr_unit(&mu_encode(&e), &mu_encode(&t))
}

pub fn ssim_mu(estimate: &Image, truth: &Image) -> Result<f64> {
    let (e, t) = normalize_pair(estimate, truth)?;
    ssim_unit(&mu_encode(&to_luminance(&e)), &mu_encode(&to_luminance(&t)))
}

pub fn pu_psnr(estimate: &Image, truth: &Image) -> Result<f64> {
    let (e, t) = normalize_pair(estimate, truth)?;
    psnr_unit(&pu_encode(&e, DEFAULT_PEAK_NITS)?, &pu_encode(&t, DEFAULT_PEAK_NITS)?)
}

pub fn pu_ssim(estimate: &Image, truth: &Image) -> Result<f64> {
    let (e, t) = normalize_pair(estimate, truth)?;
    ssim_unit(
        &pu_encode(&to_luminance(&e), DEFAULT_PEAK_NITS)?,
        &pu_encode(&to_luminance(&t), DEFAULT_PEAK_NITS)?,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub psnr_mu: f64,
    pub ssim_mu: f64,
    pub pu_psnr: f64,
    pub pu_ssim: f64,
}

pub fn quality_scores(estimate: &Image, truth: &Image) -> Result<QualityScores> {
    Ok(QualityScores {
        psnr_mu: psnr_mu(estimate, truth)?,
        ssim_mu: ssim_mu(estimate, truth)?,
        pu_psnr: pu_psnr(estimate, truth)?,
        pu_ssim: pu_ssim(estimate, truth)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityScores {
    pub fhlp: f64,
    pub ehl: f64,
    pub si: f64,
    pub cf: f64,
    pub stdl: f64,
    pub all: f64,
    pub dr: f64,
}

/// Diversity scores plus whether the image was all zeros.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiversityResult {
    pub scores: DiversityScores,
    pub degenerate: bool,
}

pub fn diversity_metrics(hdr: &Image) -> Result<DiversityResult> {
    if hdr.domain() != Domain::LinearHdr {
        return Err(Error::Domain("diversity metrics expect a linear HDR image".into()));
    }
    let n = hdr.pixel_count();
    if n < MIN_DIVERSITY_PIXELS || hdr.height() < 3 || hdr.width() < 3 {
        return Err(Error::Parameter(format!(
            "diversity metrics need at least {MIN_DIVERSITY_PIXELS} pixels and 3x3, got {}x{}",
            hdr.height(),
            hdr.width()
        )));
    }
    if let Some(v) = hdr.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Domain(format!("diversity metrics need finite non-negative input, got {v}")));
    }
    let lum = to_luminance(hdr);
    let p = percentile(lum.data(), NORMALIZATION_PERCENTILE);
    if p <= 0.0 {
        let zero = DiversityScores {
            fhlp: 0.0,
            ehl: 0.0,
            si: 0.0,
            cf: 0.0,
            stdl: 0.0,
            all: 0.0,
            dr: 0.0,
        };
        return Ok(DiversityResult {
            scores: zero,
            degenerate: true,
        });
    }
    let y: Vec<f64> = lum.data().iter().map(|&v| f64::from(v) / p).collect();

    let highlights = y.iter().filter(|&&v| v > HIGHLIGHT_THRESHOLD).count();
    let fhlp = highlights as f64 / n as f64;
    let excess: f64 = y.iter().filter(|&&v| v > HIGHLIGHT_THRESHOLD).map(|v| v - HIGHLIGHT_THRESHOLD).sum();
    let ehl = (excess / ((1.0 - HIGHLIGHT_THRESHOLD) * n as f64)).clamp(0.0, 1.0);

    let tm = |v: f64| mu_law(v.clamp(0.0, 1.0), DEFAULT_MU);
    let ty: Vec<f64> = y.iter().map(|&v| tm(v)).collect();
    let (all, stdl) = mean_std(ty.iter().copied());

    let (h, w) = (hdr.height(), hdr.width());
    let mut grad = Vec::with_capacity((h - 2) * (w - 2));
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let at = |dy: isize, dx: isize| ty[(r as isize + dy) as usize * w + (c as isize + dx) as usize];
            let gx = (at(-1, 1) + 2.0 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2.0 * at(0, -1) + at(1, -1));
            let gy = (at(1, -1) + 2.0 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2.0 * at(-1, 0) + at(-1, 1));
            grad.push(gx.hypot(gy));
        }
    }
    let (_, si) = mean_std(grad.iter().copied());

    let cf = if hdr.channels() == 3 {
        let ch = |c: usize| hdr.plane(c).iter().map(move |&v| tm(f64::from(v) / p));
        let rg: Vec<f64> = ch(0).zip(ch(1)).map(|(r, g)| r - g).collect();
        let yb: Vec<f64> = ch(0).zip(ch(1)).zip(ch(2)).map(|((r, g), b)| 0.5 * (r + g) - b).collect();
        let (m_rg, s_rg) = mean_std(rg.iter().copied());
        let (m_yb, s_yb) = mean_std(yb.iter().copied());
        s_rg.hypot(s_yb) + 0.3 * m_rg.hypot(m_yb)
    } else {
        0.0
    };

    let mut sorted: Vec<f64> = y.iter().map(|v| v.max(DR_FLOOR)).collect();
    sorted.sort_by(f64::total_cmp);
    let k = ((DR_TAIL_FRACTION * n as f64).ceil() as usize).max(1);
    let bottom = sorted[..k].iter().sum::<f64>() / k as f64;
    let top = sorted[n - k..].iter().sum::<f64>() / k as f64;
    let dr = (top.log10() - bottom.log10()).max(0.0);

    Ok(DiversityResult {
        scores: DiversityScores {
            fhlp,
            ehl,
            si,
            cf,
            stdl,
            all,
            dr,
        },
        degenerate: false,
    })
}

/// Rounds to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// A fixed set of named columns.
pub trait MetricRow: Sized {
    const COLUMNS: &'static [&'static str];
    fn values(&self) -> Vec<f64>;
    fn from_values(v: &[f64]) -> Self;
}

impl MetricRow for QualityScores {
    const COLUMNS: &'static [&'static str] = &["psnr_mu", "ssim_mu", "pu_psnr", "pu_ssim"];
    fn values(&self) -> Vec<f64> {
        vec![self.psnr_mu, self.ssim_mu, self.pu_psnr, self.pu_ssim]
    }
    fn from_values(v: &[f64]) -> Self {
        Self {
            psnr_mu: v[0],
            ssim_mu: v[1],
            pu_psnr: v[2],
            pu_ssim: v[3],
        }
    }
}

impl MetricRow for DiversityScores {
    const COLUMNS: &'static [&'static str] = &["fhlp", "ehl", "si", "cf", "stdl", "all", "dr"];
    fn values(&self) -> Vec<f64> {
        vec![self.fhlp, self.ehl, self.si, self.cf, self.stdl, self.all, self.dr]
    }
    fn from_values(v: &[f64]) -> Self {
        Self {
            fhlp: v[0],
            ehl: v[1],
            si: v[2],
            cf: v[3],
            stdl: v[4],
            all: v[5],
            dr: v[6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow<T> {
    pub frame_id: String,
    #[serde(flatten)]
    pub scores: T,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates<T> {
    pub mean: T,
    pub std: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<T> {
    pub rows: Vec<ReportRow<T>>,
    pub aggregates: Aggregates<T>,
}

impl<T: MetricRow> MetricReport<T> {
    /// Rounds every row to 6 significant digits and aggregates with population statistics.
    pub fn new(rows: Vec<ReportRow<T>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Parameter("report needs at least one frame".into()));
        }
        let rows: Vec<ReportRow<T>> = rows
            .into_iter()
            .map(|r| ReportRow {
                frame_id: r.frame_id,
                scores: T::from_values(&r.scores.values().into_iter().map(round_sig6).collect::<Vec<_>>()),
                flags: r.flags,
            })
            .collect();
        let cols = T::COLUMNS.len();
        let mut mean = Vec::with_capacity(cols);
        let mut std = Vec::with_capacity(cols);
        for c in 0..cols {
            let (m, s) = mean_std(rows.iter().map(|r| r.scores.values()[c]));
            mean.push(round_sig6(m));
            std.push(round_sig6(s));
        }
        Ok(Self {
            rows,
            aggregates: Aggregates {
                mean: T::from_values(&mean),
                std: T::from_values(&std),
            },
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_id");
        for c in T::COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.frame_id);
            for v in r.scores.values() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses rows back from [`to_csv`](Self::to_csv) output.
    pub fn rows_from_csv(text: &str) -> Result<Vec<(String, T)>> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Validation("empty CSV".into()))?;
        let expected: Vec<&str> = std::iter::once("frame_id").chain(T::COLUMNS.iter().copied()).collect();
        if header.split(',').collect::<Vec<_>>() != expected {
            return Err(Error::Validation(format!("unexpected CSV header {header:?}")));
        }
        lines
            .enumerate()
            .map(|(i, line)| {
                let mut parts = line.split(',');
                let id = parts.next().unwrap_or_default().to_string();
                let vals = parts
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Validation(format!("CSV line {}: {e}", i + 2)))?;
                if vals.len() != T::COLUMNS.len() {
                    return Err(Error::Validation(format!("CSV line {} has {} values", i + 2, vals.len())));
                }
                Ok((id, T::from_values(&vals)))
            })
            .collect()
    }
}

pub type QualityReport = MetricReport<QualityScores>;
pub type DiversityReport = MetricReport<DiversityScores>;

/// Scores `(frame_id, estimate, truth)` triples in parallel, keeping input order.
pub fn quality_report(frames: &[(String, Image, Image)]) -> Result<QualityReport> {
    let rows = frames
        .par_iter()
        .map(|(id, e, t)| {
            quality_scores(e, t)
                .map(|scores| ReportRow {
                    frame_id: id.clone(),
                    scores,
                    flags: Vec::new(),
                })
                .map_err(|err| err.context(format!("frame {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::new(rows)
}

pub fn diversity_report(frames: &[(String, Image)]) -> Result<DiversityReport> {
    let rows = frames
        .par_iter()
        .map(|(id, img)| {
            diversity_metrics(img)
                .map(|d| ReportRow {
                    frame_id: id.clone(),
                    scores: d.scores,
                    flags: if d.degenerate { vec!["degenerate".to_string()] } else { Vec::new() },
                })
                .map_err(|err| err.context(format!("frame {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::new(rows)
}

//! Planar floating-point rasters shared by every stage of the pipeline.
//!
//! Pixel `(c, y, x)` lives at `data[c * height * width + y * width + x]`.
//! Interleaved file formats are transposed at the I/O boundary.
//!
//! Sampling convention: pixel centers sit at integer coordinates and every
//! stencil or interpolator clamps to the nearest edge pixel. Resizing maps
//! pixel centers with the half-pixel rule `src = (dst + 0.5) * scale - 0.5`.

mod io;
mod pyramid;

pub use io::{load_image, save_image, save_image_with_depth, BitDepth};
pub use pyramid::{build_pyramid, pyr_down, Pyramid};

use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Value domain carried alongside the samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// Display-referred values in `[0, 1]`.
    LdrDisplay,
    /// Scene-referred linear radiance, finite and non-negative.
    LinearHdr,
}

/// Rec. 709 luminance weights.
pub const LUMA_709: [f32; 3] = [0.2126, 0.7152, 0.0722];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    domain: Domain,
}

impl Image {
    /// Builds an image, checking shape and value-domain invariants.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
        domain: Domain,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Parameter(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Parameter(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Parameter(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        validate_values(&data, domain)?;
        Ok(Self {
            height,
            width,
            channels,
            data,
            domain,
        })
    }

    /// Internal constructor for values produced by range-preserving operators.
    pub(crate) fn from_raw(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
        domain: Domain,
    ) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
            domain,
        }
    }

    pub fn filled(
        height: usize,
        width: usize,
        channels: usize,
        value: f32,
        domain: Domain,
    ) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
            domain,
        )
    }

    /// Builds an image from `f(channel, y, x)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        domain: Domain,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, channels, data, domain)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Reads a pixel with clamp-to-edge addressing.
    #[inline]
    pub fn at_clamped(&self, c: usize, y: isize, x: isize) -> f32 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.at(c, y, x)
    }

    /// Bilinear sample at continuous coordinates, clamped to the pixel-center hull.
    #[inline]
    pub fn bilinear(&self, c: usize, y: f64, x: f64) -> f64 {
        bilinear_plane(self.plane(c), self.height, self.width, y, x)
    }

    /// Returns a copy re-tagged with `domain`, re-validating the values.
    pub fn with_domain(self, domain: Domain) -> Result<Self> {
        validate_values(&self.data, domain)?;
        Ok(Self { domain, ..self })
    }

    /// Extracts one channel as a 1-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_raw(
            self.height,
            self.width,
            1,
            self.plane(c).to_vec(),
            self.domain,
        )
    }

    /// Stacks 1-channel images of equal size into a multi-channel image.
    pub fn stack_channels(planes: &[&Image]) -> Result<Image> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Parameter("no planes to stack".into()))?;
        let mut data = Vec::with_capacity(first.pixel_count() * planes.len());
        for p in planes {
            if !p.same_size(first) || p.channels != 1 {
                return Err(Error::Parameter(
                    "stacked planes must be 1-channel and equally sized".into(),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Image {
            height: first.height,
            width: first.width,
            channels: planes.len(),
            data,
            domain: first.domain,
        })
    }

    /// Elementwise map into `domain`.
    pub fn map_values(&self, domain: Domain, f: impl Fn(f32) -> f32 + Sync) -> Image {
        let data = self.data.par_iter().map(|&v| f(v)).collect();
        Image::from_raw(self.height, self.width, self.channels, data, domain)
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::Parameter("shape mismatch".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
            .fold(0.0, f64::max))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }
}

fn validate_values(data: &[f32], domain: Domain) -> Result<()> {
    match domain {
        Domain::LdrDisplay => {
            if let Some((i, v)) = data
                .iter()
                .enumerate()
                .find(|(_, v)| !(0.0..=1.0).contains(*v))
            {
                return Err(Error::Validation(format!(
                    "LDR value {v} at index {i} outside [0, 1]"
                )));
            }
        }
        Domain::LinearHdr => {
            if let Some((i, v)) = data
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite() || **v < 0.0)
            {
                return Err(Error::Validation(format!(
                    "HDR value {v} at index {i} is negative or non-finite"
                )));
            }
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn bilinear_plane(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let p = |yy: usize, xx: usize| f64::from(plane[yy * w + xx]);
    let top = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
    let bot = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
    top + fy * (bot - top)
}

/// Bilinear sample plus its exact partial derivatives `(v, dv/dy, dv/dx)`.
///
/// A coordinate outside the pixel-center hull is clamped, so the derivative
/// along that axis is zero there.
#[inline]
pub(crate) fn bilinear_plane_grad(
    plane: &[f32],
    h: usize,
    w: usize,
    y: f64,
    x: f64,
) -> (f64, f64, f64) {
    let ymax = (h - 1) as f64;
    let xmax = (w - 1) as f64;
    let y_in = y > 0.0 && y < ymax;
    let x_in = x > 0.0 && x < xmax;
    let yc = y.clamp(0.0, ymax);
    let xc = x.clamp(0.0, xmax);
    let mut y0 = yc.floor() as usize;
    let mut x0 = xc.floor() as usize;
    // Keep a full cell on the far edge so the derivative stencil exists.
    if y0 + 1 >= h && h > 1 {
        y0 = h - 2;
    }
    if x0 + 1 >= w && w > 1 {
        x0 = w - 2;
    }
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    let p = |yy: usize, xx: usize| f64::from(plane[yy * w + xx]);
    let (a, b, c, d) = (p(y0, x0), p(y0, x1), p(y1, x0), p(y1, x1));
    let top = a + fx * (b - a);
    let bot = c + fx * (d - c);
    let v = top + fy * (bot - top);
    let dy = if y_in { bot - top } else { 0.0 };
    let dx = if x_in {
        (1.0 - fy) * (b - a) + fy * (d - c)
    } else {
        0.0
    };
    (v, dy, dx)
}

/// Rec. 709 luminance; 1-channel input is returned unchanged.
pub fn to_luminance(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = r
        .par_iter()
        .zip(g.par_iter())
        .zip(b.par_iter())
        .map(|((&r, &g), &b)| {
            let y = LUMA_709[0] * r + LUMA_709[1] * g + LUMA_709[2] * b;
            // Rounding may push a convex combination one ulp past its inputs.
            y.clamp(r.min(g).min(b), r.max(g).max(b))
        })
        .collect();
    Image::from_raw(img.height, img.width, 1, data, img.domain)
}

/// Bilinear resize with half-pixel-centered sampling.
pub fn resample(img: &Image, new_h: usize, new_w: usize) -> Result<Image> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::Parameter(format!(
            "resample target must be at least 1x1, got {new_h}x{new_w}"
        )));
    }
    let sy = img.height as f64 / new_h as f64;
    let sx = img.width as f64 / new_w as f64;
    let mut data = vec![0.0f32; new_h * new_w * img.channels];
    data.par_chunks_mut(new_w)
        .enumerate()
        .for_each(|(row, out)| {
            let c = row / new_h;
            let y = row % new_h;
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            let plane = img.plane(c);
            for (x, o) in out.iter_mut().enumerate() {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                *o = bilinear_plane(plane, img.height, img.width, src_y, src_x) as f32;
            }
        });
    if img.domain == Domain::LdrDisplay {
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(Image::from_raw(new_h, new_w, img.channels, data, img.domain))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Image::new(0, 2, 1, vec![], Domain::LinearHdr).is_err());
        assert!(Image::new(2, 2, 2, vec![0.0; 8], Domain::LinearHdr).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3], Domain::LinearHdr).is_err());
        assert!(Image::new(1, 1, 1, vec![1.5], Domain::LdrDisplay).is_err());
        assert!(Image::new(1, 1, 1, vec![-0.1], Domain::LinearHdr).is_err());
        assert!(Image::new(1, 1, 1, vec![f32::NAN], Domain::LinearHdr).is_err());
        assert!(Image::new(1, 1, 1, vec![1.5], Domain::LinearHdr).is_ok());
    }

    #[test]
    fn luminance_coefficients() {
        let white = Image::filled(1, 1, 3, 1.0, Domain::LdrDisplay).unwrap();
        assert_eq!(to_luminance(&white).data(), &[1.0]);
        let green = Image::new(1, 1, 3, vec![0.0, 1.0, 0.0], Domain::LdrDisplay).unwrap();
        assert!((to_luminance(&green).data()[0] - 0.7152).abs() < 1e-7);
        let gray = Image::new(1, 2, 1, vec![0.3, 0.6], Domain::LdrDisplay).unwrap();
        assert_eq!(to_luminance(&gray), gray);
    }

    #[test]
    fn resample_half_pixel_convention() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0], Domain::LdrDisplay).unwrap();
        let out = resample(&img, 2, 4).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resample_preserves_constants() {
        let img = Image::filled(5, 7, 3, 0.37, Domain::LdrDisplay).unwrap();
        for (h, w) in [(1, 1), (3, 11), (10, 14), (17, 2)] {
            let out = resample(&img, h, w).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-7));
        }
        assert!(resample(&img, 0, 3).is_err());
    }

    #[test]
    fn ramp_down_up_error_below_step() {
        let w = 32;
        let step = 1.0 / (w - 1) as f32;
        let img = Image::from_fn(8, w, 1, Domain::LdrDisplay, |_, _, x| x as f32 * step).unwrap();
        let down = resample(&img, 4, w / 2).unwrap();
        let up = resample(&down, 8, w).unwrap();
        let err = up.max_abs_diff(&img).unwrap();
        assert!(err < f64::from(step), "err {err}");
    }

    #[test]
    fn bilinear_grad_matches_cell_slopes() {
        let plane = [0.0f32, 1.0, 4.0, 2.0, 3.0, 7.0];
        let (v, dy, dx) = bilinear_plane_grad(&plane, 2, 3, 0.25, 0.5);
        assert!((v - bilinear_plane(&plane, 2, 3, 0.25, 0.5)).abs() < 1e-12);
        // dx = 0.75*(1-0) + 0.25*(3-2); dy = bot - top at fx = 0.5
        assert!((dx - 1.0).abs() < 1e-12);
        assert!((dy - (2.5 - 0.5)).abs() < 1e-12);
        let (_, dy, dx) = bilinear_plane_grad(&plane, 2, 3, -1.0, 5.0);
        assert_eq!((dy, dx), (0.0, 0.0));
    }
}

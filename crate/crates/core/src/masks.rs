//! Contrast, well-exposedness and saturation maps in the style of classical
//! exposure fusion.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imagecore::{to_luminance, Domain, Image};

pub const DEFAULT_WELLNESS_SIGMA: f64 = 0.2;

/// The three per-pixel exposure-quality maps and their channel stack
/// (contrast, wellness, saturation).
#[derive(Clone, Debug)]
pub struct MaskSet {
    pub contrast: Image,
    pub wellness: Image,
    pub saturation: Image,
    pub combined: Image,
}

/// Absolute response of the 4-neighbour Laplacian on luminance, edge-clamped.
pub fn contrast_map(img: &Image) -> Image {
    let y = to_luminance(img);
    let (h, w) = (y.height(), y.width());
    let mut out = vec![0.0f32; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        let r = r as isize;
        for (c, o) in row.iter_mut().enumerate() {
            let c = c as isize;
            let lap = y.at_clamped(0, r - 1, c)
                + y.at_clamped(0, r + 1, c)
                + y.at_clamped(0, r, c - 1)
                + y.at_clamped(0, r, c + 1)
                - 4.0 * y.at_clamped(0, r, c);
            *o = lap.abs();
        }
    });
    Image::from_raw(h, w, 1, out, Domain::LinearHdr)
}

/// Product over channels of `exp(-(v - 0.5)^2 / (2 sigma^2))`.
pub fn wellness_map(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let n = img.pixel_count();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let out = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut e = 0.0;
            for c in 0..img.channels() {
                let d = f64::from(img.plane(c)[i]) - 0.5;
                e += d * d;
            }
            (-e * inv).exp() as f32
        })
        .collect();
    Ok(Image::from_raw(
        img.height(),
        img.width(),
        1,
        out,
        Domain::LinearHdr,
    ))
}

/// Population standard deviation across R, G, B.
pub fn saturation_map(img: &Image) -> Result<Image> {
    if img.channels() != 3 {
        return Err(Error::Parameter(format!(
            "saturation needs 3 channels, got {}",
            img.channels()
        )));
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let out = (0..img.pixel_count())
        .into_par_iter()
        .map(|i| {
            let v = [f64::from(r[i]), f64::from(g[i]), f64::from(b[i])];
            let m = (v[0] + v[1] + v[2]) / 3.0;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0;
            var.sqrt() as f32
        })
        .collect();
    Ok(Image::from_raw(
        img.height(),
        img.width(),
        1,
        out,
        Domain::LinearHdr,
    ))
}

/// Computes all three maps; 1-channel input gets a zero saturation map.
pub fn adaptive_mask(img: &Image) -> Result<MaskSet> {
    let contrast = contrast_map(img);
    let wellness = wellness_map(img, DEFAULT_WELLNESS_SIGMA)?;
    let saturation = if img.channels() == 3 {
        saturation_map(img)?
    } else {
        Image::from_raw(
            img.height(),
            img.width(),
            1,
            vec![0.0; img.pixel_count()],
            Domain::LinearHdr,
        )
    };
    let combined = Image::stack_channels(&[&contrast, &wellness, &saturation])?;
    Ok(MaskSet {
        contrast,
        wellness,
        saturation,
        combined,
    })
}

impl MaskSet {
    /// Mask set with unit wellness everywhere, for inputs without exposure metadata.
    pub fn neutral(height: usize, width: usize) -> MaskSet {
        let zeros = Image::from_raw(height, width, 1, vec![0.0; height * width], Domain::LinearHdr);
        let ones = Image::from_raw(height, width, 1, vec![1.0; height * width], Domain::LinearHdr);
        let combined = Image::stack_channels(&[&zeros, &ones, &zeros]).expect("equal sizes");
        MaskSet {
            contrast: zeros.clone(),
            wellness: ones,
            saturation: zeros,
            combined,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn contrast_examples() {
        let flat = Image::filled(6, 6, 3, 0.3, Domain::LdrDisplay).unwrap();
        assert!(contrast_map(&flat).data().iter().all(|&v| v == 0.0));

        let ramp = Image::from_fn(5, 8, 1, Domain::LdrDisplay, |_, _, x| x as f32 / 8.0).unwrap();
        let c = contrast_map(&ramp);
        for y in 0..5 {
            for x in 1..7 {
                assert!(c.at(0, y, x).abs() < 1e-6);
            }
        }

        let imp = Image::from_fn(5, 5, 1, Domain::LdrDisplay, |_, y, x| {
            if (y, x) == (2, 2) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let c = contrast_map(&imp);
        assert_eq!(c.at(0, 2, 2), 4.0);
        for (y, x) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(c.at(0, y, x), 1.0);
        }
        assert_eq!(c.at(0, 1, 1), 0.0);
    }

    #[test]
    fn wellness_examples() {
        let gray = Image::filled(1, 1, 3, 0.5, Domain::LdrDisplay).unwrap();
        assert_eq!(wellness_map(&gray, 0.2).unwrap().data()[0], 1.0);
        let black = Image::filled(1, 1, 3, 0.0, Domain::LdrDisplay).unwrap();
        let white = Image::filled(1, 1, 3, 1.0, Domain::LdrDisplay).unwrap();
        let b = wellness_map(&black, 0.2).unwrap().data()[0];
        assert!((f64::from(b) - (-9.375f64).exp()).abs() < 1e-9);
        assert_eq!(b, wellness_map(&white, 0.2).unwrap().data()[0]);
        assert!(wellness_map(&gray, 0.0).is_err());
    }

    #[test]
    fn overexposed_flat_region_is_suppressed() {
        for v in [0.98f32, 0.99, 1.0] {
            let img = Image::filled(3, 3, 3, v, Domain::LdrDisplay).unwrap();
            assert!(wellness_map(&img, 0.2).unwrap().data()[0] < 0.06);
        }
    }

    #[test]
    fn saturation_examples() {
        let gray = Image::filled(2, 2, 3, 0.7, Domain::LdrDisplay).unwrap();
        assert!(saturation_map(&gray).unwrap().data().iter().all(|&v| v == 0.0));
        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0], Domain::LdrDisplay).unwrap();
        let s = saturation_map(&red).unwrap().data()[0];
        assert!((f64::from(s) - (2.0f64 / 9.0).sqrt()).abs() < 1e-7);
        let mono = Image::filled(2, 2, 1, 0.7, Domain::LdrDisplay).unwrap();
        assert!(matches!(saturation_map(&mono), Err(Error::Parameter(_))));
    }

    #[test]
    fn adaptive_mask_composition() {
        let gray = Image::filled(4, 4, 3, 0.5, Domain::LdrDisplay).unwrap();
        let m = adaptive_mask(&gray).unwrap();
        assert!(m.contrast.data().iter().all(|&v| v == 0.0));
        assert!(m.wellness.data().iter().all(|&v| v == 1.0));
        assert!(m.saturation.data().iter().all(|&v| v == 0.0));

        let img = Image::from_fn(6, 5, 3, Domain::LdrDisplay, |c, y, x| {
            ((c * 7 + y * 3 + x * 5) % 11) as f32 / 10.0
        })
        .unwrap();
        let m = adaptive_mask(&img).unwrap();
        assert_eq!(m.contrast, contrast_map(&img));
        assert_eq!(m.wellness, wellness_map(&img, 0.2).unwrap());
        assert_eq!(m.saturation, saturation_map(&img).unwrap());
        assert_eq!(m.combined.channels(), 3);
        assert_eq!(m.combined.plane(0), m.contrast.data());
        assert_eq!(m.combined.plane(1), m.wellness.data());
        assert_eq!(m.combined.plane(2), m.saturation.data());
    }

    proptest! {
        #[test]
        fn maps_nonnegative_and_shift_invariant(
            v in proptest::collection::vec(0.0f32..0.8, 3 * 16),
            shift in 0.0f32..0.2,
            s in 0.1f32..1.0,
        ) {
            let img = Image::new(4, 4, 3, v.clone(), Domain::LdrDisplay).unwrap();
            let shifted = Image::new(4, 4, 3, v.iter().map(|x| x + shift).collect(), Domain::LdrDisplay).unwrap();
            let scaled = Image::new(4, 4, 3, v.iter().map(|x| x * s).collect(), Domain::LdrDisplay).unwrap();
            let m = adaptive_mask(&img).unwrap();
            prop_assert!(m.contrast.data().iter().all(|&x| x >= 0.0));
            prop_assert!(m.saturation.data().iter().all(|&x| x >= 0.0));
            prop_assert!(m.wellness.data().iter().all(|&x| x > 0.0 && x <= 1.0));
            let ms = adaptive_mask(&shifted).unwrap();
            prop_assert!(m.saturation.max_abs_diff(&ms.saturation).unwrap() < 1e-5);
            prop_assert!(m.contrast.max_abs_diff(&ms.contrast).unwrap() < 1e-5);
            let sat_scaled = saturation_map(&scaled).unwrap();
            for (a, b) in m.saturation.data().iter().zip(sat_scaled.data()) {
                prop_assert!((a * s - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn wellness_not_shift_invariant() {
        let a = Image::filled(1, 1, 3, 0.5, Domain::LdrDisplay).unwrap();
        let b = Image::filled(1, 1, 3, 0.7, Domain::LdrDisplay).unwrap();
        assert!(wellness_map(&a, 0.2).unwrap().data()[0] > wellness_map(&b, 0.2).unwrap().data()[0]);
    }
}

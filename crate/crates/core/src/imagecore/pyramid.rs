use super::{Domain, Image};
use rayon::prelude::*;

/// Smallest side a non-base pyramid level may have.
pub const MIN_LEVEL_SIDE: usize = 8;

const BINOMIAL5: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Gaussian-style pyramid; `levels[0]` is full resolution.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<Image>,
    /// Level count asked for; larger than `levels.len()` when the image was too small.
    pub requested: usize,
}

impl Pyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn clamped(&self) -> bool {
        self.levels.len() < self.requested
    }

    pub fn coarsest(&self) -> &Image {
        self.levels.last().expect("pyramid has at least one level")
    }
}

/// Builds up to `levels` levels, stopping early once a level would drop below 8x8.
pub fn build_pyramid(img: &Image, levels: usize) -> Pyramid {
    let requested = levels.max(1);
    let mut out = vec![img.clone()];
    while out.len() < requested {
        let prev = out.last().unwrap();
        if prev.height() / 2 < MIN_LEVEL_SIDE || prev.width() / 2 < MIN_LEVEL_SIDE {
            break;
        }
        out.push(pyr_down(prev));
    }
    Pyramid {
        levels: out,
        requested,
    }
}

/// One pyramid step: separable [1,4,6,4,1]/16 blur (edge-clamped), then keep even pixels.
pub fn pyr_down(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let (nh, nw) = ((h / 2).max(1), (w / 2).max(1));
    let mut data = vec![0.0f32; nh * nw * img.channels()];
    data.par_chunks_mut(nh * nw)
        .enumerate()
        .for_each(|(c, out)| {
            let plane = img.plane(c);
            // Horizontal pass only at the kept columns.
            let mut tmp = vec![0.0f32; h * nw];
            for y in 0..h {
                let row = &plane[y * w..(y + 1) * w];
                for ox in 0..nw {
                    let x = (2 * ox) as isize;
                    let mut acc = 0.0f32;
                    for (k, wt) in BINOMIAL5.iter().enumerate() {
                        let xx = (x + k as isize - 2).clamp(0, w as isize - 1) as usize;
                        acc += wt * row[xx];
                    }
                    tmp[y * nw + ox] = acc;
                }
            }
            for oy in 0..nh {
                let y = (2 * oy) as isize;
                for ox in 0..nw {
                    let mut acc = 0.0f32;
                    for (k, wt) in BINOMIAL5.iter().enumerate() {
                        let yy = (y + k as isize - 2).clamp(0, h as isize - 1) as usize;
                        acc += wt * tmp[yy * nw + ox];
                    }
                    out[oy * nw + ox] = acc;
                }
            }
        });
    if img.domain() == Domain::LdrDisplay {
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Image::from_raw(nh, nw, img.channels(), data, img.domain())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_sizes() {
        let img = Image::filled(64, 64, 1, 0.25, Domain::LdrDisplay).unwrap();
        let pyr = build_pyramid(&img, 3);
        let sizes: Vec<_> = pyr.levels.iter().map(|l| (l.height(), l.width())).collect();
        assert_eq!(sizes, vec![(64, 64), (32, 32), (16, 16)]);
        assert!(!pyr.clamped());
        for l in &pyr.levels {
            assert!(l.data().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn clamps_small_images() {
        let img = Image::filled(20, 40, 3, 1.0, Domain::LinearHdr).unwrap();
        let pyr = build_pyramid(&img, 4);
        assert_eq!(pyr.len(), 2);
        assert!(pyr.clamped());
        assert_eq!(pyr.coarsest().height(), 10);
    }

    #[test]
    fn impulse_center_weight() {
        let mut data = vec![0.0f32; 33 * 33];
        data[16 * 33 + 16] = 1.0;
        let img = Image::new(33, 33, 1, data, Domain::LinearHdr).unwrap();
        let l2 = &build_pyramid(&img, 2).levels[1];
        assert_eq!((l2.height(), l2.width()), (16, 16));
        assert!((l2.at(0, 8, 8) - 36.0 / 256.0).abs() < 1e-6);
    }

    #[test]
    fn smooth_image_mean_preserved() {
        let n = 64;
        let tau = std::f32::consts::TAU;
        let img = Image::from_fn(n, n, 1, Domain::LdrDisplay, |_, y, x| {
            let (fx, fy) = (x as f32 / n as f32, y as f32 / n as f32);
            0.5 + 0.2 * (tau * fx).sin() * (tau * fy).cos() + 0.1 * (tau * (fx + fy)).cos()
        })
        .unwrap();
        let pyr = build_pyramid(&img, 3);
        let m0 = img.mean();
        for l in &pyr.levels[1..] {
            assert!((l.mean() - m0).abs() < 1e-3, "{} vs {m0}", l.mean());
        }
    }
}

use hdrv::metrics::{percentile, psnr_unit, ssim_unit, PSNR_CAP_DB};
use hdrv::{Domain, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct per-window SSIM with an explicit 2-D Gaussian window.
fn naive_ssim(a: &Image, b: &Image) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let r = (k / 2) as f64;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - r, j as f64 - r);
            win[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.height(), a.width());
    let mut sum = 0.0;
    let mut count = 0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let g = win[i * k + j];
                    let p = f64::from(a.at(0, y + i, x + j));
                    let q = f64::from(b.at(0, y + i, x + j));
                    mx += g * p;
                    my += g * q;
                    sxx += g * p * p;
                    syy += g * q * q;
                    sxy += g * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn random_unit(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, 1, (0..h * w).map(|_| rng.random::<f32>()).collect(), Domain::LinearHdr).unwrap()
}

#[test]
fn ssim_matches_naive_window_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for _ in 0..5 {
        let a = random_unit(&mut rng, 27, 33);
        let b = Image::new(
            27,
            33,
            1,
            a.data().iter().map(|v| (v * 0.8 + rng.random::<f32>() * 0.2).min(1.0)).collect(),
            Domain::LinearHdr,
        )
        .unwrap();
        let fast = ssim_unit(&a, &b).unwrap();
        let slow = naive_ssim(&a, &b);
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }
}

#[test]
fn psnr_matches_mse_formula() {
    let a = Image::filled(16, 16, 3, 0.5, Domain::LinearHdr).unwrap();
    let b = Image::filled(16, 16, 3, 0.6, Domain::LinearHdr).unwrap();
    let mse = (0.6f64 - 0.5).powi(2);
    let expected = 10.0 * (1.0 / mse).log10();
    assert!((psnr_unit(&a, &b).unwrap() - expected).abs() < 1e-4);
    assert_eq!(psnr_unit(&a, &a).unwrap(), PSNR_CAP_DB);
}

#[test]
fn percentile_interpolates_between_order_statistics() {
    let v: Vec<f32> = (0..=10).map(|i| i as f32).collect();
    assert_eq!(percentile(&v, 50.0), 5.0);
    assert!((percentile(&v, 99.9) - 9.99).abs() < 1e-9);
    assert_eq!(percentile(&v, 100.0), 10.0);
}

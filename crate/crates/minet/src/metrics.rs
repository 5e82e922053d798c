//! PSNR and SSIM for images with unit dynamic range. PSNR reports a
//! distinguished infinity for identical inputs instead of overflowing;
//! SSIM runs on the luma plane with the canonical 11x11 Gaussian window.

use std::fmt;

use crate::error::{Error, Result};
use crate::haze::Image;

/// PSNR in dB, with MSE = 0 mapped to an explicit sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Infinite,
    Db(f64),
}

impl Psnr {
    pub fn db(&self) -> f64 {
        match self {
            Psnr::Infinite => f64::INFINITY,
            Psnr::Db(v) => *v,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Infinite => f.write_str("inf"),
            Psnr::Db(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MetricReport {
    pub psnr: Psnr,
    pub ssim: f64,
}

fn check_shapes(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{}x{}", a.height, a.width),
            got: format!("{}x{}", b.height, b.width),
        });
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all pixels and channels.
pub fn psnr(a: &Image, b: &Image) -> Result<Psnr> {
    check_shapes("psnr", a, b)?;
    let mut acc = 0.0f64;
    for (x, y) in a.pixels.iter().zip(&b.pixels) {
        let d = x - y;
        acc += d * d;
    }
    let mse = acc / a.pixels.len() as f64;
    if mse == 0.0 {
        Ok(Psnr::Infinite)
    } else {
        Ok(Psnr::Db(-10.0 * mse.log10()))
    }
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn luma(img: &Image) -> Vec<f64> {
    let mut out = vec![0.0; img.height * img.width];
    for (i, v) in out.iter_mut().enumerate() {
        let p = &img.pixels[3 * i..3 * i + 3];
        *v = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    }
    out
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over every position where the full window fits. Uses
/// luma 0.299 R + 0.587 G + 0.114 B and constants for unit dynamic range.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("ssim", a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height, a.width
        )));
    }
    let la = luma(a);
    let lb = luma(b);
    let win = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let (h, w) = (a.height, a.width);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let g = win[wy * SSIM_WINDOW + wx];
                    let pa = la[(cy + wy - half) * w + cx + wx - half];
                    let pb = lb[(cy + wy - half) * w + cx + wx - half];
                    mu_a += g * pa;
                    mu_b += g * pb;
                    aa += g * pa * pa;
                    bb += g * pb * pb;
                    ab += g * pa * pb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn evaluate_pair(a: &Image, b: &Image) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
    })
}

/// CSV with one row per named report plus a trailing mean row. An infinite
/// PSNR anywhere makes the mean infinite.
pub fn metrics_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("filename,psnr_db,ssim\n");
    let mut psnr_sum = 0.0f64;
    let mut ssim_sum = 0.0f64;
    for (name, report) in rows {
        out.push_str(&format!("{name},{},{}\n", report.psnr, report.ssim));
        psnr_sum += report.psnr.db();
        ssim_sum += report.ssim;
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean_psnr = if psnr_sum.is_infinite() {
            Psnr::Infinite
        } else {
            Psnr::Db(psnr_sum / n)
        };
        out.push_str(&format!("mean,{mean_psnr},{}\n", ssim_sum / n));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize, lo: f64, hi: f64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..3 * h * w).map(|_| rng.gen_range(lo..hi)).collect();
        Image::new(h, w, pixels).unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = random_image(1, 12, 12, 0.0, 1.0);
        let p = psnr(&a, &a).unwrap();
        assert!(p.is_infinite());
        assert_eq!(p.to_string(), "inf");
    }

    #[test]
    fn psnr_uniform_error_is_twenty_db() {
        let a = Image::constant(8, 8, 0.0).unwrap();
        let b = Image::constant(8, 8, 0.1).unwrap();
        let p = psnr(&a, &b).unwrap().db();
        assert!((p - 20.0).abs() <= 1e-9, "psnr {p}");
    }

    #[test]
    fn psnr_symmetric_and_shift_invariant() {
        let a = random_image(2, 10, 9, 0.1, 0.6);
        let b = random_image(3, 10, 9, 0.1, 0.6);
        assert_eq!(psnr(&a, &b).unwrap().db(), psnr(&b, &a).unwrap().db());

        let shift = |img: &Image| {
            Image::new(
                img.height,
                img.width,
                img.pixels.iter().map(|v| v + 0.25).collect(),
            )
            .unwrap()
        };
        let base = psnr(&a, &b).unwrap().db();
        let moved = psnr(&shift(&a), &shift(&b)).unwrap().db();
        assert!((base - moved).abs() <= 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = random_image(4, 16, 16, 0.3, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<f64> = (0..a.pixels.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut prev = f64::INFINITY;
        for amp in [0.02, 0.05, 0.1, 0.2] {
            let noisy = Image::new(
                a.height,
                a.width,
                a.pixels
                    .iter()
                    .zip(&noise)
                    .map(|(v, n)| v + amp * n)
                    .collect(),
            )
            .unwrap();
            let p = psnr(&a, &noisy).unwrap().db();
            assert!(p < prev, "psnr {p} did not drop below {prev} at amp {amp}");
            prev = p;
        }
    }

    #[test]
    fn ssim_self_is_one() {
        let a = random_image(6, 13, 17, 0.0, 1.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Image::constant(11, 11, 0.0).unwrap();
        let b = Image::constant(11, 11, 1.0).unwrap();
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() <= 1e-9);
    }

    #[test]
    fn ssim_bounds_and_degradation() {
        let a = random_image(7, 20, 20, 0.2, 0.8);
        let b = random_image(8, 20, 20, 0.2, 0.8);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!(s < 1.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = random_image(9, 10, 12, 0.0, 1.0);
        assert!(ssim(&a, &a).is_err());
        let a = random_image(9, 11, 11, 0.0, 1.0);
        assert!(ssim(&a, &a).is_ok());
    }

    #[test]
    fn gaussian_window_normalized_and_symmetric() {
        let w = gaussian_window();
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        for y in 0..SSIM_WINDOW {
            for x in 0..SSIM_WINDOW {
                let m = w[(SSIM_WINDOW - 1 - y) * SSIM_WINDOW + (SSIM_WINDOW - 1 - x)];
                assert_eq!(w[y * SSIM_WINDOW + x], m);
            }
        }
    }

    #[test]
    fn luma_weights() {
        let mut pixels = vec![0.0; 3];
        pixels[0] = 1.0;
        let red = Image::new(1, 1, pixels).unwrap();
        assert!((luma(&red)[0] - 0.299).abs() <= 1e-15);
    }

    #[test]
    fn csv_includes_mean_row() {
        let r = MetricReport {
            psnr: Psnr::Db(20.0),
            ssim: 0.5,
        };
        let s = MetricReport {
            psnr: Psnr::Db(30.0),
            ssim: 0.7,
        };
        let csv = metrics_csv(&[("a.ppm".into(), r), ("b.ppm".into(), s)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "filename,psnr_db,ssim");
        assert!(lines[3].starts_with("mean,25,"));

        let inf = MetricReport {
            psnr: Psnr::Infinite,
            ssim: 1.0,
        };
        let csv = metrics_csv(&[("a.ppm".into(), inf), ("b.ppm".into(), r)]);
        assert!(csv.lines().last().unwrap().starts_with("mean,inf,"));
    }
}

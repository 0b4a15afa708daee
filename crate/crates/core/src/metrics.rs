//! Image quality metrics. Inputs are `[-1, 1]` images; every metric works on
//! the `[0, 1]` rescaling.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub psnr_db: f64,
    pub ssim: f64,
    /// Max absolute difference on the 0–255 scale.
    pub linf: f64,
}

fn unit(v: f32) -> f64 {
    (v as f64 + 1.0) / 2.0
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "mse")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (unit(x) - unit(y)).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

/// `10 log10(1 / MSE)` on `[0, 1]` pixels, capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

/// Largest absolute pixel difference, ×255.
pub fn linf(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "linf")?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (unit(x) - unit(y)).abs())
        .fold(0.0, f64::max)
        * 255.0)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over channels and valid window positions: 11×11 Gaussian window
/// (σ = 1.5, shrunk to the largest odd size that fits small images),
/// K1 = 0.01, K2 = 0.03, L = 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let (c, h, w) = a.chw()?;
    let mut ws = 11.min(h).min(w);
    if ws % 2 == 0 {
        ws -= 1;
    }
    if ws == 0 {
        return Err(invalid("ssim needs images of at least 1x1"));
    }
    let g = gaussian_window(ws, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let off = ch * h * w;
        for y in 0..=h - ws {
            for x in 0..=w - ws {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, &gy) in g.iter().enumerate() {
                    for (dx, &gx) in g.iter().enumerate() {
                        let wgt = gy * gx;
                        let i = off + (y + dy) * w + x + dx;
                        let (p, q) = (unit(ad[i]), unit(bd[i]));
                        mx += wgt * p;
                        my += wgt * q;
                        xx += wgt * p * p;
                        yy += wgt * q * q;
                        xy += wgt * p * q;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn quality(a: &Tensor, b: &Tensor) -> Result<QualityReport> {
    Ok(QualityReport {
        psnr_db: psnr(a, b)?,
        ssim: ssim(a, b)?,
        linf: linf(a, b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identical_images() {
        let mut rng = Rng::new(1);
        let a = Tensor::uniform(&[3, 16, 16], -1.0, 1.0, &mut rng);
        let q = quality(&a, &a).unwrap();
        assert_eq!(q.psnr_db, 100.0);
        assert!((q.ssim - 1.0).abs() < 1e-12);
        assert_eq!(q.linf, 0.0);
    }

    #[test]
    fn constant_offset() {
        // 0.1 in [0, 1] is 0.2 in [-1, 1].
        let a = Tensor::full(&[3, 8, 8], -0.5f32);
        let b = Tensor::full(&[3, 8, 8], -0.3f32);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!((linf(&a, &b).unwrap() - 25.5).abs() < 1e-4);
    }
}

//! Consistency metrics: MSE, PSNR and windowed SSIM.

use crate::error::{Error, Result};
use crate::latent::Latent;

/// SSIM window edge (non-overlapping windows).
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const ZERO_VARIANCE: f64 = 1e-12;

pub fn mse(a: &Latent, b: &Latent) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Latent, b: &Latent, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0 && max_val.is_finite()) {
        return Err(Error::Metric(format!("max_val must be positive, got {max_val}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// Mean SSIM over non-overlapping 8x8 windows of two 2-D arrays in `[0, 1]`.
///
/// Windows with both variances below 1e-12 take a contrast-structure term of 1.
/// Partial windows at the right and bottom edges are skipped.
pub fn ssim(a: &Latent, b: &Latent) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let &[h, w] = a.shape() else {
        return Err(Error::Metric(format!("ssim needs a 2-D array, got shape {:?}", a.shape())));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (xa, xb) = (a.array(), b.array());
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for i0 in (0..=h - SSIM_WINDOW).step_by(SSIM_WINDOW) {
        for j0 in (0..=w - SSIM_WINDOW).step_by(SSIM_WINDOW) {
            let mut sa = 0.0;
            let mut sb = 0.0;
            for i in i0..i0 + SSIM_WINDOW {
                for j in j0..j0 + SSIM_WINDOW {
                    sa += xa[[i, j]];
                    sb += xb[[i, j]];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in i0..i0 + SSIM_WINDOW {
                for j in j0..j0 + SSIM_WINDOW {
                    let (da, db) = (xa[[i, j]] - ma, xb[[i, j]] - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            let luminance = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
            let cs = if va < ZERO_VARIANCE && vb < ZERO_VARIANCE {
                1.0
            } else {
                (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2)
            };
            total += luminance * cs;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

use std::fmt;

use ndarray::{s, Array2, Array3, Zip};

use crate::error::{Error, Result};
use crate::sphere::EquirectGrid;

/// Subtracts the solid-angle weighted mean of `pred - gt`, the global log
/// shift minimizing the weighted squared error. `weights` has one entry per
/// row.
pub fn align_log_scale(pred: &Array3<f64>, gt: &Array3<f64>, weights: &[f64]) -> Array3<f64> {
    assert_eq!(pred.dim(), gt.dim());
    assert_eq!(weights.len(), pred.dim().0);
    let (mut num, mut den) = (0.0, 0.0);
    for (((r, _, _), &p), &g) in pred.indexed_iter().zip(gt.iter()) {
        num += weights[r] * (p - g);
        den += weights[r];
    }
    let shift = if den > 0.0 { num / den } else { 0.0 };
    pred.mapv(|v| v - shift)
}

pub fn sin_weights(height: usize) -> Vec<f64> {
    EquirectGrid::new(height, 1).row_weights()
}

/// Global Reinhard `x / (1 + x)` followed by gamma 1/2.2, clamped to `[0, 1]`.
pub fn tone_map(linear: &Array3<f64>) -> Array3<f64> {
    linear.mapv(|x| {
        let x = x.max(0.0);
        (x / (1.0 + x)).powf(1.0 / 2.2).clamp(0.0, 1.0)
    })
}

pub fn ldr_from_log(log: &Array3<f64>) -> Array3<f64> {
    tone_map(&log.mapv(f64::exp))
}

pub fn mse(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y)) / a.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    /// Zero error; PSNR is unbounded.
    Identical,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v}"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Psnr {
    let e = mse(a, b);
    if e == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Db(10.0 * (peak * peak / e).log10())
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Array2<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(i, j)| g[i] * g[j] / (total * total))
}

/// Mean structural similarity over valid 11x11 Gaussian windows, averaged
/// over channels.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Invalid(format!(
            "ssim shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w, ch) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..ch {
        let x = a.slice(s![.., .., c]);
        let y = b.slice(s![.., .., c]);
        for i in 0..oh {
            for j in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..SSIM_WINDOW {
                    for v in 0..SSIM_WINDOW {
                        let g = win[[u, v]];
                        let (p, q) = (x[[i + u, j + v]], y[[i + u, j + v]]);
                        mx += g * p;
                        my += g * q;
                        xx += g * p * p;
                        yy += g * q * q;
                        xy += g * p * q;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok(total / (oh * ow * ch) as f64)
}

/// LDR PSNR, SSIM, and linear-HDR PSNR of one reconstruction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub psnr_ldr: Psnr,
    pub ssim: f64,
    pub psnr_hdr: Psnr,
}

/// Metrics of a log-radiance prediction against log ground truth, after
/// exposure alignment. The HDR peak is the ground-truth maximum.
pub fn image_metrics(pred_log: &Array3<f64>, gt_log: &Array3<f64>) -> Result<ImageMetrics> {
    let aligned = align_log_scale(pred_log, gt_log, &sin_weights(gt_log.dim().0));
    let (p_lin, g_lin) = (aligned.mapv(f64::exp), gt_log.mapv(f64::exp));
    let (p_ldr, g_ldr) = (tone_map(&p_lin), tone_map(&g_lin));
    let peak = g_lin.iter().cloned().fold(0.0, f64::max);
    Ok(ImageMetrics {
        psnr_ldr: psnr(&p_ldr, &g_ldr, 1.0),
        ssim: ssim(&p_ldr, &g_ldr, 1.0)?,
        psnr_hdr: psnr(&p_lin, &g_lin, peak),
    })
}

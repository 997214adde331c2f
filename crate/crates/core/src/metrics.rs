//! Image quality metrics on H×W×3 images in [0, 1].

use crate::error::{Error, Result};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// L1 over pixels inside the rigid-region mask (0 when the mask is empty).
    pub l1_masked: f64,
}

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!(
            "metric inputs have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn l1(a: &[f64], b: &[f64]) -> Result<f64> {
    check(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

/// Mean absolute error over the channels of pixels where `mask > 0.5`.
pub fn masked_l1(a: &[f64], b: &[f64], mask: &[f64]) -> Result<f64> {
    check(a, b)?;
    if mask.len() * 3 != a.len() {
        return Err(Error::Dimension(format!(
            "mask has {} pixels, images have {}",
            mask.len(),
            a.len() / 3
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, &m) in mask.iter().enumerate() {
        if m > 0.5 {
            for c in 0..3 {
                sum += (a[p * 3 + c] - b[p * 3 + c]).abs();
            }
            count += 3;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Normalized 1-D Gaussian window; shrinks (keeping odd size) for small images.
pub fn ssim_window(width: usize, height: usize) -> Vec<f64> {
    let mut size = SSIM_WINDOW.min(width).min(height);
    if size.is_multiple_of(2) {
        size -= 1;
    }
    let size = size.max(1);
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one channel.
fn filter(x: &[f64], width: usize, height: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (ow, oh) = (width + 1 - k, height + 1 - k);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..k).map(|i| win[i] * x[y * width + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| win[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    (out, ow, oh)
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), averaged
/// over valid window positions and channels.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    check(a, b)?;
    if a.len() != width * height * 3 {
        return Err(Error::Dimension(format!(
            "images have {} values, expected {width}x{height}x3",
            a.len()
        )));
    }
    let win = ssim_window(width, height);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.iter().skip(c).step_by(3).copied().collect();
        let y: Vec<f64> = b.iter().skip(c).step_by(3).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter(&x, width, height, &win);
        let (my, _, _) = filter(&y, width, height, &win);
        let (sxx, _, _) = filter(&xx, width, height, &win);
        let (syy, _, _) = filter(&yy, width, height, &win);
        let (sxy, ow, oh) = filter(&xy, width, height, &win);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

pub fn image_metrics(
    target: &[f64],
    rendered: &[f64],
    mask: &[f64],
    width: usize,
    height: usize,
) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        l1: l1(target, rendered)?,
        psnr: psnr(target, rendered)?,
        ssim: ssim(target, rendered, width, height)?,
        l1_masked: masked_l1(target, rendered, mask)?,
    })
}

/// Averages per-frame metrics.
pub fn mean_metrics(items: &[ImageMetrics]) -> Result<ImageMetrics> {
    if items.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty frame set".into()));
    }
    let n = items.len() as f64;
    Ok(ImageMetrics {
        l1: items.iter().map(|m| m.l1).sum::<f64>() / n,
        psnr: items.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: items.iter().map(|m| m.ssim).sum::<f64>() / n,
        l1_masked: items.iter().map(|m| m.l1_masked).sum::<f64>() / n,
    })
}

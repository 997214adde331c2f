//! Photometric objective with a rigid-region term and a gradient-domain
//! perceptual proxy. Every loss returns its gradient with respect to the
//! rendered image.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub huber_delta: f64,
    pub lambda_mouth: f64,
    pub lambda_perceptual: f64,
    pub perceptual_start_iter: u64,
    /// When false the perceptual term is never added.
    pub perceptual_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            huber_delta: 0.1,
            lambda_mouth: 40.0,
            lambda_perceptual: 0.05,
            perceptual_start_iter: 1500,
            perceptual_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config(format!(
                "loss.huber_delta must be positive, got {}",
                self.huber_delta
            )));
        }
        if !(self.lambda_mouth >= 0.0) || !(self.lambda_perceptual >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Weight of the perceptual term at `iter`.
    pub fn perceptual_weight(&self, iter: u64) -> f64 {
        if self.perceptual_enabled && iter >= self.perceptual_start_iter {
            self.lambda_perceptual
        } else {
            0.0
        }
    }
}

pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_grad(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

fn check_same(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "{what}: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Mean Huber over all entries plus `lambda_mouth` times the mean Huber of
/// the mask-multiplied images. `mask` is per pixel, images are H×W×3.
pub fn photometric_loss(target: &[f64], rendered: &[f64], mask: &[f64], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    check_same(target, rendered, "photometric loss images")?;
    if mask.len() * 3 != target.len() {
        return Err(Error::Dimension(format!(
            "mask has {} pixels, images have {}",
            mask.len(),
            target.len() / 3
        )));
    }
    let n = target.len() as f64;
    let delta = cfg.huber_delta;
    let mut plain = 0.0;
    let mut masked = 0.0;
    let mut grad = vec![0.0; target.len()];
    for (j, g) in grad.iter_mut().enumerate() {
        let m = mask[j / 3];
        let r = rendered[j] - target[j];
        let rm = rendered[j] * m - target[j] * m;
        plain += huber(r, delta);
        masked += huber(rm, delta);
        *g = (huber_grad(r, delta) + cfg.lambda_mouth * huber_grad(rm, delta) * m) / n;
    }
    Ok((plain / n + cfg.lambda_mouth * (masked / n), grad))
}

fn pool2(src: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (w2, h2) = (w / 2, h / 2);
    let mut out = vec![0.0; w2 * h2 * 3];
    for y in 0..h2 {
        for x in 0..w2 {
            for c in 0..3 {
                let at = |xx: usize, yy: usize| src[(yy * w + xx) * 3 + c];
                let s = at(2 * x, 2 * y) + at(2 * x + 1, 2 * y) + at(2 * x, 2 * y + 1) + at(2 * x + 1, 2 * y + 1);
                out[(y * w2 + x) * 3 + c] = 0.25 * s;
            }
        }
    }
    (out, w2, h2)
}

fn unpool2(g: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (w2, h2) = (w / 2, h / 2);
    let mut out = vec![0.0; w * h * 3];
    for y in 0..h2 {
        for x in 0..w2 {
            for c in 0..3 {
                let v = 0.25 * g[(y * w2 + x) * 3 + c];
                for (xx, yy) in [
                    (2 * x, 2 * y),
                    (2 * x + 1, 2 * y),
                    (2 * x, 2 * y + 1),
                    (2 * x + 1, 2 * y + 1),
                ] {
                    out[(yy * w + xx) * 3 + c] += v;
                }
            }
        }
    }
    out
}

/// Mean |Δx| and |Δy| of a difference image, and its gradient.
fn gradient_l1(d: &[f64], w: usize, h: usize) -> Option<(f64, Vec<f64>)> {
    let count = (w.saturating_sub(1) * h + w * h.saturating_sub(1)) * 3;
    if count == 0 {
        return None;
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; d.len()];
    let inv = 1.0 / count as f64;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let i = (y * w + x) * 3 + c;
                if x + 1 < w {
                    let j = i + 3;
                    let v = d[j] - d[i];
                    total += v.abs();
                    let s = sign(v) * inv;
                    grad[j] += s;
                    grad[i] -= s;
                }
                if y + 1 < h {
                    let j = i + w * 3;
                    let v = d[j] - d[i];
                    total += v.abs();
                    let s = sign(v) * inv;
                    grad[j] += s;
                    grad[i] -= s;
                }
            }
        }
    }
    Some((total * inv, grad))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Multi-scale (1, ½, ¼) mean absolute difference of finite-difference image
/// gradients. Scales too small to have any neighbor pair are skipped.
pub fn perceptual_proxy(target: &[f64], rendered: &[f64], width: usize, height: usize) -> Result<(f64, Vec<f64>)> {
    check_same(target, rendered, "perceptual proxy images")?;
    if target.len() != width * height * 3 {
        return Err(Error::Dimension(format!(
            "images have {} values, expected {}x{}x3",
            target.len(),
            width,
            height
        )));
    }
    // pooling and differencing are linear, so work on Î − I directly
    let d0: Vec<f64> = rendered.iter().zip(target).map(|(r, t)| r - t).collect();
    let mut levels = vec![(d0, width, height)];
    for _ in 0..2 {
        let (d, w, h) = levels.last().expect("nonempty");
        let next = pool2(d, *w, *h);
        levels.push(next);
    }
    let mut terms = Vec::new();
    for (s, (d, w, h)) in levels.iter().enumerate() {
        if let Some((v, g)) = gradient_l1(d, *w, *h) {
            terms.push((s, v, g));
        }
    }
    if terms.is_empty() {
        return Ok((0.0, vec![0.0; target.len()]));
    }
    let weight = 1.0 / terms.len() as f64;
    let value = terms.iter().map(|t| t.1).sum::<f64>() * weight;
    let mut grad = vec![0.0; target.len()];
    for (s, _, g) in terms {
        let mut g: Vec<f64> = g.iter().map(|v| v * weight).collect();
        for level in (0..s).rev() {
            let (_, w, h) = &levels[level];
            g = unpool2(&g, *w, *h);
        }
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((value, grad))
}

/// Value and image gradient of the full objective at iteration `iter`.
pub fn total_loss(
    target: &[f64],
    rendered: &[f64],
    mask: &[f64],
    width: usize,
    height: usize,
    iter: u64,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let (mut loss, mut grad) = photometric_loss(target, rendered, mask, cfg)?;
    let w = cfg.perceptual_weight(iter);
    if w > 0.0 {
        let (p, pg) = perceptual_proxy(target, rendered, width, height)?;
        loss += w * p;
        for (a, b) in grad.iter_mut().zip(&pg) {
            *a += w * b;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_examples() {
        assert_eq!(huber(0.0, 0.1), 0.0);
        assert!((huber(0.1, 0.1) - 0.005).abs() <= 1e-15);
        assert!((huber(0.2, 0.1) - 0.015).abs() <= 1e-15);
        assert!((huber(-0.2, 0.1) - 0.015).abs() <= 1e-15);
    }

    #[test]
    fn huber_is_c1_at_threshold() {
        let d = 0.1;
        let (lo, hi) = (d - 1e-9, d + 1e-9);
        assert!((huber(lo, d) - huber(hi, d)).abs() < 1e-9);
        assert!((huber_grad(lo, d) - huber_grad(hi, d)).abs() < 1e-8);
    }

    #[test]
    fn photometric_half_mask_example() {
        let (w, h) = (4, 4);
        let target = vec![0.3; w * h * 3];
        let rendered = vec![0.5; w * h * 3];
        let mask: Vec<f64> = (0..w * h).map(|p| if p < 8 { 1.0 } else { 0.0 }).collect();
        let (l, _) = photometric_loss(&target, &rendered, &mask, &LossConfig::default()).unwrap();
        assert!((l - 0.315).abs() <= 1e-12, "{l}");
    }

    #[test]
    fn photometric_degenerate_cases() {
        let cfg = LossConfig::default();
        let a = vec![0.2, 0.4, 0.9, 0.1, 0.0, 1.0];
        let (l, g) = photometric_loss(&a, &a, &[1.0, 0.0], &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let b = vec![0.3, 0.1, 0.5, 0.6, 0.0, 0.2];
        let (l, _) = photometric_loss(&a, &b, &[0.0, 0.0], &cfg).unwrap();
        let plain: f64 = a.iter().zip(&b).map(|(x, y)| huber(y - x, 0.1)).sum::<f64>() / 6.0;
        assert_eq!(l, plain);
        assert!(matches!(
            photometric_loss(&a, &b[..3], &[0.0], &cfg),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn proxy_zero_cases() {
        let a = vec![0.3; 8 * 8 * 3];
        let b = vec![0.7; 8 * 8 * 3];
        assert_eq!(perceptual_proxy(&a, &a, 8, 8).unwrap().0, 0.0);
        assert_eq!(perceptual_proxy(&a, &b, 8, 8).unwrap().0, 0.0);
    }

    #[test]
    fn proxy_step_edge_by_hand() {
        // gray 4×4, step edge between columns 1 and 2 versus a one-pixel ramp
        let step = [0.0, 0.0, 1.0, 1.0];
        let ramp = [0.0, 0.25, 0.75, 1.0];
        let img = |row: &[f64; 4]| -> Vec<f64> { (0..16).flat_map(|p| [row[p % 4]; 3]).collect() };
        let (v, _) = perceptual_proxy(&img(&step), &img(&ramp), 4, 4).unwrap();
        // full scale: x-diffs step (0,1,0) ramp (.25,.5,.25): |Δ| = .25,.5,.25 per row,
        // y-diffs all zero; 4 rows × 3 channels; 24 pairs per channel
        let s1 = (4.0 * (0.25 + 0.5 + 0.25)) / 24.0;
        // half scale: step → (0, 1), ramp → (.125, .875): x-diff 1 vs .75
        let s2 = (2.0 * 0.25) / 4.0;
        // quarter scale is 1×1: no pairs
        assert!((v - (s1 + s2) / 2.0).abs() < 1e-15, "{v}");
    }

    #[test]
    fn schedule_switch() {
        let cfg = LossConfig::default();
        let a: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let b: Vec<f64> = (0..48).map(|i| (i as f64 * 0.11).cos().abs()).collect();
        let m = vec![1.0; 16];
        let (photo, _) = photometric_loss(&a, &b, &m, &cfg).unwrap();
        let (before, _) = total_loss(&a, &b, &m, 4, 4, 1499, &cfg).unwrap();
        assert_eq!(before, photo);
        let (after, _) = total_loss(&a, &b, &m, 4, 4, 1500, &cfg).unwrap();
        let (proxy, _) = perceptual_proxy(&a, &b, 4, 4).unwrap();
        assert_eq!(after, photo + 0.05 * proxy);
        assert_eq!(total_loss(&a, &a, &m, 4, 4, 5000, &cfg).unwrap().0, 0.0);
    }
}

#![allow(dead_code)]

use cags::deform::PosedGaussians;
use cags::geometry::Camera;
use cags::linalg::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random posed field in front of a camera looking down -z from (0, 0, 3).
pub struct RandomScene {
    pub posed: PosedGaussians,
    pub opacity_logit: Vec<f64>,
    pub sh: Vec<f64>,
    pub sh_bases: usize,
    pub camera: Camera,
}

pub fn camera(size: usize) -> Camera {
    Camera::look_at(
        [0.0, 0.0, 3.0],
        [0.0; 3],
        [0.0, 1.0, 0.0],
        1.3 * size as f64,
        size,
        size,
    )
    .unwrap()
}

pub fn random_scene(seed: u64, n: usize, size: usize, sh_bases: usize) -> RandomScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut posed = PosedGaussians::default();
    let mut opacity_logit = Vec::new();
    let mut sh = Vec::new();
    for _ in 0..n {
        posed.mu.push([
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
        ]);
        let q: Quat = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let nq = quat_norm(q);
        posed.rotation.push(q.map(|v| v / nq));
        posed.log_scale.push([
            rng.gen_range(-2.8..-1.3),
            rng.gen_range(-2.8..-1.3),
            rng.gen_range(-2.8..-1.3),
        ]);
        opacity_logit.push(rng.gen_range(-1.5..2.5));
        for _ in 0..sh_bases * 3 {
            sh.push(rng.gen_range(-0.6..0.6));
        }
    }
    RandomScene {
        posed,
        opacity_logit,
        sh,
        sh_bases,
        camera: camera(size),
    }
}

/// max |a − n| / max(|a|, |n|, 1e-6) over all entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let d = (a - n).abs();
            if d == 0.0 {
                0.0
            } else {
                d / a.abs().max(n.abs()).max(1e-6)
            }
        })
        .fold(0.0, f64::max)
}

pub fn random_weights(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Closed-form eigenvalues of a symmetric 3×3 matrix (trigonometric solution
/// of the characteristic cubic), ascending.
pub fn eig_oracle(a: &Mat3) -> [f64; 3] {
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    if p1 == 0.0 {
        let mut e = [a[0][0], a[1][1], a[2][2]];
        e.sort_by(f64::total_cmp);
        return e;
    }
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = (a[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    let mut e = [e1, e2, e3];
    e.sort_by(f64::total_cmp);
    e
}

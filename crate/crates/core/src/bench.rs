//! Rasterizer throughput measurement.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::PosedGaussians;
use crate::error::Result;
use crate::geometry::Camera;
use crate::render::{self, RenderSettings, SplatInputs};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub gaussians: usize,
    pub phase: &'static str,
    pub mean_ms: f64,
    pub std_ms: f64,
}

pub const BENCH_HEADER: &str = "gaussians,phase,mean_ms,std_ms";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{:.3},{:.3}", r.gaussians, r.phase, r.mean_ms, r.std_ms);
    }
    out
}

/// Random field filling the view of a camera at distance 3.2.
pub struct BenchScene {
    pub posed: PosedGaussians,
    pub opacity_logit: Vec<f64>,
    pub sh: Vec<f64>,
    pub camera: Camera,
}

impl BenchScene {
    pub fn new(n: usize, resolution: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let camera = Camera::look_at(
            [0.0, 0.0, 3.2],
            [0.0; 3],
            [0.0, 1.0, 0.0],
            1.4 * resolution as f64,
            resolution,
            resolution,
        )?;
        let mut posed = PosedGaussians::default();
        for _ in 0..n {
            posed.mu.push([
                rng.gen_range(-1.1..1.1),
                rng.gen_range(-1.1..1.1),
                rng.gen_range(-1.0..1.0),
            ]);
            let q = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                1.0f64,
            ];
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            posed.rotation.push(q.map(|v| v / norm));
            let s = rng.gen_range(0.008f64..0.03).ln();
            posed.log_scale.push([s, s + rng.gen_range(-0.5..0.5), s - 1.0]);
        }
        let opacity_logit = (0..n).map(|_| rng.gen_range(-1.0..3.0)).collect();
        let sh = (0..n * 3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Ok(BenchScene {
            posed,
            opacity_logit,
            sh,
            camera,
        })
    }

    pub fn inputs(&self) -> SplatInputs<'_> {
        SplatInputs {
            posed: &self.posed,
            opacity_logit: &self.opacity_logit,
            sh_coeffs: &self.sh,
            sh_bases: 1,
        }
    }
}

fn stats(samples: &[f64]) -> (f64, f64) {
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Times a forward render and a forward+backward pass per size.
pub fn run_bench(sizes: &[usize], resolution: usize, warmup: usize, runs: usize) -> Result<Vec<BenchRow>> {
    let settings = RenderSettings::default();
    let mut rows = Vec::new();
    for &n in sizes {
        let scene = BenchScene::new(n, resolution, n as u64)?;
        let inputs = scene.inputs();
        let grad: Vec<f64> = (0..resolution * resolution * 3)
            .map(|i| ((i % 7) as f64 - 3.0) * 0.1)
            .collect();
        let mut fwd = Vec::with_capacity(runs);
        let mut both = Vec::with_capacity(runs);
        for r in 0..warmup + runs {
            let t0 = Instant::now();
            let (_, state) = render::render(&inputs, &scene.camera, [0.0; 3], &settings)?;
            let t1 = Instant::now();
            render::render_backward(&inputs, &state, &grad)?;
            let t2 = Instant::now();
            if r >= warmup {
                fwd.push((t1 - t0).as_secs_f64() * 1e3);
                both.push((t2 - t0).as_secs_f64() * 1e3);
            }
        }
        let (m, s) = stats(&fwd);
        rows.push(BenchRow {
            gaussians: n,
            phase: "forward",
            mean_ms: m,
            std_ms: s,
        });
        let (m, s) = stats(&both);
        rows.push(BenchRow {
            gaussians: n,
            phase: "forward_backward",
            mean_ms: m,
            std_ms: s,
        });
    }
    Ok(rows)
}

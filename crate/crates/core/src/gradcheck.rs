//! End-to-end finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{precision, ParamId, Precision};
use crate::deform::{PoseCache, SurfaceAnchor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scene::{self, BlendshapeMesh, SceneConfig};

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub class: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes straddling a change in the blended fragment set.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "class,max_rel_error,checked,skipped,passed (tolerance {:e})\n",
            self.tolerance
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{},{:e},{},{},{}\n",
                e.class, e.max_rel_error, e.checked, e.skipped, e.passed
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub gaussians: usize,
    pub resolution: usize,
    pub tolerance: f64,
    /// Multiplies the random image weights of the scalar objective.
    pub loss_scale: f64,
    /// Entries sampled per parameter tensor (all entries if smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            gaussians: 10,
            resolution: 16,
            tolerance: 1e-4,
            loss_scale: 1.0,
            samples_per_tensor: 48,
            seed: 1,
        }
    }
}

/// |a − n| / max(|a|, |n|, 1e-6); exact agreement (including 0/0) is 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        0.0
    } else {
        d / analytic.abs().max(numeric.abs()).max(1e-6)
    }
}

struct Problem {
    mesh: BlendshapeMesh,
    model: Model,
    psi: Vec<f64>,
    camera: crate::geometry::Camera,
    weights: Vec<f64>,
}

impl Problem {
    fn image(&self) -> Result<(Vec<f64>, Vec<u32>)> {
        let mut cache = PoseCache::new(&self.mesh);
        let fwd = self
            .model
            .forward(&self.mesh, &self.psi, &self.camera, [0.1, 0.2, 0.3], &mut cache)?;
        let structure = fwd.blend_structure();
        Ok((fwd.image.rgb, structure))
    }

    /// Central difference of the weighted image sum, differencing per pixel
    /// before summing to keep cancellation error out of the sum. `None` when
    /// the two probes blend different fragment sets (a discontinuity lies
    /// between them).
    fn central_difference(&mut self, id: ParamId, j: usize, h: f64) -> Result<Option<f64>> {
        let orig = self.model.store.value(id).data()[j];
        self.model.store.get_mut(id).value.data_mut()[j] = orig + h;
        let up = self.image();
        self.model.store.get_mut(id).value.data_mut()[j] = orig - h;
        let down = self.image();
        self.model.store.get_mut(id).value.data_mut()[j] = orig;
        let ((up, s_up), (down, s_down)) = (up?, down?);
        if s_up != s_down {
            return Ok(None);
        }
        let mut acc = 0.0;
        for ((u, d), w) in up.iter().zip(&down).zip(&self.weights) {
            acc += w * (u - d);
        }
        Ok(Some(acc / (2.0 * h)))
    }

    fn analytic(&mut self) -> Result<()> {
        let mut cache = PoseCache::new(&self.mesh);
        self.model.store.zero_grad();
        let fwd = self
            .model
            .forward(&self.mesh, &self.psi, &self.camera, [0.1, 0.2, 0.3], &mut cache)?;
        let w = self.weights.clone();
        self.model.backward(&fwd, &w)
    }
}

fn build(opts: &GradcheckOptions) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let scene_cfg = SceneConfig {
        seed: opts.seed,
        mesh_resolution: 6,
        resolution: opts.resolution,
        ..SceneConfig::default()
    };
    let mesh = scene::make_head_scene(&scene_cfg)?;
    // anchors on camera-facing head triangles
    let facing: Vec<usize> = (0..mesh.triangles.len())
        .filter(|&t| {
            let [a, b, c] = mesh.triangles[t].map(|v| mesh.vertices_rest[v]);
            let n = crate::linalg::cross3(crate::linalg::sub3(b, a), crate::linalg::sub3(c, a));
            let area = 0.5 * crate::linalg::norm3(n);
            area > 1e-6 && n[2] / (2.0 * area) > 0.6
        })
        .collect();
    if facing.is_empty() {
        return Err(Error::Config("no camera-facing triangles".into()));
    }
    let anchors: Vec<SurfaceAnchor> = (0..opts.gaussians)
        .map(|_| {
            let t = facing[rng.gen_range(0..facing.len())];
            let (u, v): (f64, f64) = (rng.gen_range(0.05..0.9), rng.gen_range(0.05..0.9));
            let (u, v) = if u + v > 0.95 { (0.95 - v, 0.95 - u) } else { (u, v) };
            SurfaceAnchor {
                triangle: t,
                barycentric: [1.0 - u - v, u, v],
                normal_offset: rng.gen_range(-0.02..0.02),
            }
        })
        .collect();
    let model_cfg = ModelConfig {
        gaussians: opts.gaussians,
        sh_degree: 1,
        seed: opts.seed,
        ..ModelConfig::default()
    };
    let (mut model, mut init_rng) = Model::with_anchors(&mesh, &model_cfg, scene_cfg.tokens, anchors)?;
    model.randomize_head(&mut init_rng, 0.05);
    let ids = model.gaussian;
    for v in model.store.get_mut(ids.opacity_logit).value.data_mut() {
        *v = rng.gen_range(-1.0..2.0);
    }
    for v in model.store.get_mut(ids.sh_coeffs).value.data_mut() {
        *v = rng.gen_range(-0.6..0.6);
    }
    for v in model.store.get_mut(ids.rotation).value.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for v in model.store.get_mut(ids.log_scale).value.data_mut() {
        *v = rng.gen_range(0.12f64..0.35).ln();
    }
    let mut psi = vec![0.0; mesh.expression_dim];
    for p in psi.iter_mut().take(mesh.jaw_channel() + 1) {
        *p = rng.gen_range(-0.5..0.5);
    }
    let camera = scene::default_camera(opts.resolution)?;
    let weights = (0..opts.resolution * opts.resolution * 3)
        .map(|_| opts.loss_scale * rng.gen_range(-1.0..1.0))
        .collect();
    Ok(Problem {
        mesh,
        model,
        psi,
        camera,
        weights,
    })
}

fn sample_indices(len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    (0..k).map(|i| i * len / k).collect()
}

/// Compares analytic and central-difference gradients for every parameter
/// class on a small randomized scene. Requires verification precision.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if precision() != Precision::Verification {
        return Err(Error::Config("gradcheck requires verification precision".into()));
    }
    let mut problem = build(opts)?;
    problem.analytic()?;
    let ids = problem.model.gaussian;
    let f = &problem.model.fusion;
    let mlp: Vec<ParamId> = f.mlp.iter().flat_map(|&(w, b)| [w, b]).collect();
    let mut classes: Vec<(&'static str, Vec<ParamId>)> = vec![
        ("opacity", vec![ids.opacity_logit]),
        ("sh", vec![ids.sh_coeffs]),
        ("rotation", vec![ids.rotation]),
        ("log_scale", vec![ids.log_scale]),
    ];
    for (name, id) in [("w_q", f.w_q), ("w_k", f.w_k), ("w_v", f.w_v)] {
        classes.push((name, id.into_iter().collect()));
    }
    classes.push(("mlp", mlp));

    let mut entries = Vec::new();
    for (class, params) in classes {
        let mut worst = 0.0f64;
        let mut checked = 0;
        let mut skipped = 0;
        for id in params {
            let len = problem.model.store.value(id).len();
            for j in sample_indices(len, opts.samples_per_tensor) {
                let analytic = problem.model.store.get(id).grad.data()[j];
                let Some(numeric) = problem.central_difference(id, j, STEP)? else {
                    skipped += 1;
                    continue;
                };
                worst = worst.max(relative_error(analytic, numeric));
                checked += 1;
            }
        }
        entries.push(GradcheckEntry {
            class,
            max_rel_error: worst,
            checked,
            skipped,
            // a zero tolerance can never be met by finite differences
            passed: checked > 0 && worst < opts.tolerance,
        });
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        entries,
    })
}

//! Procedural deforming head scenes and oracle-rendered datasets.
//!
//! The head is a latitude-longitude ellipsoid driven by smooth blendshapes.
//! A small box in front of the mouth (the teeth analog) receives no blendshape
//! motion and only swings rigidly about the jaw axis. Ground-truth images are
//! rendered from a fixed oracle Gaussian field bound to the deformed mesh.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::deform::{self, AnchorBinding, PoseCache, PosedGaussians};
use crate::error::{Error, Result};
use crate::geometry::{self, Camera, GaussianField, SH_C0};
use crate::linalg::*;
use crate::render::{self, ImageBuffer, RenderSettings, SplatInputs};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    /// Square image side in pixels.
    pub resolution: usize,
    /// Latitude segments of the head; longitude uses twice as many.
    pub mesh_resolution: usize,
    pub blendshapes: usize,
    pub expression_dim: usize,
    pub tokens: usize,
    /// Half width of the rigid box.
    pub rigid_extent: f64,
    pub frames: usize,
    /// Peak blendshape weight magnitude along trajectories.
    pub expression_amplitude: f64,
    /// Peak jaw angle (radians).
    pub jaw_range: f64,
    /// Strength of expression-dependent oracle motion that the mesh does not
    /// explain (0 makes the scene exactly recoverable with zero offsets).
    pub oracle_detail: f64,
    /// Oracle Gaussian count target.
    pub oracle_gaussians: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 7,
            resolution: 64,
            mesh_resolution: 16,
            blendshapes: 8,
            expression_dim: 16,
            tokens: 4,
            rigid_extent: 0.22,
            frames: 250,
            expression_amplitude: 1.0,
            jaw_range: 0.3,
            oracle_detail: 0.0,
            oracle_gaussians: 1024,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mesh_resolution < 3 {
            return Err(Error::Config(format!(
                "scene.mesh_resolution must be at least 3, got {}",
                self.mesh_resolution
            )));
        }
        if self.resolution < 4 {
            return Err(Error::Config(format!(
                "scene.resolution must be at least 4, got {}",
                self.resolution
            )));
        }
        if self.expression_dim < self.blendshapes + 1 {
            return Err(Error::Config(format!(
                "scene.expression_dim {} cannot hold {} blendshape weights and a jaw angle",
                self.expression_dim, self.blendshapes
            )));
        }
        if self.tokens == 0 || !self.expression_dim.is_multiple_of(self.tokens) {
            return Err(Error::Config(format!(
                "scene.expression_dim {} is not divisible by scene.tokens {}",
                self.expression_dim, self.tokens
            )));
        }
        if !(self.rigid_extent > 0.0 && self.rigid_extent < 0.5) {
            return Err(Error::Config("scene.rigid_extent must be in (0, 0.5)".into()));
        }
        Ok(())
    }

    /// Number of frames reserved for testing (the final 20%).
    pub fn test_frames(&self) -> usize {
        (self.frames as f64 * 0.2).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeMesh {
    pub vertices_rest: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub uv: Vec<Vec2>,
    /// K×V displacement bases.
    pub blendshapes: Vec<Vec<Vec3>>,
    /// Sorted indices of vertices that move only with the jaw.
    pub rigid_vertices: Vec<usize>,
    pub jaw_pivot: Vec3,
    pub jaw_axis: Vec3,
    pub expression_dim: usize,
}

impl BlendshapeMesh {
    pub fn is_rigid_vertex(&self, v: usize) -> bool {
        self.rigid_vertices.binary_search(&v).is_ok()
    }

    pub fn is_rigid_triangle(&self, t: usize) -> bool {
        self.triangles[t].iter().all(|&v| self.is_rigid_vertex(v))
    }

    pub fn jaw_channel(&self) -> usize {
        self.blendshapes.len()
    }

    /// Axis-aligned bounds of the rest mesh.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices_rest {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }
}

const HEAD_RADII: Vec3 = [0.75, 0.95, 0.8];
const POLAR_MIN: f64 = 0.12 * PI;
const POLAR_MAX: f64 = 0.88 * PI;
const MOUTH_HEIGHT: f64 = -0.38;
const HEAD_UV_MAX_V: f64 = 0.75;

fn head_point(theta: f64, phi: f64) -> Vec3 {
    [
        HEAD_RADII[0] * theta.sin() * phi.sin(),
        HEAD_RADII[1] * theta.cos(),
        HEAD_RADII[2] * theta.sin() * phi.cos(),
    ]
}

/// Outward ellipsoid normal at a surface point.
fn head_normal(p: Vec3) -> Vec3 {
    normalize3([
        p[0] / (HEAD_RADII[0] * HEAD_RADII[0]),
        p[1] / (HEAD_RADII[1] * HEAD_RADII[1]),
        p[2] / (HEAD_RADII[2] * HEAD_RADII[2]),
    ])
    .unwrap_or([0.0, 0.0, 1.0])
}

/// Builds the deterministic head mesh for `config`.
pub fn make_head_scene(config: &SceneConfig) -> Result<BlendshapeMesh> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_lat = config.mesh_resolution;
    let n_lon = 2 * n_lat;
    let mut vertices = Vec::new();
    let mut uv = Vec::new();
    let mut angles = Vec::new();
    for i in 0..=n_lat {
        let theta = POLAR_MIN + (POLAR_MAX - POLAR_MIN) * i as f64 / n_lat as f64;
        for j in 0..=n_lon {
            let phi = 2.0 * PI * j as f64 / n_lon as f64;
            vertices.push(head_point(theta, phi));
            uv.push([j as f64 / n_lon as f64, HEAD_UV_MAX_V * i as f64 / n_lat as f64]);
            angles.push((theta, phi));
        }
    }
    let mut triangles = Vec::new();
    let row = n_lon + 1;
    for i in 0..n_lat {
        for j in 0..n_lon {
            let v00 = i * row + j;
            let (v01, v10, v11) = (v00 + 1, v00 + row, v00 + row + 1);
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    let head_vertices = vertices.len();

    // Rigid box centered on the mouth, slightly proud of the surface.
    let cos_t = MOUTH_HEIGHT / HEAD_RADII[1];
    let front_z = HEAD_RADII[2] * (1.0 - cos_t * cos_t).sqrt();
    let half = [config.rigid_extent, 0.06, 0.05];
    let center = [0.0, MOUTH_HEIGHT, front_z + 0.02];
    let sub = 4usize;
    // (outward axis, sign, uv cell [u0, u1]) for the five visible faces
    let faces: [(usize, f64, [f64; 2]); 5] = [
        (2, 1.0, [0.02, 0.48]),
        (1, 1.0, [0.52, 0.64]),
        (1, -1.0, [0.66, 0.78]),
        (0, -1.0, [0.80, 0.88]),
        (0, 1.0, [0.90, 0.98]),
    ];
    for (axis, sign, [u0, u1]) in faces {
        let (a1, a2) = match axis {
            0 => (2, 1),
            1 => (0, 2),
            _ => (0, 1),
        };
        let base = vertices.len();
        for r in 0..=sub {
            for c in 0..=sub {
                let (s, t) = (c as f64 / sub as f64, r as f64 / sub as f64);
                let mut p = center;
                p[axis] += sign * half[axis];
                p[a1] += (2.0 * s - 1.0) * half[a1];
                p[a2] -= (2.0 * t - 1.0) * half[a2];
                vertices.push(p);
                uv.push([u0 + (u1 - u0) * s, 0.80 + 0.18 * t]);
            }
        }
        let w = sub + 1;
        for r in 0..sub {
            for c in 0..sub {
                let v00 = base + r * w + c;
                let (v01, v10, v11) = (v00 + 1, v00 + w, v00 + w + 1);
                // wind so the face normal points outward
                let tri_a = [v00, v10, v11];
                let tri_b = [v00, v11, v01];
                let n = cross3(
                    sub3(vertices[tri_a[1]], vertices[tri_a[0]]),
                    sub3(vertices[tri_a[2]], vertices[tri_a[0]]),
                );
                if n[axis] * sign > 0.0 {
                    triangles.push(tri_a);
                    triangles.push(tri_b);
                } else {
                    triangles.push([v00, v11, v10]);
                    triangles.push([v00, v01, v11]);
                }
            }
        }
    }
    let rigid_vertices: Vec<usize> = (head_vertices..vertices.len()).collect();

    // Band-limited normal displacement fields, concentrated on the face side.
    let mut blendshapes = Vec::with_capacity(config.blendshapes);
    for _ in 0..config.blendshapes {
        let mut terms = Vec::new();
        for l in 0..3 {
            for m in 0..3 {
                terms.push((
                    l as f64,
                    m as f64,
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.0..2.0 * PI),
                ));
            }
        }
        let mut field: Vec<f64> = angles
            .iter()
            .map(|&(theta, phi)| {
                let face = (0.5 + 0.5 * phi.cos()).powi(2);
                face * terms
                    .iter()
                    .map(|&(l, m, a, p1, p2)| a * (l * 2.0 * theta + p1).cos() * (m * phi + p2).cos())
                    .sum::<f64>()
            })
            .collect();
        let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        field.iter_mut().for_each(|v| *v *= 0.06 / peak);
        let mut shape = vec![[0.0; 3]; vertices.len()];
        for (v, d) in field.iter().enumerate() {
            shape[v] = scale3(head_normal(vertices[v]), *d);
        }
        blendshapes.push(shape);
    }

    Ok(BlendshapeMesh {
        vertices_rest: vertices,
        triangles,
        uv,
        blendshapes,
        rigid_vertices,
        jaw_pivot: [0.0, -0.1, 0.2],
        jaw_axis: [1.0, 0.0, 0.0],
        expression_dim: config.expression_dim,
    })
}

/// Applies blendshape weights `psi[..K]`, then rotates the rigid set about the
/// jaw axis by `psi[K]`. Remaining entries are padding.
pub fn deform_mesh(mesh: &BlendshapeMesh, psi: &[f64]) -> Result<Vec<Vec3>> {
    if psi.len() != mesh.expression_dim {
        return Err(Error::Dimension(format!(
            "expression code has length {}, mesh expects {}",
            psi.len(),
            mesh.expression_dim
        )));
    }
    let mut out = mesh.vertices_rest.clone();
    for (w, shape) in psi.iter().zip(&mesh.blendshapes) {
        if *w == 0.0 {
            continue;
        }
        for (v, d) in out.iter_mut().zip(shape) {
            *v = add3(*v, scale3(*d, *w));
        }
    }
    let jaw = psi[mesh.jaw_channel()];
    if jaw != 0.0 {
        let rot = axis_angle(mesh.jaw_axis, jaw);
        for &v in &mesh.rigid_vertices {
            out[v] = add3(mesh.jaw_pivot, mat3_vec(&rot, sub3(out[v], mesh.jaw_pivot)));
        }
    }
    Ok(out)
}

/// Smooth expression trajectory; frame 0 is the rest pose.
pub fn expression_trajectory(config: &SceneConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a1e);
    let channels = config.blendshapes + 1;
    let waves: Vec<Vec<(f64, f64)>> = (0..channels)
        .map(|_| {
            (0..3)
                .map(|_| (rng.gen_range(0.6..1.0) / 3.0, rng.gen_range(0.015..0.09)))
                .collect()
        })
        .collect();
    (0..config.frames)
        .map(|t| {
            let mut psi = vec![0.0; config.expression_dim];
            for (c, terms) in waves.iter().enumerate() {
                let v: f64 = terms.iter().map(|&(a, w)| a * (w * t as f64).sin()).sum();
                psi[c] = if c == config.blendshapes {
                    v * config.jaw_range
                } else {
                    v * config.expression_amplitude
                };
            }
            psi
        })
        .collect()
}

/// The fixed front-facing camera used for synthetic datasets.
pub fn default_camera(resolution: usize) -> Result<Camera> {
    Camera::look_at(
        [0.0, -0.05, 3.2],
        [0.0, -0.05, 0.0],
        [0.0, 1.0, 0.0],
        1.4 * resolution as f64,
        resolution,
        resolution,
    )
}

/// Camera orbited about the vertical axis through the head center.
pub fn orbit_camera(resolution: usize, yaw_degrees: f64) -> Result<Camera> {
    let yaw = yaw_degrees.to_radians();
    let eye = [3.2 * yaw.sin(), -0.05, 3.2 * yaw.cos()];
    Camera::look_at(
        eye,
        [0.0, -0.05, 0.0],
        [0.0, 1.0, 0.0],
        1.4 * resolution as f64,
        resolution,
        resolution,
    )
}

/// Log-scale initialization and canonical rotation shared by the oracle
/// and the trainable field: flat discs sized to the local sample spacing.
pub fn surface_init(mesh: &BlendshapeMesh, binding: &AnchorBinding, n_target: usize) -> (Vec<Quat>, Vec<Vec3>) {
    let g = (n_target as f64).sqrt().floor().max(1.0);
    let mut rotations = Vec::with_capacity(binding.len());
    let mut scales = Vec::with_capacity(binding.len());
    for (a, frame) in binding.anchors.iter().zip(&binding.canonical_frames) {
        let [i, j, k] = mesh.triangles[a.triangle];
        let (p, q, r) = (mesh.vertices_rest[i], mesh.vertices_rest[j], mesh.vertices_rest[k]);
        let area3 = 0.5 * norm3(cross3(sub3(q, p), sub3(r, p)));
        let (u, v, w) = (mesh.uv[i], mesh.uv[j], mesh.uv[k]);
        let area_uv = 0.5 * ((v[0] - u[0]) * (w[1] - u[1]) - (w[0] - u[0]) * (v[1] - u[1])).abs();
        let spacing = (area3 / area_uv.max(1e-12)).sqrt() / g;
        let sigma = (0.6 * spacing).max(1e-4);
        rotations.push(rotmat_to_quat(frame));
        scales.push([sigma.ln(), sigma.ln(), (0.3 * sigma).ln()]);
    }
    (rotations, scales)
}

/// The fixed field used to synthesize ground truth.
#[derive(Debug, Clone)]
pub struct OracleField {
    pub binding: AnchorBinding,
    pub field: GaussianField,
    pub rigid: Vec<bool>,
    /// Per-primitive per-blendshape weights of the unexplained skin motion.
    pub detail_weights: Vec<Vec<f64>>,
    pub detail_gain: f64,
}

impl OracleField {
    pub fn generate(mesh: &BlendshapeMesh, config: &SceneConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x6f72_6163));
        let anchors = deform::init_anchors_uv(mesh, config.oracle_gaussians)?;
        let binding = AnchorBinding::new(mesh, anchors)?;
        let n = binding.len();
        let (base_rot, base_scale) = surface_init(mesh, &binding, config.oracle_gaussians);
        let rigid: Vec<bool> = binding
            .anchors
            .iter()
            .map(|a| mesh.is_rigid_triangle(a.triangle))
            .collect();

        let mut rotation = Vec::with_capacity(n * 4);
        let mut log_scale = Vec::with_capacity(n * 3);
        let mut opacity = Vec::with_capacity(n);
        let mut sh = Vec::with_capacity(n * 3);
        let mut detail_weights = Vec::with_capacity(n);
        let pattern: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(2.0..6.0),
                    rng.gen_range(2.0..6.0),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        for i in 0..n {
            let spin = rng.gen_range(-0.5..0.5f64);
            let local = [(spin / 2.0).cos(), 0.0, 0.0, (spin / 2.0).sin()];
            rotation.extend(quat_mul(base_rot[i], local));
            for k in 0..3 {
                log_scale.push(base_scale[i][k] + rng.gen_range(-0.2..0.2));
            }
            opacity.push(rng.gen_range(2.5..4.0));
            let uvp = {
                let a = &binding.anchors[i];
                let t = mesh.triangles[a.triangle];
                let mut p = [0.0; 2];
                for c in 0..3 {
                    for d in 0..2 {
                        p[d] += a.barycentric[c] * mesh.uv[t[c]][d];
                    }
                }
                p
            };
            let color: Vec3 = if rigid[i] {
                [0.93, 0.91, 0.84]
            } else {
                let base = [0.78, 0.58, 0.47];
                let mut c = base;
                for (ch, &(fu, fv, ph)) in pattern.iter().enumerate() {
                    c[ch] += 0.12 * (2.0 * PI * fu * uvp[0] + ph).sin() * (2.0 * PI * fv * uvp[1]).cos();
                }
                c
            };
            for ch in 0..3 {
                let jitter = rng.gen_range(-0.03..0.03);
                sh.push((color[ch] + jitter - 0.5) / SH_C0);
            }
            detail_weights.push((0..mesh.blendshapes.len()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
        let mu: Vec<f64> = binding.canonical_positions.iter().flatten().copied().collect();
        let field = GaussianField {
            mu_canonical: Tensor::new(&[n, 3], mu)?,
            rotation: Tensor::new(&[n, 4], rotation)?,
            log_scale: Tensor::new(&[n, 3], log_scale)?,
            opacity_logit: Tensor::new(&[n, 1], opacity)?,
            sh_coeffs: Tensor::new(&[n, 1, 3], sh)?,
        };
        Ok(OracleField {
            binding,
            field,
            rigid,
            detail_weights,
            detail_gain: config.oracle_detail,
        })
    }

    /// Poses the oracle for expression `psi`, including the unexplained
    /// detail motion when `detail_gain > 0`.
    pub fn pose(&self, mesh: &BlendshapeMesh, psi: &[f64]) -> Result<PosedGaussians> {
        let deformed = deform_mesh(mesh, psi)?;
        let rotation: Vec<Quat> = self
            .field
            .rotation
            .data()
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        let log_scale: Vec<Vec3> = self
            .field
            .log_scale
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let mut cache = PoseCache::new(mesh);
        let (mut posed, _) =
            deform::pose_gaussians(&self.binding, &rotation, &log_scale, mesh, &deformed, None, &mut cache)?;
        if self.detail_gain != 0.0 {
            let jaw = psi[mesh.jaw_channel()];
            let extra_jaw = axis_angle(mesh.jaw_axis, 0.5 * self.detail_gain * jaw);
            for (i, mu) in posed.mu.iter_mut().enumerate() {
                if self.rigid[i] {
                    *mu = add3(mesh.jaw_pivot, mat3_vec(&extra_jaw, sub3(*mu, mesh.jaw_pivot)));
                } else {
                    let a = &self.binding.anchors[i];
                    let t = mesh.triangles[a.triangle].map(|v| deformed[v]);
                    let frame = deform::triangle_frame(t[0], t[1], t[2]).unwrap_or(IDENTITY3);
                    let normal = [frame[0][2], frame[1][2], frame[2][2]];
                    let amount: f64 = self.detail_weights[i].iter().zip(psi).map(|(w, p)| w * p).sum();
                    *mu = add3(*mu, scale3(normal, 0.02 * self.detail_gain * amount));
                }
            }
        }
        Ok(posed)
    }

    pub fn render(&self, mesh: &BlendshapeMesh, psi: &[f64], cam: &Camera, background: Vec3) -> Result<ImageBuffer> {
        let posed = self.pose(mesh, psi)?;
        let opacity: Vec<f64> = self.field.opacity_logit.data().to_vec();
        let inputs = SplatInputs {
            posed: &posed,
            opacity_logit: &opacity,
            sh_coeffs: self.field.sh_coeffs.data(),
            sh_bases: 1,
        };
        let (image, _) = render::render(&inputs, cam, background, &RenderSettings::default())?;
        Ok(image)
    }
}

/// One training or test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// H×W×3 target.
    pub image: Vec<f64>,
    /// H×W, 1.0 where the frontmost surface is rigid.
    pub mask: Vec<f64>,
    pub psi: Vec<f64>,
    pub camera: Camera,
    pub test: bool,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub mesh: BlendshapeMesh,
    pub oracle: OracleField,
    pub frames: Vec<Frame>,
    pub background: Vec3,
}

impl Dataset {
    pub fn train_frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| !f.test)
    }

    pub fn test_frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| f.test)
    }
}

/// Rasterizes the mesh with a depth buffer and marks pixels whose frontmost
/// triangle belongs to the rigid set. Pixel centers are integer coordinates.
pub fn rigid_mask(mesh: &BlendshapeMesh, deformed: &[Vec3], cam: &Camera) -> Vec<f64> {
    let (w, h) = (cam.width, cam.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut owner = vec![usize::MAX; w * h];
    let view: Vec<Vec3> = deformed.iter().map(|&p| cam.to_view(p)).collect();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let v = tri.map(|i| view[i]);
        if v.iter().any(|p| p[2] <= geometry::NEAR_PLANE) {
            continue;
        }
        let s = v.map(|p| cam.project(p));
        let area = (s[1][0] - s[0][0]) * (s[2][1] - s[0][1]) - (s[2][0] - s[0][0]) * (s[1][1] - s[0][1]);
        if area.abs() < 1e-15 {
            continue;
        }
        let x0 = s.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let x1 = s.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).floor();
        let y0 = s.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let y1 = s.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).floor();
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let x1 = (x1 as usize).min(w - 1);
        let y1 = (y1 as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = [x as f64, y as f64];
                let e = |a: Vec2, b: Vec2| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
                let l0 = e(s[1], s[2]) / area;
                let l1 = e(s[2], s[0]) / area;
                let l2 = e(s[0], s[1]) / area;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                // perspective-correct depth: 1/z is affine in screen space
                let inv_z = l0 / v[0][2] + l1 / v[1][2] + l2 / v[2][2];
                let z = 1.0 / inv_z;
                let idx = y * w + x;
                if z < depth[idx] {
                    depth[idx] = z;
                    owner[idx] = t;
                }
            }
        }
    }
    owner
        .iter()
        .map(|&t| {
            if t != usize::MAX && mesh.is_rigid_triangle(t) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Renders `n_frames` ground-truth frames (cameras used round-robin); the last
/// ⌈0.2 n⌉ frames are flagged as test.
pub fn oracle_render_dataset(
    mesh: &BlendshapeMesh,
    oracle: &OracleField,
    config: &SceneConfig,
    cameras: &[Camera],
) -> Result<Vec<Frame>> {
    if cameras.is_empty() {
        return Err(Error::Config("at least one camera is required".into()));
    }
    let psis = expression_trajectory(config);
    let n = psis.len();
    let n_test = config.test_frames();
    let background = [0.0; 3];
    psis.into_par_iter()
        .enumerate()
        .map(|(i, psi)| {
            let camera = cameras[i % cameras.len()].clone();
            let image = oracle.render(mesh, &psi, &camera, background)?;
            let deformed = deform_mesh(mesh, &psi)?;
            let mask = rigid_mask(mesh, &deformed, &camera);
            Ok(Frame {
                index: i,
                image: image.rgb,
                mask,
                psi,
                camera,
                test: i >= n - n_test,
            })
        })
        .collect()
}

/// Regenerates the full dataset from its recipe.
pub fn build_dataset(config: &SceneConfig) -> Result<Dataset> {
    let mesh = make_head_scene(config)?;
    let oracle = OracleField::generate(&mesh, config)?;
    let camera = default_camera(config.resolution)?;
    let frames = oracle_render_dataset(&mesh, &oracle, config, &[camera])?;
    Ok(Dataset {
        mesh,
        oracle,
        frames,
        background: [0.0; 3],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            mesh_resolution: 6,
            frames: 10,
            resolution: 32,
            oracle_gaussians: 256,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn scene_is_deterministic() {
        let a = make_head_scene(&small()).unwrap();
        let b = make_head_scene(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rigid_rows_are_zero() {
        let m = make_head_scene(&small()).unwrap();
        assert!(!m.rigid_vertices.is_empty());
        for shape in &m.blendshapes {
            for &v in &m.rigid_vertices {
                assert_eq!(shape[v], [0.0; 3]);
            }
        }
        for t in &m.uv {
            assert!((0.0..=1.0).contains(&t[0]) && (0.0..=1.0).contains(&t[1]));
        }
    }

    #[test]
    fn deform_examples() {
        let m = make_head_scene(&small()).unwrap();
        let psi = vec![0.0; 16];
        assert_eq!(deform_mesh(&m, &psi).unwrap(), m.vertices_rest);
        let mut psi1 = psi.clone();
        psi1[1] = 0.5;
        let d = deform_mesh(&m, &psi1).unwrap();
        for (v, (r, b)) in d.iter().zip(m.vertices_rest.iter().zip(&m.blendshapes[1])) {
            for k in 0..3 {
                assert_eq!(v[k], r[k] + 0.5 * b[k]);
            }
        }
        assert!(matches!(deform_mesh(&m, &psi[..15]), Err(Error::Dimension(_))));
    }

    #[test]
    fn jaw_only_moves_rigid_set() {
        let cfg = SceneConfig {
            blendshapes: 0,
            ..small()
        };
        let m = make_head_scene(&cfg).unwrap();
        let mut psi = vec![0.0; 16];
        psi[0] = 0.25; // K = 0, so channel 0 is the jaw
        let d = deform_mesh(&m, &psi).unwrap();
        for v in 0..d.len() {
            if !m.is_rigid_vertex(v) {
                assert_eq!(d[v], m.vertices_rest[v]);
            }
        }
        let r = &m.rigid_vertices;
        for &a in r.iter().step_by(7) {
            for &b in r.iter().step_by(5) {
                let before = norm3(sub3(m.vertices_rest[a], m.vertices_rest[b]));
                let after = norm3(sub3(d[a], d[b]));
                assert!((before - after).abs() <= 1e-12 * before.max(1.0));
            }
        }
    }

    #[test]
    fn trajectory_starts_at_rest() {
        let psis = expression_trajectory(&small());
        assert_eq!(psis.len(), 10);
        assert!(psis[0].iter().all(|&v| v == 0.0));
        assert!(psis[3][..9].iter().any(|&v| v != 0.0));
        assert!(psis[3][9..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_resolution_is_rejected() {
        let cfg = SceneConfig {
            mesh_resolution: 1,
            ..small()
        };
        assert!(matches!(make_head_scene(&cfg), Err(Error::Config(_))));
    }
}

//! Surface-anchored Gaussians and the expression-conditioned offset field.
//!
//! Each Gaussian is bound to a mesh triangle. Its mesh-driven position is the
//! barycentric point on the deformed triangle; a network predicts residual
//! position, rotation and scale offsets from the Gaussian's canonical position
//! and the expression code. In cross-attention mode the canonical position
//! (after positional encoding) queries the tokenized expression code; in the
//! concat baseline the raw code is appended to every Gaussian's encoding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry;
use crate::linalg::*;
use crate::scene::BlendshapeMesh;

/// Width of the offset head: Δμ (3), Δr (4), Δs (3).
pub const OFFSET_WIDTH: usize = 10;
/// Triangles with area below this are treated as degenerate.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceAnchor {
    pub triangle: usize,
    pub barycentric: Vec3,
    pub normal_offset: f64,
}

impl SurfaceAnchor {
    pub fn validate(&self, triangle_count: usize) -> Result<()> {
        if self.triangle >= triangle_count {
            return Err(Error::Dimension(format!(
                "anchor triangle {} out of range ({triangle_count} triangles)",
                self.triangle
            )));
        }
        let b = self.barycentric;
        let sum = b[0] + b[1] + b[2];
        if b.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("invalid barycentric {b:?}")));
        }
        Ok(())
    }
}

/// Posed per-primitive geometry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PosedGaussians {
    pub mu: Vec<Vec3>,
    /// Unit quaternions.
    pub rotation: Vec<Quat>,
    pub log_scale: Vec<Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    CrossAttention,
    ConcatBaseline,
}

impl ConditioningMode {
    pub fn name(self) -> &'static str {
        match self {
            ConditioningMode::CrossAttention => "cross_attention",
            ConditioningMode::ConcatBaseline => "concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross_attention" => Ok(ConditioningMode::CrossAttention),
            "concat" | "concat_baseline" => Ok(ConditioningMode::ConcatBaseline),
            other => Err(Error::Config(format!(
                "unknown conditioning mode {other:?} (expected cross_attention or concat)"
            ))),
        }
    }
}

/// `[x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{L−1}πx), cos(2^{L−1}πx)]` per
/// coordinate, coordinates concatenated.
pub fn positional_encoding(p: Vec3, frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pe_width(frequencies));
    for &x in &p {
        out.push(x);
        for k in 0..frequencies {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * x;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

pub fn pe_width(frequencies: usize) -> usize {
    3 * (1 + 2 * frequencies)
}

/// Splits `psi` into `tokens` rows of consecutive entries.
pub fn tokenize_expression(psi: &[f64], tokens: usize) -> Result<Tensor> {
    if tokens == 0 || !psi.len().is_multiple_of(tokens) {
        return Err(Error::Config(format!(
            "expression code of length {} does not split into {tokens} tokens",
            psi.len()
        )));
    }
    Tensor::new(&[tokens, psi.len() / tokens], psi.to_vec())
}

/// Architecture of the offset network.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub mode: ConditioningMode,
    pub expression_dim: usize,
    pub tokens: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub pe_frequencies: usize,
    pub hidden: Vec<usize>,
}

impl FusionConfig {
    pub fn d_tok(&self) -> usize {
        self.expression_dim / self.tokens
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || !self.expression_dim.is_multiple_of(self.tokens) {
            return Err(Error::Config(format!(
                "expression dimension {} is not divisible by token count {}",
                self.expression_dim, self.tokens
            )));
        }
        if self.d_k == 0 || self.d_v == 0 {
            return Err(Error::Config("attention widths must be nonzero".into()));
        }
        Ok(())
    }

    fn mlp_input(&self) -> usize {
        let cond = match self.mode {
            ConditioningMode::CrossAttention => self.d_v,
            ConditioningMode::ConcatBaseline => self.expression_dim,
        };
        cond + pe_width(self.pe_frequencies)
    }
}

/// Parameter handles of the fusion module and offset MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub config: FusionConfig,
    /// Present only in cross-attention mode.
    pub w_q: Option<ParamId>,
    pub w_k: Option<ParamId>,
    pub w_v: Option<ParamId>,
    /// (weight, bias) per layer; the last layer is the offset head.
    pub mlp: Vec<(ParamId, ParamId)>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl FusionParams {
    /// Registers freshly initialized parameters in `store`. Projections use
    /// Glorot-uniform, hidden layers He-uniform, and the output head is zero.
    pub fn init(config: FusionConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d_pe = pe_width(config.pe_frequencies);
        let d_tok = config.d_tok();
        let (w_q, w_k, w_v) = match config.mode {
            ConditioningMode::CrossAttention => {
                let glorot = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
                (
                    Some(store.add(
                        "fusion.w_q",
                        uniform(rng, &[d_pe, config.d_k], glorot(d_pe, config.d_k)),
                    )),
                    Some(store.add(
                        "fusion.w_k",
                        uniform(rng, &[d_tok, config.d_k], glorot(d_tok, config.d_k)),
                    )),
                    Some(store.add(
                        "fusion.w_v",
                        uniform(rng, &[d_tok, config.d_v], glorot(d_tok, config.d_v)),
                    )),
                )
            }
            ConditioningMode::ConcatBaseline => (None, None, None),
        };
        let mut widths = vec![config.mlp_input()];
        widths.extend(&config.hidden);
        widths.push(OFFSET_WIDTH);
        let layers = widths.len() - 1;
        let mut mlp = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let w = if l + 1 == layers {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                uniform(rng, &[fan_in, fan_out], (6.0 / fan_in as f64).sqrt())
            };
            let wid = store.add(format!("mlp.{l}.weight"), w);
            let bid = store.add(format!("mlp.{l}.bias"), Tensor::zeros(&[1, fan_out]));
            mlp.push((wid, bid));
        }
        Ok(FusionParams {
            config,
            w_q,
            w_k,
            w_v,
            mlp,
        })
    }

    /// Looks the parameter handles up by name in an existing store.
    pub fn bind(config: FusionConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let find = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
        };
        let (w_q, w_k, w_v) = match config.mode {
            ConditioningMode::CrossAttention => (
                Some(find("fusion.w_q")?),
                Some(find("fusion.w_k")?),
                Some(find("fusion.w_v")?),
            ),
            ConditioningMode::ConcatBaseline => (None, None, None),
        };
        let layers = config.hidden.len() + 1;
        let mut mlp = Vec::with_capacity(layers);
        for l in 0..layers {
            mlp.push((find(&format!("mlp.{l}.weight"))?, find(&format!("mlp.{l}.bias"))?));
        }
        Ok(FusionParams {
            config,
            w_q,
            w_k,
            w_v,
            mlp,
        })
    }

    /// Every parameter handle owned by the network.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = [self.w_q, self.w_k, self.w_v].into_iter().flatten().collect();
        for (w, b) in &self.mlp {
            ids.push(*w);
            ids.push(*b);
        }
        ids
    }
}

/// Graph nodes produced by [`cross_attention`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// N×L_tok attention weights.
    pub weights: Var,
    /// N×d_v context features.
    pub context: Var,
}

/// Single-head attention of per-Gaussian encodings over expression tokens.
pub fn cross_attention(
    graph: &mut Graph,
    store: &ParamStore,
    pe: Var,
    tokens: Var,
    params: &FusionParams,
) -> Result<AttentionOutput> {
    let (Some(wq), Some(wk), Some(wv)) = (params.w_q, params.w_k, params.w_v) else {
        return Err(Error::Contract(
            "cross_attention called on concat-baseline parameters".into(),
        ));
    };
    let wq = graph.param(store, wq)?;
    let wk = graph.param(store, wk)?;
    let wv = graph.param(store, wv)?;
    let q = graph.matmul(pe, wq)?;
    let k = graph.matmul(tokens, wk)?;
    let v = graph.matmul(tokens, wv)?;
    let kt = graph.transpose(k)?;
    let scores = graph.matmul(q, kt)?;
    let scaled = graph.scale(scores, 1.0 / (params.config.d_k as f64).sqrt())?;
    let weights = graph.softmax(scaled, 1)?;
    let context = graph.matmul(weights, v)?;
    Ok(AttentionOutput { weights, context })
}

/// Offset MLP on `concat(conditioning, pe)`; returns an N×10 node.
pub fn predict_offsets(
    graph: &mut Graph,
    store: &ParamStore,
    conditioning: Var,
    pe: Var,
    params: &FusionParams,
) -> Result<Var> {
    let n = graph.value(pe).dims2()?.0;
    let mut h = graph.concat_cols(&[conditioning, pe])?;
    let layers = params.mlp.len();
    for (l, &(w, b)) in params.mlp.iter().enumerate() {
        let w = graph.param(store, w)?;
        let b = graph.param(store, b)?;
        let hw = graph.matmul(h, w)?;
        let bias = graph.repeat_rows(b, n)?;
        h = graph.add(hw, bias)?;
        if l + 1 < layers {
            h = graph.relu(h)?;
        }
    }
    Ok(h)
}

/// Full conditioning path for one expression code: returns the N×10 offset
/// node and, in cross-attention mode, the attention weights.
pub fn offsets_for_expression(
    graph: &mut Graph,
    store: &ParamStore,
    pe: &Tensor,
    psi: &[f64],
    params: &FusionParams,
) -> Result<(Var, Option<Var>)> {
    let cfg = &params.config;
    if psi.len() != cfg.expression_dim {
        return Err(Error::Dimension(format!(
            "expression code has length {}, expected {}",
            psi.len(),
            cfg.expression_dim
        )));
    }
    let n = pe.dims2()?.0;
    let pe = graph.constant(pe.clone())?;
    match cfg.mode {
        ConditioningMode::CrossAttention => {
            let tokens = graph.constant(tokenize_expression(psi, cfg.tokens)?)?;
            let att = cross_attention(graph, store, pe, tokens, params)?;
            let out = predict_offsets(graph, store, att.context, pe, params)?;
            Ok((out, Some(att.weights)))
        }
        ConditioningMode::ConcatBaseline => {
            let row = graph.constant(Tensor::new(&[1, psi.len()], psi.to_vec())?)?;
            let rep = graph.repeat_rows(row, n)?;
            let out = predict_offsets(graph, store, rep, pe, params)?;
            Ok((out, None))
        }
    }
}

/// Orthonormal frame of a triangle: columns are the first edge direction,
/// the in-plane perpendicular and the face normal. `None` if degenerate.
pub fn triangle_frame(a: Vec3, b: Vec3, c: Vec3) -> Option<Mat3> {
    let e1 = sub3(b, a);
    let n = cross3(e1, sub3(c, a));
    if 0.5 * norm3(n) < MIN_TRIANGLE_AREA {
        return None;
    }
    let t = normalize3(e1)?;
    let n = normalize3(n)?;
    let u = cross3(n, t);
    Some([[t[0], u[0], n[0]], [t[1], u[1], n[1]], [t[2], u[2], n[2]]])
}

/// Last valid vertex positions per triangle; degenerate triangles fall back
/// to these so their primitives stay frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseCache {
    pub last_valid: Vec<[Vec3; 3]>,
    pub degenerate_events: u64,
}

impl PoseCache {
    pub fn new(mesh: &BlendshapeMesh) -> Self {
        PoseCache {
            last_valid: mesh
                .triangles
                .iter()
                .map(|t| t.map(|v| mesh.vertices_rest[v]))
                .collect(),
            degenerate_events: 0,
        }
    }
}

/// Values kept from [`pose_gaussians`] for its backward pass.
#[derive(Debug, Clone)]
pub struct PoseSaved {
    frames: Vec<Mat3>,
    frame_quats: Vec<Quat>,
    /// `frame_quat ⊗ (r + Δr)` before normalization.
    composed: Vec<Quat>,
}

/// Per-anchor canonical frames and positions on the rest mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBinding {
    pub anchors: Vec<SurfaceAnchor>,
    pub canonical_frames: Vec<Mat3>,
    pub canonical_positions: Vec<Vec3>,
}

impl AnchorBinding {
    pub fn new(mesh: &BlendshapeMesh, anchors: Vec<SurfaceAnchor>) -> Result<Self> {
        let mut frames = Vec::with_capacity(anchors.len());
        let mut positions = Vec::with_capacity(anchors.len());
        for a in &anchors {
            a.validate(mesh.triangles.len())?;
            let [i, j, k] = mesh.triangles[a.triangle];
            let (p, q, r) = (mesh.vertices_rest[i], mesh.vertices_rest[j], mesh.vertices_rest[k]);
            let frame = triangle_frame(p, q, r)
                .ok_or_else(|| Error::Degenerate(format!("anchor on degenerate rest triangle {}", a.triangle)))?;
            positions.push(anchor_point(a, [p, q, r], &frame));
            frames.push(frame);
        }
        Ok(AnchorBinding {
            anchors,
            canonical_frames: frames,
            canonical_positions: positions,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn anchor_point(a: &SurfaceAnchor, tri: [Vec3; 3], frame: &Mat3) -> Vec3 {
    let b = a.barycentric;
    let normal = [frame[0][2], frame[1][2], frame[2][2]];
    let mut p = [0.0; 3];
    for k in 0..3 {
        p[k] = b[0] * tri[0][k] + b[1] * tri[1][k] + b[2] * tri[2][k] + a.normal_offset * normal[k];
    }
    p
}

/// Composes mesh-driven placement with learned offsets.
///
/// `offsets` is N×10 (Δμ in the triangle tangent frame, Δr added to the raw
/// quaternion, Δs added in log space); `None` poses the bare mesh-anchored
/// field.
pub fn pose_gaussians(
    binding: &AnchorBinding,
    rotation: &[Quat],
    log_scale: &[Vec3],
    mesh: &BlendshapeMesh,
    deformed: &[Vec3],
    offsets: Option<&Tensor>,
    cache: &mut PoseCache,
) -> Result<(PosedGaussians, PoseSaved)> {
    let n = binding.len();
    if rotation.len() != n || log_scale.len() != n {
        return Err(Error::Dimension(format!(
            "field has {} rotations / {} scales for {n} anchors",
            rotation.len(),
            log_scale.len()
        )));
    }
    if deformed.len() != mesh.vertices_rest.len() {
        return Err(Error::Dimension(format!(
            "deformed mesh has {} vertices, topology has {}",
            deformed.len(),
            mesh.vertices_rest.len()
        )));
    }
    if let Some(o) = offsets {
        if o.shape() != [n, OFFSET_WIDTH] {
            return Err(Error::Dimension(format!(
                "offsets have shape {:?}, expected [{n}, {OFFSET_WIDTH}]",
                o.shape()
            )));
        }
    }

    // Frames per used triangle, refreshing the cache.
    let mut tri_frames: Vec<Option<(Mat3, Quat)>> = vec![None; mesh.triangles.len()];
    let mut posed = PosedGaussians {
        mu: Vec::with_capacity(n),
        rotation: Vec::with_capacity(n),
        log_scale: Vec::with_capacity(n),
    };
    let mut saved = PoseSaved {
        frames: Vec::with_capacity(n),
        frame_quats: Vec::with_capacity(n),
        composed: Vec::with_capacity(n),
    };
    for (i, a) in binding.anchors.iter().enumerate() {
        let t = a.triangle;
        let (frame, fq) = match tri_frames[t] {
            Some(v) => v,
            None => {
                let idx = mesh.triangles[t];
                let mut verts = idx.map(|v| deformed[v]);
                let frame = match triangle_frame(verts[0], verts[1], verts[2]) {
                    Some(f) => {
                        cache.last_valid[t] = verts;
                        f
                    }
                    None => {
                        cache.degenerate_events += 1;
                        verts = cache.last_valid[t];
                        triangle_frame(verts[0], verts[1], verts[2])
                            .ok_or_else(|| Error::Degenerate(format!("triangle {t} has no valid pose")))?
                    }
                };
                let delta = mat3_mul(&frame, &transpose3(&binding.canonical_frames[i]));
                let v = (frame, rotmat_to_quat(&delta));
                tri_frames[t] = Some(v);
                v
            }
        };
        let tri = cache.last_valid[t];
        let base = anchor_point(a, tri, &frame);
        let (dmu, dr, ds) = match offsets {
            Some(o) => {
                let row = o.row(i);
                (
                    [row[0], row[1], row[2]],
                    [row[3], row[4], row[5], row[6]],
                    [row[7], row[8], row[9]],
                )
            }
            None => ([0.0; 3], [0.0; 4], [0.0; 3]),
        };
        let mu = if offsets.is_some() {
            add3(base, mat3_vec(&frame, dmu))
        } else {
            base
        };
        let raw = if offsets.is_some() {
            let r = rotation[i];
            [r[0] + dr[0], r[1] + dr[1], r[2] + dr[2], r[3] + dr[3]]
        } else {
            rotation[i]
        };
        let composed = quat_mul(fq, raw);
        let norm = quat_norm(composed);
        if !(norm > 0.0) {
            return Err(Error::Degenerate(format!("posed rotation of primitive {i} vanished")));
        }
        let s = if offsets.is_some() {
            add3(log_scale[i], ds)
        } else {
            log_scale[i]
        };
        posed.mu.push(mu);
        posed.rotation.push(composed.map(|v| v / norm));
        posed.log_scale.push(s);
        saved.frames.push(frame);
        saved.frame_quats.push(fq);
        saved.composed.push(composed);
    }
    Ok((posed, saved))
}

/// Gradients flowing out of [`pose_gaussians`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGrads {
    /// N×10, same layout as the offsets.
    pub offsets: Tensor,
    pub rotation: Vec<Quat>,
    pub log_scale: Vec<Vec3>,
}

pub fn pose_gaussians_backward(
    saved: &PoseSaved,
    d_mu: &[Vec3],
    d_rotation: &[Quat],
    d_log_scale: &[Vec3],
) -> Result<PoseGrads> {
    let n = saved.frames.len();
    if d_mu.len() != n || d_rotation.len() != n || d_log_scale.len() != n {
        return Err(Error::Contract("pose gradient length mismatch".into()));
    }
    let mut offsets = vec![0.0; n * OFFSET_WIDTH];
    let mut rotation = Vec::with_capacity(n);
    for i in 0..n {
        let dmu = mat3t_vec(&saved.frames[i], d_mu[i]);
        let dcomposed = geometry::normalize_vjp(saved.composed[i], d_rotation[i]);
        let draw = quat_mul_vjp_rhs(saved.frame_quats[i], dcomposed);
        let row = &mut offsets[i * OFFSET_WIDTH..(i + 1) * OFFSET_WIDTH];
        row[..3].copy_from_slice(&dmu);
        row[3..7].copy_from_slice(&draw);
        row[7..].copy_from_slice(&d_log_scale[i]);
        rotation.push(draw);
    }
    Ok(PoseGrads {
        offsets: Tensor::new(&[n, OFFSET_WIDTH], offsets)?,
        rotation,
        log_scale: d_log_scale.to_vec(),
    })
}

fn uv_barycentric(p: Vec2, a: Vec2, b: Vec2, c: Vec2) -> Option<Vec3> {
    let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    if det.abs() < 1e-18 {
        return None;
    }
    let l0 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / det;
    let l1 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / det;
    let l2 = 1.0 - l0 - l1;
    Some([l0, l1, l2])
}

/// Samples a regular ⌊√N⌋×⌊√N⌋ grid of cell centers in UV space and binds
/// each sample that lands on a triangle's UV footprint. Samples on shared
/// edges go to the lowest triangle index; samples outside the atlas are
/// dropped.
pub fn init_anchors_uv(mesh: &BlendshapeMesh, n_target: usize) -> Result<Vec<SurfaceAnchor>> {
    if mesh.triangles.is_empty() || mesh.uv.is_empty() {
        return Err(Error::Config("mesh has an empty UV atlas".into()));
    }
    let g = (n_target as f64).sqrt().floor() as usize;
    if g == 0 {
        return Ok(Vec::new());
    }
    let boxes: Vec<[f64; 4]> = mesh
        .triangles
        .iter()
        .map(|t| {
            let uv = t.map(|v| mesh.uv[v]);
            [
                uv[0][0].min(uv[1][0]).min(uv[2][0]),
                uv[0][0].max(uv[1][0]).max(uv[2][0]),
                uv[0][1].min(uv[1][1]).min(uv[2][1]),
                uv[0][1].max(uv[1][1]).max(uv[2][1]),
            ]
        })
        .collect();
    const EDGE_TOL: f64 = 1e-12;
    let mut anchors = Vec::new();
    for j in 0..g {
        for i in 0..g {
            let p = [(i as f64 + 0.5) / g as f64, (j as f64 + 0.5) / g as f64];
            for (t, tri) in mesh.triangles.iter().enumerate() {
                let bb = boxes[t];
                if p[0] < bb[0] - EDGE_TOL
                    || p[0] > bb[1] + EDGE_TOL
                    || p[1] < bb[2] - EDGE_TOL
                    || p[1] > bb[3] + EDGE_TOL
                {
                    continue;
                }
                let [a, b, c] = tri.map(|v| mesh.uv[v]);
                let Some(l) = uv_barycentric(p, a, b, c) else { continue };
                if l.iter().all(|&v| v >= -EDGE_TOL) {
                    let l = l.map(|v| v.max(0.0));
                    let s = l[0] + l[1] + l[2];
                    anchors.push(SurfaceAnchor {
                        triangle: t,
                        barycentric: l.map(|v| v / s),
                        normal_offset: 0.0,
                    });
                    break;
                }
            }
        }
    }
    Ok(anchors)
}

//! The trainable avatar: surface-anchored Gaussians plus the offset network,
//! with an end-to-end forward pass and its gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::deform::{
    self, AnchorBinding, ConditioningMode, FusionConfig, FusionParams, PoseCache, PoseSaved, PosedGaussians,
    SurfaceAnchor,
};
use crate::error::{Error, Result};
use crate::geometry::{self, Camera, GaussianField};
use crate::linalg::{Quat, Vec3};
use crate::render::{self, ImageBuffer, RenderSettings, RenderState, SplatInputs};
use crate::scene::{self, BlendshapeMesh};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Target Gaussian count; the UV grid yields at most this many.
    pub gaussians: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub pe_frequencies: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// 0 or 1.
    pub sh_degree: usize,
    pub mode: ConditioningMode,
    pub seed: u64,
    pub initial_opacity: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            gaussians: 1024,
            d_k: 32,
            d_v: 32,
            pe_frequencies: 6,
            hidden_width: 128,
            hidden_layers: 2,
            sh_degree: 0,
            mode: ConditioningMode::CrossAttention,
            seed: 0,
            initial_opacity: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > 1 {
            return Err(Error::Config(format!(
                "model.sh_degree must be 0 or 1, got {}",
                self.sh_degree
            )));
        }
        if !(self.initial_opacity > 0.0 && self.initial_opacity < 1.0) {
            return Err(Error::Config("model.initial_opacity must be in (0, 1)".into()));
        }
        if self.gaussians == 0 {
            return Err(Error::Config("model.gaussians must be positive".into()));
        }
        Ok(())
    }

    pub fn sh_bases(&self) -> usize {
        (self.sh_degree + 1) * (self.sh_degree + 1)
    }

    pub fn fusion(&self, expression_dim: usize, tokens: usize) -> FusionConfig {
        FusionConfig {
            mode: self.mode,
            expression_dim,
            tokens,
            d_k: self.d_k,
            d_v: self.d_v,
            pe_frequencies: self.pe_frequencies,
            hidden: vec![self.hidden_width; self.hidden_layers],
        }
    }
}

/// Handles of the per-Gaussian appearance parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianIds {
    pub rotation: ParamId,
    pub log_scale: ParamId,
    pub opacity_logit: ParamId,
    pub sh_coeffs: ParamId,
}

impl GaussianIds {
    pub const NAMES: [&'static str; 4] = [
        "gaussian.rotation",
        "gaussian.log_scale",
        "gaussian.opacity_logit",
        "gaussian.sh_coeffs",
    ];

    fn bind(store: &ParamStore) -> Result<Self> {
        let find = |n: &str| {
            store
                .find(n)
                .ok_or_else(|| Error::Format(format!("missing parameter {n}")))
        };
        Ok(GaussianIds {
            rotation: find(Self::NAMES[0])?,
            log_scale: find(Self::NAMES[1])?,
            opacity_logit: find(Self::NAMES[2])?,
            sh_coeffs: find(Self::NAMES[3])?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub binding: AnchorBinding,
    /// N×d_pe encoding of the box-normalized canonical positions.
    pub pe: Tensor,
    pub store: ParamStore,
    pub fusion: FusionParams,
    pub gaussian: GaussianIds,
}

/// Positional encodings of canonical positions normalized to [−1, 1] per
/// axis by the rest-mesh bounding box.
pub fn encode_positions(mesh: &BlendshapeMesh, positions: &[Vec3], frequencies: usize) -> Result<Tensor> {
    let (lo, hi) = mesh.bounds();
    let width = deform::pe_width(frequencies);
    let mut data = Vec::with_capacity(positions.len() * width);
    for p in positions {
        let mut q = [0.0; 3];
        for k in 0..3 {
            let span = hi[k] - lo[k];
            q[k] = if span > 0.0 {
                2.0 * (p[k] - lo[k]) / span - 1.0
            } else {
                0.0
            };
        }
        data.extend(deform::positional_encoding(q, frequencies));
    }
    Tensor::new(&[positions.len(), width], data)
}

impl Model {
    /// UV-sampled anchors with surface-aligned initial shapes.
    pub fn new(mesh: &BlendshapeMesh, config: &ModelConfig, tokens: usize) -> Result<(Self, ChaCha8Rng)> {
        config.validate()?;
        let anchors = deform::init_anchors_uv(mesh, config.gaussians)?;
        if anchors.is_empty() {
            return Err(Error::Config("UV sampling produced no anchors".into()));
        }
        Self::with_anchors(mesh, config, tokens, anchors)
    }

    pub fn with_anchors(
        mesh: &BlendshapeMesh,
        config: &ModelConfig,
        tokens: usize,
        anchors: Vec<SurfaceAnchor>,
    ) -> Result<(Self, ChaCha8Rng)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let binding = AnchorBinding::new(mesh, anchors)?;
        let n = binding.len();
        let (rot, scale) = scene::surface_init(mesh, &binding, config.gaussians);
        let mut store = ParamStore::new();
        let gaussian = GaussianIds {
            rotation: store.add(
                GaussianIds::NAMES[0],
                Tensor::new(&[n, 4], rot.into_iter().flatten().collect())?,
            ),
            log_scale: store.add(
                GaussianIds::NAMES[1],
                Tensor::new(&[n, 3], scale.into_iter().flatten().collect())?,
            ),
            opacity_logit: store.add(
                GaussianIds::NAMES[2],
                Tensor::full(&[n, 1], geometry::logit(config.initial_opacity)),
            ),
            sh_coeffs: store.add(GaussianIds::NAMES[3], Tensor::zeros(&[n, config.sh_bases() * 3])),
        };
        let fusion = FusionParams::init(config.fusion(mesh.expression_dim, tokens), &mut store, &mut rng)?;
        let pe = encode_positions(mesh, &binding.canonical_positions, config.pe_frequencies)?;
        Ok((
            Model {
                config: config.clone(),
                binding,
                pe,
                store,
                fusion,
                gaussian,
            },
            rng,
        ))
    }

    /// Rebuilds a model around an existing parameter store.
    pub fn from_store(
        mesh: &BlendshapeMesh,
        config: &ModelConfig,
        tokens: usize,
        anchors: Vec<SurfaceAnchor>,
        store: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let binding = AnchorBinding::new(mesh, anchors)?;
        let gaussian = GaussianIds::bind(&store)?;
        let n = binding.len();
        let expect = [
            (gaussian.rotation, vec![n, 4]),
            (gaussian.log_scale, vec![n, 3]),
            (gaussian.opacity_logit, vec![n, 1]),
            (gaussian.sh_coeffs, vec![n, config.sh_bases() * 3]),
        ];
        for (id, shape) in expect {
            if store.value(id).shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    store.get(id).name,
                    store.value(id).shape(),
                    shape
                )));
            }
        }
        let fusion = FusionParams::bind(config.fusion(mesh.expression_dim, tokens), &store)?;
        let pe = encode_positions(mesh, &binding.canonical_positions, config.pe_frequencies)?;
        Ok(Model {
            config: config.clone(),
            binding,
            pe,
            store,
            fusion,
            gaussian,
        })
    }

    pub fn count(&self) -> usize {
        self.binding.len()
    }

    pub fn sh_bases(&self) -> usize {
        self.config.sh_bases()
    }

    fn rotations(&self) -> Vec<Quat> {
        self.store
            .value(self.gaussian.rotation)
            .data()
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect()
    }

    fn log_scales(&self) -> Vec<Vec3> {
        self.store
            .value(self.gaussian.log_scale)
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }

    /// Current parameters as a plain field (canonical positions).
    pub fn field(&self) -> Result<GaussianField> {
        let n = self.count();
        let field = GaussianField {
            mu_canonical: Tensor::new(
                &[n, 3],
                self.binding.canonical_positions.iter().flatten().copied().collect(),
            )?,
            rotation: self.store.value(self.gaussian.rotation).clone(),
            log_scale: self.store.value(self.gaussian.log_scale).clone(),
            opacity_logit: self.store.value(self.gaussian.opacity_logit).clone(),
            sh_coeffs: self
                .store
                .value(self.gaussian.sh_coeffs)
                .clone()
                .reshape(&[n, self.sh_bases(), 3])?,
        };
        field.validate()?;
        Ok(field)
    }

    fn inputs<'a>(&'a self, posed: &'a PosedGaussians) -> SplatInputs<'a> {
        SplatInputs {
            posed,
            opacity_logit: self.store.value(self.gaussian.opacity_logit).data(),
            sh_coeffs: self.store.value(self.gaussian.sh_coeffs).data(),
            sh_bases: self.sh_bases(),
        }
    }

    /// Renders the mesh-anchored field without any learned offsets.
    pub fn render_anchored(
        &self,
        mesh: &BlendshapeMesh,
        psi: &[f64],
        camera: &Camera,
        background: Vec3,
        cache: &mut PoseCache,
    ) -> Result<ImageBuffer> {
        let deformed = scene::deform_mesh(mesh, psi)?;
        let (posed, _) = deform::pose_gaussians(
            &self.binding,
            &self.rotations(),
            &self.log_scales(),
            mesh,
            &deformed,
            None,
            cache,
        )?;
        Ok(render::render(&self.inputs(&posed), camera, background, &RenderSettings::default())?.0)
    }

    /// Full forward pass for one expression and camera.
    pub fn forward(
        &self,
        mesh: &BlendshapeMesh,
        psi: &[f64],
        camera: &Camera,
        background: Vec3,
        cache: &mut PoseCache,
    ) -> Result<Forward> {
        let deformed = scene::deform_mesh(mesh, psi)?;
        let mut graph = Graph::new();
        let (offsets, attention) =
            deform::offsets_for_expression(&mut graph, &self.store, &self.pe, psi, &self.fusion)?;
        let (posed, pose_saved) = deform::pose_gaussians(
            &self.binding,
            &self.rotations(),
            &self.log_scales(),
            mesh,
            &deformed,
            Some(graph.value(offsets)),
            cache,
        )?;
        let (image, render_state) =
            render::render(&self.inputs(&posed), camera, background, &RenderSettings::default())?;
        Ok(Forward {
            image,
            graph,
            offsets,
            attention,
            posed,
            pose_saved,
            render_state,
        })
    }

    /// Accumulates `d(Σ grad_rgb · image)/dθ` into the parameter gradients.
    pub fn backward(&mut self, fwd: &Forward, grad_rgb: &[f64]) -> Result<()> {
        let sg = render::render_backward(&self.inputs(&fwd.posed), &fwd.render_state, grad_rgb)?;
        let pg = deform::pose_gaussians_backward(&fwd.pose_saved, &sg.mu, &sg.rotation, &sg.log_scale)?;
        let add = |store: &mut ParamStore, id: ParamId, values: &mut dyn Iterator<Item = f64>| {
            for (g, v) in store.get_mut(id).grad.data_mut().iter_mut().zip(values) {
                *g += v;
            }
        };
        add(
            &mut self.store,
            self.gaussian.rotation,
            &mut pg.rotation.iter().flatten().copied(),
        );
        add(
            &mut self.store,
            self.gaussian.log_scale,
            &mut pg.log_scale.iter().flatten().copied(),
        );
        add(
            &mut self.store,
            self.gaussian.opacity_logit,
            &mut sg.opacity_logit.iter().copied(),
        );
        add(
            &mut self.store,
            self.gaussian.sh_coeffs,
            &mut sg.sh_coeffs.iter().copied(),
        );
        fwd.graph.backward_seeded(fwd.offsets, pg.offsets, &mut self.store)
    }

    /// Replaces the zero-initialized offset head with small random values.
    pub fn randomize_head(&mut self, rng: &mut ChaCha8Rng, bound: f64) {
        if let Some(&(w, b)) = self.fusion.mlp.last() {
            for id in [w, b] {
                for v in self.store.get_mut(id).value.data_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
            }
        }
    }
}

/// Saved forward pass of [`Model::forward`].
pub struct Forward {
    pub image: ImageBuffer,
    pub graph: Graph,
    pub offsets: Var,
    pub attention: Option<Var>,
    pub posed: PosedGaussians,
    pose_saved: PoseSaved,
    render_state: RenderState,
}

impl Forward {
    pub fn blend_structure(&self) -> Vec<u32> {
        crate::render::blend_structure(&self.render_state)
    }

    pub fn offsets(&self) -> &Tensor {
        self.graph.value(self.offsets)
    }

    pub fn attention_weights(&self) -> Option<&Tensor> {
        self.attention.map(|a| self.graph.value(a))
    }
}

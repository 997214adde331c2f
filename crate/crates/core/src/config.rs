//! Run configuration: flat `section.key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::deform::ConditioningMode;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::scene::SceneConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr_fusion: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: u64,
    pub eval_every: u64,
    /// Training frames scored at each evaluation.
    pub train_eval_frames: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_fusion: 1e-4,
            lr_opacity: 0.05,
            lr_sh: 0.0025,
            lr_rotation: 0.001,
            lr_scale: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations: 2000,
            eval_every: 500,
            train_eval_frames: 8,
        }
    }
}

impl OptimConfig {
    /// Learning rate for a parameter by name.
    pub fn lr_for(&self, name: &str) -> f64 {
        match name {
            "gaussian.opacity_logit" => self.lr_opacity,
            "gaussian.sh_coeffs" => self.lr_sh,
            "gaussian.rotation" => self.lr_rotation,
            "gaussian.log_scale" => self.lr_scale,
            _ => self.lr_fusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoConfig {
    pub output_dir: PathBuf,
    /// 0 disables periodic checkpoints (a final one is always written).
    pub checkpoint_every: u64,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            output_dir: PathBuf::from("run"),
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub io: IoConfig,
}

/// Every accepted key with a short provenance note.
pub const KEYS: &[(&str, &str)] = &[
    ("scene.seed", "dataset seed"),
    (
        "scene.resolution",
        "square image side in pixels; desk-scale stand-in for 512",
    ),
    ("scene.mesh_resolution", "head mesh latitude segments"),
    ("scene.blendshapes", "number of blendshape channels K"),
    (
        "scene.expression_dim",
        "expression code length D = K weights + jaw + padding",
    ),
    ("scene.tokens", "expression tokens for attention (D must be divisible)"),
    ("scene.rigid_extent", "half width of the rigid mouth box"),
    ("scene.frames", "frames in the dataset; the last 20% are held out"),
    (
        "scene.expression_amplitude",
        "peak blendshape weight along trajectories",
    ),
    ("scene.jaw_range", "peak jaw angle in radians"),
    (
        "scene.oracle_detail",
        "expression-dependent oracle motion not explained by the mesh (0 = exactly recoverable)",
    ),
    ("scene.oracle_gaussians", "oracle field size target"),
    ("model.gaussians", "trainable Gaussian count target (UV grid)"),
    (
        "model.d_k",
        "attention key width; unspecified upstream, smallest useful",
    ),
    (
        "model.d_v",
        "attention value width; unspecified upstream, smallest useful",
    ),
    ("model.pe_frequencies", "positional encoding octaves"),
    ("model.hidden_width", "offset MLP hidden width"),
    ("model.hidden_layers", "offset MLP hidden layers"),
    ("model.sh_degree", "color SH degree (0 or 1)"),
    ("model.mode", "cross_attention or concat"),
    ("model.seed", "parameter initialization seed"),
    ("model.initial_opacity", "opacity of freshly initialized Gaussians"),
    ("loss.huber_delta", "Huber threshold, published setting"),
    ("loss.lambda_mouth", "rigid-region loss weight, published setting"),
    (
        "loss.lambda_perceptual",
        "perceptual term weight once enabled, published setting",
    ),
    (
        "loss.perceptual_start_iter",
        "iteration enabling the perceptual term (published 15000, scaled down)",
    ),
    ("loss.perceptual", "true/false: include the perceptual proxy at all"),
    (
        "optim.lr_fusion",
        "fusion module and MLP learning rate, published setting",
    ),
    ("optim.lr_opacity", "opacity learning rate, 3D-GS reference value"),
    ("optim.lr_sh", "color learning rate, 3D-GS reference value"),
    ("optim.lr_rotation", "rotation learning rate, 3D-GS reference value"),
    ("optim.lr_scale", "scale learning rate, 3D-GS reference value"),
    ("optim.beta1", "Adam beta1, published setting"),
    ("optim.beta2", "Adam beta2, published setting"),
    ("optim.epsilon", "Adam epsilon"),
    ("optim.iterations", "training steps (one frame per step)"),
    ("optim.eval_every", "evaluation interval in steps"),
    ("optim.train_eval_frames", "training frames scored at each evaluation"),
    ("io.output_dir", "directory for checkpoints, metrics and images"),
    ("io.checkpoint_every", "checkpoint interval in steps (0 = final only)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {value:?} for {key} (expected true or false)"
        ))),
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.scene;
        let m = &self.model;
        let l = &self.loss;
        let o = &self.optim;
        Some(match key {
            "scene.seed" => s.seed.to_string(),
            "scene.resolution" => s.resolution.to_string(),
            "scene.mesh_resolution" => s.mesh_resolution.to_string(),
            "scene.blendshapes" => s.blendshapes.to_string(),
            "scene.expression_dim" => s.expression_dim.to_string(),
            "scene.tokens" => s.tokens.to_string(),
            "scene.rigid_extent" => s.rigid_extent.to_string(),
            "scene.frames" => s.frames.to_string(),
            "scene.expression_amplitude" => s.expression_amplitude.to_string(),
            "scene.jaw_range" => s.jaw_range.to_string(),
            "scene.oracle_detail" => s.oracle_detail.to_string(),
            "scene.oracle_gaussians" => s.oracle_gaussians.to_string(),
            "model.gaussians" => m.gaussians.to_string(),
            "model.d_k" => m.d_k.to_string(),
            "model.d_v" => m.d_v.to_string(),
            "model.pe_frequencies" => m.pe_frequencies.to_string(),
            "model.hidden_width" => m.hidden_width.to_string(),
            "model.hidden_layers" => m.hidden_layers.to_string(),
            "model.sh_degree" => m.sh_degree.to_string(),
            "model.mode" => m.mode.name().to_string(),
            "model.seed" => m.seed.to_string(),
            "model.initial_opacity" => m.initial_opacity.to_string(),
            "loss.huber_delta" => l.huber_delta.to_string(),
            "loss.lambda_mouth" => l.lambda_mouth.to_string(),
            "loss.lambda_perceptual" => l.lambda_perceptual.to_string(),
            "loss.perceptual_start_iter" => l.perceptual_start_iter.to_string(),
            "loss.perceptual" => l.perceptual_enabled.to_string(),
            "optim.lr_fusion" => o.lr_fusion.to_string(),
            "optim.lr_opacity" => o.lr_opacity.to_string(),
            "optim.lr_sh" => o.lr_sh.to_string(),
            "optim.lr_rotation" => o.lr_rotation.to_string(),
            "optim.lr_scale" => o.lr_scale.to_string(),
            "optim.beta1" => o.beta1.to_string(),
            "optim.beta2" => o.beta2.to_string(),
            "optim.epsilon" => o.epsilon.to_string(),
            "optim.iterations" => o.iterations.to_string(),
            "optim.eval_every" => o.eval_every.to_string(),
            "optim.train_eval_frames" => o.train_eval_frames.to_string(),
            "io.output_dir" => self.io.output_dir.display().to_string(),
            "io.checkpoint_every" => self.io.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "scene.seed" => self.scene.seed = parse(key, v)?,
            "scene.resolution" => self.scene.resolution = parse(key, v)?,
            "scene.mesh_resolution" => self.scene.mesh_resolution = parse(key, v)?,
            "scene.blendshapes" => self.scene.blendshapes = parse(key, v)?,
            "scene.expression_dim" => self.scene.expression_dim = parse(key, v)?,
            "scene.tokens" => self.scene.tokens = parse(key, v)?,
            "scene.rigid_extent" => self.scene.rigid_extent = parse(key, v)?,
            "scene.frames" => self.scene.frames = parse(key, v)?,
            "scene.expression_amplitude" => self.scene.expression_amplitude = parse(key, v)?,
            "scene.jaw_range" => self.scene.jaw_range = parse(key, v)?,
            "scene.oracle_detail" => self.scene.oracle_detail = parse(key, v)?,
            "scene.oracle_gaussians" => self.scene.oracle_gaussians = parse(key, v)?,
            "model.gaussians" => self.model.gaussians = parse(key, v)?,
            "model.d_k" => self.model.d_k = parse(key, v)?,
            "model.d_v" => self.model.d_v = parse(key, v)?,
            "model.pe_frequencies" => self.model.pe_frequencies = parse(key, v)?,
            "model.hidden_width" => self.model.hidden_width = parse(key, v)?,
            "model.hidden_layers" => self.model.hidden_layers = parse(key, v)?,
            "model.sh_degree" => self.model.sh_degree = parse(key, v)?,
            "model.mode" => self.model.mode = ConditioningMode::parse(v)?,
            "model.seed" => self.model.seed = parse(key, v)?,
            "model.initial_opacity" => self.model.initial_opacity = parse(key, v)?,
            "loss.huber_delta" => self.loss.huber_delta = parse(key, v)?,
            "loss.lambda_mouth" => self.loss.lambda_mouth = parse(key, v)?,
            "loss.lambda_perceptual" => self.loss.lambda_perceptual = parse(key, v)?,
            "loss.perceptual_start_iter" => self.loss.perceptual_start_iter = parse(key, v)?,
            "loss.perceptual" => self.loss.perceptual_enabled = parse_bool(key, v)?,
            "optim.lr_fusion" => self.optim.lr_fusion = parse(key, v)?,
            "optim.lr_opacity" => self.optim.lr_opacity = parse(key, v)?,
            "optim.lr_sh" => self.optim.lr_sh = parse(key, v)?,
            "optim.lr_rotation" => self.optim.lr_rotation = parse(key, v)?,
            "optim.lr_scale" => self.optim.lr_scale = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.epsilon" => self.optim.epsilon = parse(key, v)?,
            "optim.iterations" => self.optim.iterations = parse(key, v)?,
            "optim.eval_every" => self.optim.eval_every = parse(key, v)?,
            "optim.train_eval_frames" => self.optim.train_eval_frames = parse(key, v)?,
            "io.output_dir" => self.io.output_dir = PathBuf::from(v),
            "io.checkpoint_every" => self.io.checkpoint_every = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        let lrs = [o.lr_fusion, o.lr_opacity, o.lr_sh, o.lr_rotation, o.lr_scale];
        if lrs.iter().any(|&lr| !(lr >= 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return Err(Error::Config(
                "Adam betas must be in [0, 1) and epsilon positive".into(),
            ));
        }
        if o.eval_every == 0 {
            return Err(Error::Config("optim.eval_every must be positive".into()));
        }
        if self.scene.frames < 2 {
            return Err(Error::Config("scene.frames must be at least 2".into()));
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `section.key = value`", n + 1)));
            };
            let key = key.trim();
            if cfg.get(key).is_none() {
                return Err(Error::Config(format!("line {}: unknown config key {key:?}", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Full config text including notes and defaults; parses back to `self`.
    pub fn to_text(&self) -> String {
        let defaults = RunConfig::default();
        let mut out = String::new();
        let mut section = "";
        for (key, note) in KEYS {
            let sec = key.split('.').next().unwrap_or("");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "# [{sec}]");
                section = sec;
            }
            let default = defaults.get(key).unwrap_or_default();
            let _ = writeln!(out, "# {note} (default {default})");
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// `key  default  note` lines for help output.
    pub fn key_table() -> String {
        let defaults = RunConfig::default();
        let mut out = String::new();
        for (key, note) in KEYS {
            let _ = writeln!(out, "  {key:<28} {:<16} {note}", defaults.get(key).unwrap_or_default());
        }
        out
    }
}

//! Training loop, evaluation, checkpoints and the conditioning ablation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{ParamStore, Tensor};
use crate::checkpoint::{self, Checkpoint, RngState};
use crate::config::RunConfig;
use crate::deform::{ConditioningMode, PoseCache, SurfaceAnchor};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::metrics::{self, ImageMetrics};
use crate::model::Model;
use crate::optim::AdamState;
use crate::scene::{self, BlendshapeMesh, Dataset, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One evaluation row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub iter: u64,
    pub split: Split,
    pub metrics: ImageMetrics,
    /// Mean objective over the evaluated frames.
    pub loss: f64,
}

pub const METRICS_HEADER: &str = "iter,split,L1,PSNR,SSIM,L1_masked,loss";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iter,
            r.split.name(),
            m.l1,
            m.psnr,
            m.ssim,
            m.l1_masked,
            r.loss
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: RunConfig,
    pub iteration: u64,
    pub model: Model,
    pub adam: AdamState,
    pub cache: PoseCache,
    pub rng: ChaCha8Rng,
    /// Training loss of every completed step.
    pub loss_trace: Vec<f64>,
    pub history: Vec<MetricRow>,
}

impl TrainState {
    pub fn new(mesh: &BlendshapeMesh, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let (model, rng) = Model::new(mesh, &config.model, config.scene.tokens)?;
        let o = &config.optim;
        let adam = AdamState::new(&model.store, o.beta1, o.beta2, o.epsilon, |n| o.lr_for(n));
        Ok(TrainState {
            config: config.clone(),
            iteration: 0,
            model,
            adam,
            cache: PoseCache::new(mesh),
            rng,
            loss_trace: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .store
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let meta = |name: &str, t: Tensor| (format!("meta.{name}"), t);
        tensors.push(meta("iteration", Tensor::scalar(self.iteration as f64)));
        tensors.push(meta("config", checkpoint::text_tensor(&self.config.to_text())));
        let anchors: Vec<f64> = self
            .model
            .binding
            .anchors
            .iter()
            .flat_map(|a| {
                [
                    a.triangle as f64,
                    a.barycentric[0],
                    a.barycentric[1],
                    a.barycentric[2],
                    a.normal_offset,
                ]
            })
            .collect();
        let n = self.model.binding.len();
        tensors.push(meta("anchors", Tensor::new(&[n, 5], anchors).expect("n×5")));
        let cache: Vec<f64> = self.cache.last_valid.iter().flatten().flatten().copied().collect();
        let t = self.cache.last_valid.len();
        tensors.push(meta("pose_cache", Tensor::new(&[t, 9], cache).expect("t×9")));
        tensors.push(meta(
            "degenerate_events",
            Tensor::scalar(self.cache.degenerate_events as f64),
        ));
        let trace = self.loss_trace.clone();
        tensors.push(meta("loss_trace", Tensor::new(&[trace.len()], trace).expect("1-D")));
        let hist: Vec<f64> = self
            .history
            .iter()
            .flat_map(|r| {
                let m = r.metrics;
                let split = if r.split == Split::Test { 0.0 } else { 1.0 };
                [r.iter as f64, split, m.l1, m.psnr, m.ssim, m.l1_masked, r.loss]
            })
            .collect();
        tensors.push(meta(
            "history",
            Tensor::new(&[self.history.len(), 7], hist).expect("h×7"),
        ));
        Checkpoint {
            tensors,
            adam: self.adam.clone(),
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
        }
    }

    /// Restores a state; returns it with the mesh it was trained on.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, BlendshapeMesh)> {
        let config = RunConfig::parse_str(&checkpoint::tensor_text(ckpt.tensor("meta.config")?)?)?;
        let mesh = scene::make_head_scene(&config.scene)?;
        let a = ckpt.tensor("meta.anchors")?;
        let (n, w) = a.dims2()?;
        if w != 5 {
            return Err(Error::Format("anchor table must have 5 columns".into()));
        }
        let anchors: Vec<SurfaceAnchor> = (0..n)
            .map(|i| {
                let r = a.row(i);
                SurfaceAnchor {
                    triangle: r[0] as usize,
                    barycentric: [r[1], r[2], r[3]],
                    normal_offset: r[4],
                }
            })
            .collect();
        let mut store = ParamStore::new();
        for (name, t) in &ckpt.tensors {
            if !name.starts_with("meta.") {
                store.add(name.clone(), t.clone());
            }
        }
        let model = Model::from_store(&mesh, &config.model, config.scene.tokens, anchors, store)?;
        ckpt.adam.check_matches(&model.store)?;

        let pc = ckpt.tensor("meta.pose_cache")?;
        if pc.shape() != [mesh.triangles.len(), 9] {
            return Err(Error::Format("pose cache does not match the mesh".into()));
        }
        let last_valid = pc
            .data()
            .chunks_exact(9)
            .map(|c| [[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]])
            .collect();
        let cache = PoseCache {
            last_valid,
            degenerate_events: ckpt.tensor("meta.degenerate_events")?.data()[0] as u64,
        };
        let h = ckpt.tensor("meta.history")?;
        let history = h
            .data()
            .chunks_exact(7)
            .map(|r| MetricRow {
                iter: r[0] as u64,
                split: if r[1] == 0.0 { Split::Test } else { Split::Train },
                metrics: ImageMetrics {
                    l1: r[2],
                    psnr: r[3],
                    ssim: r[4],
                    l1_masked: r[5],
                },
                loss: r[6],
            })
            .collect();
        let mut rng: ChaCha8Rng = rand::SeedableRng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        let state = TrainState {
            iteration: ckpt.tensor("meta.iteration")?.data()[0] as u64,
            model,
            adam: ckpt.adam.clone(),
            cache,
            rng,
            loss_trace: ckpt.tensor("meta.loss_trace")?.data().to_vec(),
            history,
            config,
        };
        Ok((state, mesh))
    }
}

fn train_frames(dataset: &Dataset) -> Vec<&Frame> {
    dataset.train_frames().collect()
}

/// Objective and image gradient for one frame.
pub fn frame_loss(
    model: &Model,
    mesh: &BlendshapeMesh,
    frame: &Frame,
    background: [f64; 3],
    iter: u64,
    loss: &LossConfig,
    cache: &mut PoseCache,
) -> Result<(f64, Vec<f64>, crate::model::Forward)> {
    let fwd = model.forward(mesh, &frame.psi, &frame.camera, background, cache)?;
    let (w, h) = (frame.camera.width, frame.camera.height);
    let (value, grad) = losses::total_loss(&frame.image, &fwd.image.rgb, &frame.mask, w, h, iter, loss)?;
    Ok((value, grad, fwd))
}

/// One optimization step on the round-robin frame for the current iteration.
pub fn train_step(state: &mut TrainState, dataset: &Dataset) -> Result<f64> {
    let frames = train_frames(dataset);
    if frames.is_empty() {
        return Err(Error::Config("dataset has no training frames".into()));
    }
    let frame = frames[(state.iteration % frames.len() as u64) as usize];
    state.model.store.zero_grad();
    let (loss, grad, fwd) = frame_loss(
        &state.model,
        &dataset.mesh,
        frame,
        dataset.background,
        state.iteration,
        &state.config.loss,
        &mut state.cache,
    )?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is {loss} at iteration {} on frame {}",
            state.iteration, frame.index
        )));
    }
    state.model.backward(&fwd, &grad)?;
    state.adam.step(&mut state.model.store).map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} (iteration {}, frame {})", state.iteration, frame.index)),
        other => other,
    })?;
    state.iteration += 1;
    state.loss_trace.push(loss);
    Ok(loss)
}

/// Mean metrics and objective over `frames`.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    frames: &[&Frame],
    cache: &PoseCache,
    iter: u64,
    loss: &LossConfig,
) -> Result<(ImageMetrics, f64)> {
    if frames.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty frame set".into()));
    }
    let per: Vec<(ImageMetrics, f64)> = frames
        .par_iter()
        .map(|f| {
            let mut c = cache.clone();
            let (l, _, fwd) = frame_loss(model, &dataset.mesh, f, dataset.background, iter, loss, &mut c)?;
            let m = metrics::image_metrics(&f.image, &fwd.image.rgb, &f.mask, f.camera.width, f.camera.height)?;
            Ok((m, l))
        })
        .collect::<Result<_>>()?;
    let ms: Vec<ImageMetrics> = per.iter().map(|p| p.0).collect();
    let mean_loss = per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64;
    Ok((metrics::mean_metrics(&ms)?, mean_loss))
}

fn eval_rows(state: &mut TrainState, dataset: &Dataset) -> Result<()> {
    let iter = state.iteration;
    let test: Vec<&Frame> = dataset.test_frames().collect();
    let train = train_frames(dataset);
    let k = state.config.optim.train_eval_frames.min(train.len());
    let train_sample: Vec<&Frame> = (0..k).map(|i| train[i * train.len() / k]).collect();
    if !test.is_empty() {
        let (m, l) = evaluate(&state.model, dataset, &test, &state.cache, iter, &state.config.loss)?;
        state.history.push(MetricRow {
            iter,
            split: Split::Test,
            metrics: m,
            loss: l,
        });
    }
    if !train_sample.is_empty() {
        let (m, l) = evaluate(
            &state.model,
            dataset,
            &train_sample,
            &state.cache,
            iter,
            &state.config.loss,
        )?;
        state.history.push(MetricRow {
            iter,
            split: Split::Train,
            metrics: m,
            loss: l,
        });
    }
    Ok(())
}

fn eval_due(state: &TrainState) -> bool {
    let it = state.iteration;
    let logged = state.history.last().is_some_and(|r| r.iter == it);
    !logged && (it.is_multiple_of(state.config.optim.eval_every) || it == state.config.optim.iterations)
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:06}.cags"))
}

fn write_outputs(state: &TrainState, dir: &Path) -> Result<PathBuf> {
    let path = checkpoint_path(dir, state.iteration);
    state.to_checkpoint().save(&path)?;
    let csv = dir.join("metrics.csv");
    std::fs::write(&csv, metrics_csv(&state.history)).map_err(|e| Error::io(&csv, e))?;
    Ok(path)
}

/// Trains until `config.optim.iterations`, evaluating and (with `out_dir`)
/// checkpointing along the way. Returns the last checkpoint written.
pub fn run_training(state: &mut TrainState, dataset: &Dataset, out_dir: Option<&Path>) -> Result<Option<PathBuf>> {
    let total = state.config.optim.iterations;
    let every = state.config.io.checkpoint_every;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if eval_due(state) {
        eval_rows(state, dataset)?;
    }
    let mut last = None;
    while state.iteration < total {
        if let Err(e) = train_step(state, dataset) {
            if let (Error::NonFinite(msg), Some(dir)) = (&e, out_dir) {
                let path = dir.join(format!("abort_{:06}.cags", state.iteration));
                state.to_checkpoint().save(&path)?;
                return Err(Error::NonFinite(format!("{msg}; state saved to {}", path.display())));
            }
            return Err(e);
        }
        if eval_due(state) {
            eval_rows(state, dataset)?;
        }
        if let Some(dir) = out_dir {
            if every > 0 && state.iteration.is_multiple_of(every) && state.iteration < total {
                last = Some(write_outputs(state, dir)?);
            }
        }
    }
    if let Some(dir) = out_dir {
        last = Some(write_outputs(state, dir)?);
    }
    Ok(last)
}

/// Trains a fresh model in `mode` without writing files.
pub fn train(dataset: &Dataset, config: &RunConfig, mode: ConditioningMode) -> Result<TrainState> {
    let mut cfg = config.clone();
    cfg.model.mode = mode;
    let mut state = TrainState::new(&dataset.mesh, &cfg)?;
    run_training(&mut state, dataset, None)?;
    Ok(state)
}

/// Test-split metrics of one ablation arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub mode: ConditioningMode,
    pub metrics: ImageMetrics,
}

pub const ABLATION_HEADER: &str = "mode,L1,PSNR,SSIM,L1_masked";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(out, "{},{},{},{},{}", r.mode.name(), m.l1, m.psnr, m.ssim, m.l1_masked);
    }
    out
}

/// Trains both conditioning modes on the same scene with the same seed and
/// budget and scores them on the held-out frames.
pub fn ablate(dataset: &Dataset, config: &RunConfig) -> Result<Vec<AblationRow>> {
    let test: Vec<&Frame> = dataset.test_frames().collect();
    [ConditioningMode::CrossAttention, ConditioningMode::ConcatBaseline]
        .into_iter()
        .map(|mode| {
            let state = train(dataset, config, mode)?;
            let (m, _) = evaluate(
                &state.model,
                dataset,
                &test,
                &state.cache,
                state.iteration,
                &config.loss,
            )?;
            Ok(AblationRow { mode, metrics: m })
        })
        .collect()
}

/// Seed-averaged rows, one per mode.
pub fn average_ablation(runs: &[Vec<AblationRow>]) -> Result<Vec<AblationRow>> {
    let first = runs.first().ok_or_else(|| Error::Config("no ablation runs".into()))?;
    first
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let ms: Vec<ImageMetrics> = runs.iter().map(|r| r[i].metrics).collect();
            Ok(AblationRow {
                mode: row.mode,
                metrics: metrics::mean_metrics(&ms)?,
            })
        })
        .collect()
}

/// Directional comparison used to judge an ablation run: the attention arm
/// is no worse in the rigid region and within 5% overall.
pub fn attention_wins(rows: &[AblationRow]) -> bool {
    let get = |mode| rows.iter().find(|r| r.mode == mode).map(|r| r.metrics);
    match (
        get(ConditioningMode::CrossAttention),
        get(ConditioningMode::ConcatBaseline),
    ) {
        (Some(a), Some(b)) => a.l1_masked <= b.l1_masked && a.l1 <= 1.05 * b.l1,
        _ => false,
    }
}

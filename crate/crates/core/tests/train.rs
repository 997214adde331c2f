use cags::checkpoint::Checkpoint;
use cags::config::RunConfig;
use cags::deform::ConditioningMode;
use cags::scene::{self, Dataset};
use cags::train::{self, TrainState, ABLATION_HEADER, METRICS_HEADER};

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("scene.resolution", "32"),
        ("scene.mesh_resolution", "8"),
        ("scene.frames", "20"),
        ("scene.oracle_gaussians", "256"),
        ("model.gaussians", "256"),
        ("model.hidden_width", "32"),
        ("optim.iterations", "30"),
        ("optim.eval_every", "10"),
        ("optim.train_eval_frames", "4"),
        ("io.checkpoint_every", "10"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn dataset(c: &RunConfig) -> Dataset {
    scene::build_dataset(&c.scene).unwrap()
}

fn run(c: &RunConfig, data: &Dataset, dir: &std::path::Path) -> TrainState {
    let mut state = TrainState::new(&data.mesh, c).unwrap();
    train::run_training(&mut state, data, Some(dir)).unwrap();
    state
}

#[test]
fn identical_runs_write_identical_metrics() {
    let c = small_config();
    let data = dataset(&c);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = run(&c, &data, a.path());
    let sb = run(&c, &data, b.path());
    let csv_a = std::fs::read(a.path().join("metrics.csv")).unwrap();
    let csv_b = std::fs::read(b.path().join("metrics.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    assert_eq!(sa.loss_trace, sb.loss_trace);
    assert_eq!(sa.loss_trace.len(), 30);
    assert!(sa.loss_trace.iter().all(|l| l.is_finite()));

    let text = String::from_utf8(csv_a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let iters: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["0", "0", "10", "10", "20", "20", "30", "30"]);
    for it in [10, 20, 30] {
        assert!(train::checkpoint_path(a.path(), it).exists());
    }
}

#[test]
fn resume_continues_the_trace_exactly() {
    let c = small_config();
    let data = dataset(&c);
    let full_dir = tempfile::tempdir().unwrap();
    let full = run(&c, &data, full_dir.path());

    let ckpt = Checkpoint::load(&train::checkpoint_path(full_dir.path(), 10)).unwrap();
    let (mut resumed, mesh) = TrainState::from_checkpoint(&ckpt).unwrap();
    assert_eq!(mesh, data.mesh);
    assert_eq!(resumed.iteration, 10);
    let dir = tempfile::tempdir().unwrap();
    train::run_training(&mut resumed, &data, Some(dir.path())).unwrap();
    assert_eq!(resumed.loss_trace, full.loss_trace);
    assert_eq!(resumed.history, full.history);
    assert_eq!(
        std::fs::read(dir.path().join("metrics.csv")).unwrap(),
        std::fs::read(full_dir.path().join("metrics.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(train::checkpoint_path(dir.path(), 30)).unwrap(),
        std::fs::read(train::checkpoint_path(full_dir.path(), 30)).unwrap()
    );
}

#[test]
fn checkpoint_round_trip_preserves_state() {
    let mut c = small_config();
    c.optim.iterations = 5;
    let data = dataset(&c);
    let state = train::train(&data, &c, ConditioningMode::CrossAttention).unwrap();
    let bytes = state.to_checkpoint().to_bytes();
    assert_eq!(&bytes[..4], b"CAGS");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    let (restored, _) = TrainState::from_checkpoint(&back).unwrap();
    assert_eq!(restored.iteration, 5);
    assert_eq!(restored.config, state.config);
    assert_eq!(restored.loss_trace, state.loss_trace);
    for (a, b) in restored.model.store.iter().zip(state.model.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let mut bad = bytes.clone();
    bad[4] = 9;
    let err = Checkpoint::from_bytes(&bad).unwrap_err().to_string();
    assert!(err.contains('9') && err.contains('1'), "{err}");
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
        Err(cags::Error::Format(_))
    ));
}

#[test]
fn zero_iterations_renders_the_anchored_field() {
    let mut c = small_config();
    c.optim.iterations = 0;
    let data = dataset(&c);
    let state = train::train(&data, &c, ConditioningMode::CrossAttention).unwrap();
    assert_eq!(state.iteration, 0);
    assert!(state.loss_trace.is_empty());
    for f in data.frames.iter().step_by(7) {
        let mut c1 = state.cache.clone();
        let mut c2 = state.cache.clone();
        let fwd = state
            .model
            .forward(&data.mesh, &f.psi, &f.camera, data.background, &mut c1)
            .unwrap();
        let anchored = state
            .model
            .render_anchored(&data.mesh, &f.psi, &f.camera, data.background, &mut c2)
            .unwrap();
        assert_eq!(fwd.image.rgb, anchored.rgb);
    }
}

#[test]
fn first_step_loss_is_the_anchored_loss() {
    let c = small_config();
    let data = dataset(&c);
    let mut state = TrainState::new(&data.mesh, &c).unwrap();
    let frame = data.train_frames().next().unwrap();
    let mut cache = state.cache.clone();
    let img = state
        .model
        .render_anchored(&data.mesh, &frame.psi, &frame.camera, data.background, &mut cache)
        .unwrap();
    let (w, h) = (frame.camera.width, frame.camera.height);
    let (want, _) = cags::losses::total_loss(&frame.image, &img.rgb, &frame.mask, w, h, 0, &c.loss).unwrap();
    let got = train::train_step(&mut state, &data).unwrap();
    assert_eq!(got, want);
}

#[test]
fn ablation_at_zero_iterations_is_a_tie() {
    let mut c = small_config();
    c.optim.iterations = 0;
    let data = dataset(&c);
    let rows = train::ablate(&data, &c).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].metrics, rows[1].metrics);
    assert!(train::attention_wins(&rows));
    let csv = train::ablation_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ABLATION_HEADER);
    assert_eq!(
        ABLATION_HEADER.split(',').collect::<Vec<_>>(),
        ["mode", "L1", "PSNR", "SSIM", "L1_masked"]
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("cross_attention,"));
    assert!(lines[2].starts_with("concat,"));
    let mean = train::average_ablation(&[rows.clone(), rows.clone()]).unwrap();
    assert_eq!(mean, rows);
}

#[test]
fn non_finite_parameters_abort_with_a_dump() {
    let c = small_config();
    let data = dataset(&c);
    let mut state = TrainState::new(&data.mesh, &c).unwrap();
    train::train_step(&mut state, &data).unwrap();
    let id = state.model.gaussian.opacity_logit;
    state.model.store.get_mut(id).value.data_mut()[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let err = train::run_training(&mut state, &data, Some(dir.path())).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, cags::Error::NonFinite(_)), "{msg}");
    assert_eq!(err.exit_code(), 4);
    assert!(msg.contains("frame 1"), "{msg}");
    let dump = dir.path().join("abort_000001.cags");
    assert!(dump.exists());
    assert!(msg.contains("abort_000001.cags"));
    Checkpoint::load(&dump).unwrap();
}

#[test]
fn empty_training_set_is_rejected() {
    let c = small_config();
    let mut data = dataset(&c);
    data.frames.iter_mut().for_each(|f| f.test = true);
    let mut state = TrainState::new(&data.mesh, &c).unwrap();
    assert!(matches!(
        train::train_step(&mut state, &data),
        Err(cags::Error::Config(_))
    ));
    let model = &state.model;
    assert!(matches!(
        train::evaluate(model, &data, &[], &state.cache, 0, &c.loss),
        Err(cags::Error::Config(_))
    ));
}

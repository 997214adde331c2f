use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cags::autodiff::{set_precision, Precision};
use cags::bench;
use cags::checkpoint::Checkpoint;
use cags::config::RunConfig;
use cags::deform::ConditioningMode;
use cags::gradcheck::{self, GradcheckOptions};
use cags::imageio;
use cags::scene;
use cags::train::{self, TrainState};
use cags::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cags",
    version,
    about = "Expression-conditioned Gaussian splatting on synthetic heads"
)]
#[command(after_help = after_help())]
struct Cli {
    /// Config file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set optim.iterations=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets both scene.seed and model.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip per-operation finiteness checks.
    #[arg(long, global = true)]
    fast: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset recipe, optionally dumping frames and masks as PNG.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dump: bool,
        /// Allow writing into an existing non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write checkpoints plus metrics.csv.
    Train {
        /// cross_attention or concat.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        iterations: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a checkpoint for given expression codes and camera.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `zero`, `train`, `test`, or a file with one comma-separated code per line.
        #[arg(long, default_value = "zero")]
        psi: String,
        /// Camera yaw about the vertical axis, in degrees.
        #[arg(long, default_value_t = 0.0)]
        orbit: f64,
        /// Maximum number of frames to write.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write binary PPM files.
        #[arg(long)]
        ppm: bool,
    },
    /// Train both conditioning modes per seed and compare on held-out frames.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Oracle motion not explained by the mesh (sets scene.oracle_detail).
        #[arg(long)]
        detail: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient class.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        gaussians: usize,
        #[arg(long, default_value_t = 16)]
        resolution: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Time forward and forward+backward rendering.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn after_help() -> String {
    format!(
        "Config keys (default, note):\n{}\nEnvironment:\n  CAG_THREADS  worker threads (0 or unset = all cores)\n\nExit codes: 0 ok, 2 config error, 3 IO error, 4 numeric failure",
        RunConfig::key_table()
    )
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.scene.seed = s;
        cfg.model.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen(cfg: &RunConfig, out: Option<PathBuf>, dump: bool, force: bool) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.io.output_dir.clone());
    if dir.exists() && !force {
        let nonempty = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .next()
            .is_some();
        if nonempty {
            return Err(Error::Config(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    create_dir(&dir)?;
    let recipe = dir.join("recipe.cfg");
    write_file(&recipe, &cfg.to_text())?;
    println!("wrote {}", recipe.display());
    if dump {
        let data = scene::build_dataset(&cfg.scene)?;
        let frames = dir.join("frames");
        let masks = dir.join("masks");
        create_dir(&frames)?;
        create_dir(&masks)?;
        for f in &data.frames {
            let (w, h) = (f.camera.width, f.camera.height);
            imageio::write_rgb_png(&frames.join(format!("frame_{:04}.png", f.index)), w, h, &f.image)?;
            imageio::write_mask_png(&masks.join(format!("mask_{:04}.png", f.index)), w, h, &f.mask)?;
        }
        println!("wrote {} frames and masks under {}", data.frames.len(), dir.display());
    }
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    mode: Option<String>,
    iterations: Option<u64>,
    resume: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (mut state, dir) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(&path)?;
            let (mut state, _) = TrainState::from_checkpoint(&ckpt)?;
            if let Some(m) = mode {
                if ConditioningMode::parse(&m)? != state.config.model.mode {
                    return Err(Error::Config(format!(
                        "checkpoint was trained in {} mode",
                        state.config.model.mode.name()
                    )));
                }
            }
            if let Some(n) = iterations {
                state.config.optim.iterations = n;
            }
            let dir = out.unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
            (state, dir)
        }
        None => {
            let mut cfg = cfg.clone();
            if let Some(m) = mode {
                cfg.model.mode = ConditioningMode::parse(&m)?;
            }
            if let Some(n) = iterations {
                cfg.optim.iterations = n;
            }
            let mesh = scene::make_head_scene(&cfg.scene)?;
            let dir = out.unwrap_or_else(|| cfg.io.output_dir.clone());
            (TrainState::new(&mesh, &cfg)?, dir)
        }
    };
    let dataset = scene::build_dataset(&state.config.scene)?;
    let last = train::run_training(&mut state, &dataset, Some(&dir))?;
    if let Some(row) = state.history.iter().rev().find(|r| r.split == train::Split::Test) {
        println!(
            "iteration {}: test L1 {:.5} PSNR {:.3} SSIM {:.5} L1_masked {:.5}",
            row.iter, row.metrics.l1, row.metrics.psnr, row.metrics.ssim, row.metrics.l1_masked
        );
    }
    if let Some(p) = last {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn read_psi_file(path: &Path, dim: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("{}:{}: bad number {s:?}", path.display(), n + 1)))
            })
            .collect::<Result<_>>()?;
        if v.len() != dim {
            return Err(Error::Dimension(format!(
                "{}:{}: expression code has {} values, expected {dim}",
                path.display(),
                n + 1,
                v.len()
            )));
        }
        out.push(v);
    }
    Ok(out)
}

fn cmd_render(
    checkpoint: &Path,
    psi: &str,
    orbit: f64,
    frames: Option<usize>,
    out: Option<PathBuf>,
    ppm: bool,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (state, mesh) = TrainState::from_checkpoint(&ckpt)?;
    let cfg = &state.config;
    let codes: Vec<Vec<f64>> = match psi {
        "zero" => vec![vec![0.0; cfg.scene.expression_dim]],
        "train" | "test" => {
            let all = scene::expression_trajectory(&cfg.scene);
            let split = all.len() - cfg.scene.test_frames();
            if psi == "train" {
                all[..split].to_vec()
            } else {
                all[split..].to_vec()
            }
        }
        file => read_psi_file(Path::new(file), cfg.scene.expression_dim)?,
    };
    let limit = frames.unwrap_or(codes.len()).min(codes.len());
    let dir = out.unwrap_or_else(|| cfg.io.output_dir.join("renders"));
    create_dir(&dir)?;
    let camera = scene::orbit_camera(cfg.scene.resolution, orbit)?;
    let mut cache = state.cache.clone();
    for (i, code) in codes.iter().take(limit).enumerate() {
        let fwd = state.model.forward(&mesh, code, &camera, [0.0; 3], &mut cache)?;
        let (w, h) = (camera.width, camera.height);
        imageio::write_rgb_png(&dir.join(format!("render_{i:04}.png")), w, h, &fwd.image.rgb)?;
        if ppm {
            imageio::write_ppm(&dir.join(format!("render_{i:04}.ppm")), w, h, &fwd.image.rgb)?;
        }
    }
    println!("wrote {limit} renders to {}", dir.display());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, seeds: &[u64], detail: Option<f64>, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.io.output_dir.join("ablation"));
    create_dir(&dir)?;
    let mut runs = Vec::new();
    let mut wins = 0;
    for &seed in seeds {
        let mut c = cfg.clone();
        c.scene.seed = seed;
        c.model.seed = seed;
        if let Some(d) = detail {
            c.scene.oracle_detail = d;
        }
        let dataset = scene::build_dataset(&c.scene)?;
        let rows = train::ablate(&dataset, &c)?;
        let path = dir.join(format!("ablation_seed{seed}.csv"));
        write_file(&path, &train::ablation_csv(&rows))?;
        let won = train::attention_wins(&rows);
        wins += won as usize;
        println!(
            "seed {seed}: cross_attention {}",
            if won { "holds" } else { "does not hold" }
        );
        runs.push(rows);
    }
    let mean = train::average_ablation(&runs)?;
    let csv = train::ablation_csv(&mean);
    write_file(&dir.join("ablation.csv"), &csv)?;
    print!("{csv}");
    println!("criterion held for {wins} of {} seeds", seeds.len());
    Ok(())
}

fn cmd_gradcheck(gaussians: usize, resolution: usize, tolerance: f64, seed: Option<u64>) -> Result<bool> {
    let defaults = GradcheckOptions::default();
    let report = gradcheck::gradcheck(&GradcheckOptions {
        gaussians,
        resolution,
        tolerance,
        seed: seed.unwrap_or(defaults.seed),
        ..defaults
    })?;
    print!("{}", report.to_text());
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Ok(v) = std::env::var("CAG_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("CAG_THREADS must be a non-negative integer, got {v:?}")))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
        }
    }
    set_precision(if cli.fast {
        Precision::Fast
    } else {
        Precision::Verification
    });
    match cli.command {
        Command::Gen { ref out, dump, force } => cmd_gen(&load_config(&cli)?, out.clone(), dump, force)?,
        Command::Train {
            ref mode,
            iterations,
            ref resume,
            ref out,
        } => {
            let cfg = if resume.is_some() {
                RunConfig::default()
            } else {
                load_config(&cli)?
            };
            cmd_train(&cfg, mode.clone(), iterations, resume.clone(), out.clone())?
        }
        Command::Render {
            ref checkpoint,
            ref psi,
            orbit,
            frames,
            ref out,
            ppm,
        } => cmd_render(checkpoint, psi, orbit, frames, out.clone(), ppm)?,
        Command::Ablate {
            ref seeds,
            detail,
            ref out,
        } => cmd_ablate(&load_config(&cli)?, seeds, detail, out.clone())?,
        Command::Gradcheck {
            gaussians,
            resolution,
            tolerance,
        } => {
            if cli.fast {
                return Err(Error::Config(
                    "gradcheck requires verification precision (drop --fast)".into(),
                ));
            }
            if !cmd_gradcheck(gaussians, resolution, tolerance, cli.seed)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Bench {
            ref sizes,
            resolution,
            warmup,
            runs,
            ref out,
        } => {
            let rows = bench::run_bench(sizes, resolution, warmup, runs)?;
            let csv = bench::bench_csv(&rows);
            match out {
                Some(p) => write_file(p, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

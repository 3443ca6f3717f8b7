use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use nerfca::dataset::{AngiogramDataset, DatasetConfig, ViewRole};
use nerfca::evaluator::{evaluate, render_model_view, run_ablation, save_channel_images, AblationSuite, EvalConfig};
use nerfca::geometry::pose_from_euler;
use nerfca::losses::Variant;
use nerfca::trainer::{latest_checkpoint, load_checkpoint, run_training, TrainConfig, TrainOptions};

/// Exit codes by failure class.
const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "nerfca", version, about = "Static/dynamic attenuation fields for sparse-view angiography")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, env = "NERFCA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the phantom into a dataset directory.
    GenerateData(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint against the phantom.
    Eval(EvalArgs),
    /// Render a checkpoint from arbitrary C-arm angles.
    Render(RenderArgs),
    /// Train and score every cell of an ablation suite.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Number of training views.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the held-out validation views.
    #[arg(long)]
    no_validation: bool,
}

/// Training overrides shared by `train` and `ablate`.
#[derive(Args)]
struct TrainOverrides {
    /// Training configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Multiplies every iteration count.
    #[arg(long)]
    scale: Option<f64>,
    /// Unscaled iteration count.
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_rays: Option<usize>,
    #[arg(long)]
    samples_per_ray: Option<usize>,
    /// Weighted-sampling fraction V.
    #[arg(long)]
    weighted_fraction: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { cfg.$f = v; })* };
        }
        set!(variant, scale, iterations, seed, batch_rays, samples_per_ray, weighted_fraction, checkpoint_every);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

/// Evaluation overrides shared by `eval` and `ablate`.
#[derive(Args)]
struct EvalOverrides {
    /// Quadrature samples per ray for model renders.
    #[arg(long)]
    eval_samples: Option<usize>,
    /// MIP threshold as a fraction of the vessel attenuation.
    #[arg(long)]
    mip_threshold_fraction: Option<f64>,
    /// Score training views instead of the validation views.
    #[arg(long)]
    training_views: bool,
}

impl EvalOverrides {
    fn resolve(&self) -> EvalConfig {
        let mut cfg = EvalConfig::default();
        if let Some(s) = self.eval_samples {
            cfg.samples_per_ray = s;
        }
        if let Some(f) = self.mip_threshold_fraction {
            cfg.mip_threshold_fraction = f;
        }
        if self.training_views {
            cfg.role = ViewRole::Training;
        }
        cfg
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: EvalOverrides,
    /// Also write every rendered image.
    #[arg(long)]
    keep_images: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset whose scanner geometry is used.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rotation about the patient's vertical axis, degrees.
    #[arg(long, allow_hyphen_values = true)]
    theta: f64,
    /// Rotation about the lateral axis, degrees.
    #[arg(long, allow_hyphen_values = true)]
    phi: f64,
    /// Cardiac phase, 1-based.
    #[arg(long)]
    phase: usize,
    #[arg(long, default_value_t = 128)]
    samples: usize,
}

#[derive(Args)]
struct AblateArgs {
    /// wps, entropy-occlusion-grid, variant-comparison or phase-consistency.
    #[arg(long)]
    suite: AblationSuite,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[command(flatten)]
    eval: EvalOverrides,
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    config: &'a C,
    seed: Option<u64>,
    threads: Option<usize>,
    artifacts: Vec<String>,
    tool_version: &'static str,
    started_unix: u64,
    finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

struct Run {
    command: &'static str,
    threads: Option<usize>,
    started: u64,
}

impl Run {
    fn finish<C: Serialize>(&self, dir: &Path, config: &C, seed: Option<u64>, mut artifacts: Vec<String>) -> Result<()> {
        artifacts.sort();
        let m = RunManifest {
            command: self.command,
            config,
            seed,
            threads: self.threads,
            artifacts,
            tool_version: env!("CARGO_PKG_VERSION"),
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        let p = dir.join("manifest.run.json");
        fs::write(&p, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    }
}

/// Paths under `dir` relative to it, excluding the run manifest.
fn list_artifacts(dir: &Path) -> Vec<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) {
        let Ok(entries) = fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(base, &p, out);
            } else if let Ok(rel) = p.strip_prefix(base) {
                let rel = rel.display().to_string();
                if rel != "manifest.run.json" {
                    out.push(rel);
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, toml::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<AngiogramDataset> {
    Ok(AngiogramDataset::load(dir)?)
}

fn generate(run: &Run, a: &GenerateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => DatasetConfig::load(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(v) = a.views {
        cfg.training_views = v;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.no_validation {
        cfg.include_validation = false;
    }
    let ds = AngiogramDataset::generate(&cfg)?;
    ds.save(&a.out)?;
    write_toml(&a.out.join("dataset.toml"), &cfg)?;
    println!(
        "wrote {} frames ({} training views, {} phases) to {}",
        ds.frames.len(),
        ds.training_view_ids().len(),
        ds.phases(),
        a.out.display()
    );
    run.finish(&a.out, &cfg, Some(cfg.seed), list_artifacts(&a.out))
}

fn train(run: &Run, a: &TrainArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let ds = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let resume = if a.resume { latest_checkpoint(&a.out)? } else { None };
    if a.resume && resume.is_none() {
        eprintln!("no checkpoint in {}, starting from scratch", a.out.display());
    }
    write_toml(&a.out.join("config.toml"), &cfg)?;
    let outcome = run_training(
        &ds,
        &cfg,
        &TrainOptions {
            out_dir: Some(&a.out),
            resume: resume.as_deref(),
            stop_after: None,
        },
    )?;
    if let Some(last) = outcome.log.last() {
        println!(
            "finished at iteration {} (L_p {:.4e}, total {:.4e})",
            outcome.state.iteration, last.bundle.photometric, last.bundle.total
        );
    } else {
        println!("already complete at iteration {}", outcome.state.iteration);
    }
    run.finish(&a.out, &cfg, Some(cfg.seed), list_artifacts(&a.out))
}

fn eval(run: &Run, a: &EvalArgs) -> Result<()> {
    let (state, train_cfg) = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let mut cfg = a.overrides.resolve();
    cfg.keep_images = a.keep_images;
    let report = evaluate(&state.model, state.iteration, &ds, &cfg)?;
    report.write(&a.out)?;
    println!(
        "{} views: Dice {:.4} (phase std {:.4}), PSNR {:.2}, SSIM {:.4}",
        report.cells.len() / ds.phases(),
        report.mean_dice,
        report.per_phase_dice_std(),
        report.mean_psnr,
        report.mean_ssim
    );
    #[derive(Serialize)]
    struct Snapshot<'a> {
        checkpoint: &'a Path,
        eval: &'a EvalConfig,
        train: &'a TrainConfig,
    }
    let snap = Snapshot {
        checkpoint: &a.checkpoint,
        eval: &cfg,
        train: &train_cfg,
    };
    run.finish(&a.out, &snap, Some(train_cfg.seed), list_artifacts(&a.out))
}

fn render(run: &Run, a: &RenderArgs) -> Result<()> {
    let (state, train_cfg) = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    if a.phase == 0 || a.phase > state.model.phases {
        return Err(nerfca::Error::Argument(format!("phase must lie in 1..={}", state.model.phases)).into());
    }
    let pose = pose_from_euler(a.theta, a.phi, &ds.config.scanner)?;
    let i0 = ds.source_intensity();
    let images = render_model_view(&state.model, state.iteration, &pose, a.phase, a.samples, i0)?;
    save_channel_images(&a.out, &images, i0)?;
    println!("rendered ({}, {}) at phase {} to {}", a.theta, a.phi, a.phase, a.out.display());
    #[derive(Serialize)]
    struct Snapshot<'a> {
        checkpoint: &'a Path,
        theta: f64,
        phi: f64,
        phase: usize,
        samples: usize,
        train: &'a TrainConfig,
    }
    let snap = Snapshot {
        checkpoint: &a.checkpoint,
        theta: a.theta,
        phi: a.phi,
        phase: a.phase,
        samples: a.samples,
        train: &train_cfg,
    };
    run.finish(&a.out, &snap, Some(train_cfg.seed), list_artifacts(&a.out))
}

fn ablate(run: &Run, a: &AblateArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let eval_cfg = a.eval.resolve();
    let ds = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_toml(&a.out.join("config.toml"), &cfg)?;
    let report = run_ablation(a.suite, &ds, &cfg, &eval_cfg, Some(&a.out))?;
    print!("{}", report.markdown());
    run.finish(&a.out, &cfg, Some(cfg.seed), list_artifacts(&a.out))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use nerfca::Error as E;
    let core = err.chain().find_map(|e| e.downcast_ref::<E>());
    match core {
        Some(E::Config(_) | E::Argument(_) | E::Usage(_) | E::Capability(_)) => EXIT_CONFIG,
        Some(E::Io { .. } | E::Format { .. }) => EXIT_IO,
        Some(E::Numerical(_)) => EXIT_NUMERICAL,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => EXIT_IO,
        None if err.chain().any(|e| e.is::<toml::ser::Error>() || e.is::<serde_json::Error>()) => EXIT_CONFIG,
        None => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let name = match &cli.command {
        Command::GenerateData(_) => "generate-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Render(_) => "render",
        Command::Ablate(_) => "ablate",
    };
    let run = Run {
        command: name,
        threads: cli.threads,
        started: unix_now(),
    };
    let result = match &cli.command {
        Command::GenerateData(a) => generate(&run, a),
        Command::Train(a) => train(&run, a),
        Command::Eval(a) => eval(&run, a),
        Command::Render(a) => render(&run, a),
        Command::Ablate(a) => ablate(&run, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

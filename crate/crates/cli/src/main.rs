//! `trajdiff`: simulate, train, estimate, deblur, cep, eval and plot.

mod cmd;
mod config;
mod data;
mod error;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Config, Split};
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "trajdiff", version, about = "Motion-trajectory estimation with a conditional diffusion model")]
struct Cli {
    /// Root under which run directories are created.
    #[arg(long, env = "TRAJDIFF_ROOT", default_value = "trajdiff-runs", global = true)]
    root: PathBuf,
    /// TOML config file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Worker threads for per-entry work; 0 uses all cores.
    #[arg(long, default_value_t = 0, global = true)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset of blurred/sharp pairs with HR trajectory maps.
    Simulate(SimulateArgs),
    /// Train the estimator (or an ablation variant) on a dataset's train split.
    Train(TrainArgs),
    /// Estimate HR maps and resampled PSFs with a trained checkpoint.
    Estimate(EstimateArgs),
    /// Non-blind deconvolution with estimated, true, delta or random PSFs.
    Deblur(DeblurArgs),
    /// Coded-exposure trials: code search, coded blur, inverse filtering.
    Cep(CepArgs),
    /// MNC / PSNR / SSIM reports and the ablation grid.
    Eval(EvalArgs),
    /// Render figures as PNG.
    Plot(PlotArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Number of procedural sharp scenes.
    #[arg(long)]
    pub sharps: Option<usize>,
    /// Number of trajectories.
    #[arg(long)]
    pub trajs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory of sharp PNG images instead of procedural scenes.
    #[arg(long)]
    pub sharp_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub data: PathBuf,
    /// full, single_scale_f2, single_scale_f4, no_proposed_loss or no_stpd.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file, or a `train` run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PsfKind {
    /// Resampled from estimated maps (`--estimates`).
    Estimated,
    /// Ground-truth PSFs.
    Truth,
    /// Centered delta: deblurring is a no-op baseline.
    Delta,
    /// PSF of an independently drawn trajectory.
    Random,
}

#[derive(Args)]
pub struct DeblurArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "estimated")]
    pub psf: PsfKind,
    /// `estimate` run directory, required with `--psf estimated`.
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlanKind {
    /// Optimize codes on the ground-truth trajectories.
    Truth,
    /// Optimize codes on estimated maps (`--estimates`).
    Estimated,
}

#[derive(Args)]
pub struct CepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "estimated")]
    pub plan: PlanKind,
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    /// Number of entries, 0 for the whole split.
    #[arg(long)]
    pub count: Option<usize>,
    /// Random codes drawn per trajectory.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub split: Option<Split>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Estimated PSFs as `NAME=DIR` with DIR an `estimate` run.
    #[arg(long = "estimates", value_name = "NAME=DIR")]
    pub estimates: Vec<String>,
    /// Baseline rows: truth, delta or random.
    #[arg(long = "baseline", value_enum)]
    pub baselines: Vec<PsfKind>,
    /// `train` run directories of ablation variants.
    #[arg(long = "ablation", value_name = "RUN_DIR")]
    pub ablation: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<Split>,
}

#[derive(Args)]
pub struct PlotArgs {
    #[command(subcommand)]
    pub kind: PlotKind,
    /// Output PNG.
    #[arg(long, global = true, default_value = "plot.png")]
    pub out: PathBuf,
}

#[derive(Subcommand)]
pub enum PlotKind {
    /// Sharp, blurred, HR map and PSF of one entry.
    Trajectory {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        id: usize,
    },
    /// Blurred input, true and estimated maps and PSFs.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        id: Option<usize>,
    },
    /// Uncoded and coded PSFs, their MTFs and the code timeline.
    Mtf {
        #[arg(long)]
        cep: PathBuf,
        #[arg(long)]
        id: Option<usize>,
    },
    /// Channel-mean encoder features f1..f4 and the condition map.
    Features {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        id: usize,
    },
    /// Training loss curve of a `train` run.
    Loss {
        #[arg(long)]
        run: PathBuf,
    },
}

pub struct Ctx {
    pub root: PathBuf,
    pub cfg: Config,
    pool: rayon::ThreadPool,
}

impl Ctx {
    pub fn pool(&self) -> &rayon::ThreadPool {
        &self.pool
    }
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for s in &cli.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    let s = |v: &dyn ToString| v.to_string();
    match &cli.command {
        Command::Simulate(a) => {
            put("simulate.sharps", a.sharps.map(|v| s(&v)));
            put("simulate.n_trajectories", a.trajs.map(|v| s(&v)));
            put("simulate.seed", a.seed.map(|v| s(&v)));
            put("simulate.sharp_dir", a.sharp_dir.as_ref().map(|p| format!("{:?}", p.display().to_string())));
        }
        Command::Train(a) => {
            put("train.variant", a.variant.clone());
            put("train.iterations", a.iterations.map(|v| s(&v)));
            put("train.seed", a.seed.map(|v| s(&v)));
            put("train.lr", a.lr.map(|v| format!("{v:?}")));
        }
        Command::Estimate(a) => {
            put("estimate.steps", a.steps.map(|v| s(&v)));
            put("estimate.seed", a.seed.map(|v| s(&v)));
            put("estimate.split", a.split.map(split_name));
        }
        Command::Deblur(a) => put("estimate.split", a.split.map(split_name)),
        Command::Cep(a) => {
            put("cep.count", a.count.map(|v| s(&v)));
            put("cep.search.budget", a.budget.map(|v| s(&v)));
            put("cep.seed", a.seed.map(|v| s(&v)));
            put("cep.split", a.split.map(split_name));
        }
        Command::Eval(a) => put("estimate.split", a.split.map(split_name)),
        Command::Plot(_) => {}
    }
    Ok(out)
}

fn split_name(s: Split) -> String {
    match s {
        Split::Train => "\"train\"",
        Split::Heldout => "\"heldout\"",
        Split::All => "\"all\"",
    }
    .to_string()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref(), &overrides(&cli)?)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    let ctx = Ctx { root: cli.root.clone(), cfg, pool };
    let out = match &cli.command {
        Command::Simulate(a) => cmd::simulate::run(&ctx, a)?,
        Command::Train(a) => cmd::train::run(&ctx, a)?,
        Command::Estimate(a) => cmd::estimate::run(&ctx, a)?,
        Command::Deblur(a) => cmd::deblur::run(&ctx, a)?,
        Command::Cep(a) => cmd::cep::run(&ctx, a)?,
        Command::Eval(a) => cmd::eval::run(&ctx, a)?,
        Command::Plot(a) => cmd::plot::run(&ctx, a)?,
    };
    println!("{}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

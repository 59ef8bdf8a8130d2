//! `wfs`: generate boundary images, solve reference problems, train and
//! evaluate residual-trained surrogates.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use wfs_core::grid::SuiteId;
use wfs_core::par::Exec;
use wfs_core::tensor::Preset;
use wfs_core::train::OptimizerKind;

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error at {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "wfs", version, about = "Weak-form residual surrogates for boundary-value problems")]
struct Cli {
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct Common {
    /// Suite id, e.g. diffusion-20 or nonlinear-steps.
    #[arg(long)]
    suite: Option<String>,
    /// Square grid size.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the boundary images of a suite.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Solve every suite member with the finite-element reference solver.
    Dns {
        #[command(flatten)]
        common: Common,
    },
    /// Train a deterministic or Bayesian surrogate.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        zero_init_epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// adam or nadam.
        #[arg(long)]
        optimizer: Option<String>,
        #[arg(long)]
        copies: Option<usize>,
        #[arg(long)]
        chunk_size: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long)]
        sigma2_init: Option<f64>,
        /// Train the Flipout variant.
        #[arg(long)]
        bayesian: bool,
        /// Deterministic checkpoint whose weights become the posterior means.
        #[arg(long)]
        warm_start: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against reference solutions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        preset: Option<String>,
        /// Monte-Carlo samples for Bayesian checkpoints.
        #[arg(long)]
        mc: Option<usize>,
    },
}

fn parse<T: std::str::FromStr>(what: &str, s: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e| CliError::Config(format!("bad {what} `{s}`: {e}")))
}

fn base_config(path: Option<&Path>, common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &common.suite {
        cfg.suite = parse::<SuiteId>("suite", s)?;
    }
    if common.grid.is_some() {
        cfg.grid = common.grid;
        cfg.preset = None;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn exec_from_env() -> Result<Exec, CliError> {
    let Ok(v) = std::env::var("WFS_THREADS") else {
        return Ok(Exec::Parallel);
    };
    let n: usize = parse("WFS_THREADS", &v)?;
    if n == 0 {
        return Err(CliError::Config("WFS_THREADS must be at least 1".into()));
    }
    if n == 1 {
        return Ok(Exec::Sequential);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    Ok(Exec::Parallel)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let exec = exec_from_env()?;
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::Gen { common } => {
            let cfg = base_config(cfg_path, &common)?.resolve()?;
            commands::gen(&cfg)
        }
        Command::Dns { common } => {
            let cfg = base_config(cfg_path, &common)?.resolve()?;
            commands::dns(&cfg, exec)
        }
        Command::Train {
            common,
            preset,
            epochs,
            zero_init_epochs,
            learning_rate,
            batch_size,
            optimizer,
            copies,
            chunk_size,
            checkpoint_every,
            sigma2_init,
            bayesian,
            warm_start,
        } => {
            let mut cfg = base_config(cfg_path, &common)?;
            if bayesian && cfg_path.is_none() {
                cfg.train = wfs_core::train::TrainConfig::bayesian();
            }
            if let Some(p) = preset {
                cfg.preset = Some(parse::<Preset>("preset", &p)?);
            }
            let t = &mut cfg.train;
            if let Some(v) = epochs {
                t.epochs = v;
            }
            if let Some(v) = zero_init_epochs {
                t.zero_init_epochs = v;
            }
            if let Some(v) = learning_rate {
                t.learning_rate = v;
            }
            if let Some(v) = batch_size {
                t.batch_size = v;
            }
            if let Some(v) = optimizer {
                t.optimizer = match v.to_ascii_lowercase().as_str() {
                    "adam" => OptimizerKind::Adam,
                    "nadam" => OptimizerKind::Nadam,
                    other => return Err(CliError::Config(format!("unknown optimizer `{other}`"))),
                };
            }
            if let Some(v) = chunk_size {
                t.chunk_size = v;
            }
            if let Some(v) = checkpoint_every {
                t.checkpoint_every = v;
            }
            if let Some(v) = sigma2_init {
                t.sigma2_init = v;
            }
            if let Some(v) = copies {
                cfg.copies = v;
            }
            cfg.train.exec = exec;
            let cfg = cfg.resolve()?;
            commands::train(&cfg, bayesian, warm_start.as_deref())
        }
        Command::Eval {
            common,
            checkpoint,
            preset,
            mc,
        } => {
            let mut cfg = base_config(cfg_path, &common)?;
            if let Some(p) = preset {
                cfg.preset = Some(parse::<Preset>("preset", &p)?);
            }
            if let Some(s) = mc {
                if s < 2 {
                    return Err(CliError::Config(format!(
                        "--mc needs at least 2 samples, got {s}"
                    )));
                }
                cfg.mc_samples = s;
            }
            let cfg = cfg.resolve()?;
            commands::eval(&cfg, &checkpoint, exec)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wfs: {e}");
            ExitCode::from(e.code())
        }
    }
}

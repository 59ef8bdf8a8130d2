use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use wfs_core::fem::{self, DnsSolution, FemError};
use wfs_core::grid::{augment, encode_bvp, BvpSpec, StepTag};
use wfs_core::par::{self, Exec};
use wfs_core::tensor::{read_checkpoint, Network, TensorError};
use wfs_core::train::{self, RunManifest, TrainError};
use wfs_core::uq::{self, BvpResult, ReportMeta, UqError};

use crate::config::RunConfig;
use crate::CliError;

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::WarmStart(_) => CliError::Config(e.to_string()),
            TrainError::Io { ref path, .. } => CliError::io(&path.clone(), &e),
            TrainError::Tensor(TensorError::Architecture(_)) => CliError::Config(e.to_string()),
            TrainError::Tensor(TensorError::Io(_) | TensorError::Format(_)) => CliError::Io {
                path: PathBuf::new(),
                message: e.to_string(),
            },
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<UqError> for CliError {
    fn from(e: UqError) -> Self {
        match e {
            UqError::Io { ref path, .. } => CliError::io(&path.clone(), &e),
            UqError::Samples(_) | UqError::Shape(_) | UqError::Grid(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

fn fem_err(e: FemError) -> CliError {
    match e {
        FemError::Io(_) | FemError::Json(_) => CliError::Io {
            path: PathBuf::new(),
            message: e.to_string(),
        },
        FemError::Grid(_) | FemError::Contract(_) => CliError::Config(e.to_string()),
        _ => CliError::Numerical(e.to_string()),
    }
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Boundary images and the suite manifest.
pub fn gen(cfg: &RunConfig) -> Result<(), CliError> {
    let suite = cfg.suite();
    let dir = cfg.output.join("inputs");
    mkdir(&dir)?;
    for s in &suite.specs {
        let img = encode_bvp(s, suite.grid, suite.grid).map_err(|e| CliError::Config(e.to_string()))?;
        let path = dir.join(format!("{}.bcim", s.name));
        let f = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        img.write_to(BufWriter::new(f)).map_err(|e| CliError::io(&path, e))?;
    }
    let path = cfg.output.join("manifest.json");
    let text = serde_json::to_string_pretty(&suite.manifest()).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    cfg.write(&cfg.output)?;
    log::info!("wrote {} inputs to {}", suite.specs.len(), dir.display());
    Ok(())
}

fn solve_all(specs: &[BvpSpec], grid: usize, exec: Exec) -> Vec<Result<DnsSolution, FemError>> {
    par::map(exec, specs.len(), |k| fem::solve(&specs[k], grid, grid))
}

/// Reference solutions; a failing member is reported and the others still run.
pub fn dns(cfg: &RunConfig, exec: Exec) -> Result<(), CliError> {
    let suite = cfg.suite();
    let dir = cfg.output.join("dns");
    mkdir(&dir)?;
    let mut failed = Vec::new();
    for (s, sol) in suite.specs.iter().zip(solve_all(&suite.specs, suite.grid, exec)) {
        match sol {
            Ok(sol) => sol.export(&dir, &s.name, s).map_err(fem_err)?,
            Err(e) => {
                log::error!("{}: {e}", s.name);
                failed.push(s.name.clone());
            }
        }
    }
    cfg.write(&cfg.output)?;
    if failed.is_empty() {
        log::info!("solved {} problems into {}", suite.specs.len(), dir.display());
        Ok(())
    } else {
        Err(CliError::Numerical(format!("no solution for {}", failed.join(", "))))
    }
}

fn load_checkpoint(path: &Path) -> Result<(Network, Option<f64>), CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_checkpoint(BufReader::new(f)).map_err(|e| match e {
        TensorError::Architecture(_) => CliError::Config(format!("{}: {e}", path.display())),
        _ => CliError::io(path, e),
    })
}

pub fn train(cfg: &RunConfig, bayesian: bool, warm_start: Option<&Path>) -> Result<(), CliError> {
    let warm = match warm_start {
        Some(p) => Some(load_checkpoint(p)?.0),
        None => None,
    };
    let suite = cfg.suite();
    let tagged = suite.specs.iter().any(|s| s.tag.is_some());
    let specs: Vec<&BvpSpec> = suite
        .specs
        .iter()
        .filter(|s| !(cfg.train_tagged_only && tagged) || s.tag == Some(StepTag::Train))
        .collect();
    let inputs = specs
        .iter()
        .map(|s| encode_bvp(s, suite.grid, suite.grid))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let data = augment(inputs, cfg.copies).map_err(|e| CliError::Config(e.to_string()))?;
    let preset = cfg.preset();
    let arch = preset.architecture();
    if arch.input != [suite.grid, suite.grid, 2 * specs[0].dof()] {
        return Err(CliError::Config(format!(
            "preset {preset} expects input {:?}, suite gives {}x{}x{}",
            arch.input,
            suite.grid,
            suite.grid,
            2 * specs[0].dof()
        )));
    }
    let physics = specs[0].physics;
    let mut tcfg = cfg.train.clone();
    tcfg.checkpoint_dir = Some(cfg.output.join("checkpoints"));
    mkdir(&cfg.output)?;
    cfg.write(&cfg.output)?;
    let state = if bayesian || warm.is_some() {
        train::train_bnn(&data, physics, arch, &tcfg, warm.as_ref())?
    } else {
        train::train_deterministic(&data, physics, arch, &tcfg)?
    };
    let manifest = RunManifest::new(&state, &tcfg, Some(suite.id.as_str()), Some(preset.as_str()));
    manifest.write(&cfg.output.join("run.json"))?;
    train::write_history_csv(&state.history, &cfg.output.join("history.csv"))?;
    if let Some(last) = state.history.last() {
        log::info!(
            "trained {} epochs: loss {:.4e}, residual {:.4e}",
            last.epoch,
            last.loss,
            last.residual
        );
    }
    Ok(())
}

/// `run.json` of the run that wrote `checkpoint`, if it can be found.
fn manifest_near(checkpoint: &Path) -> Option<RunManifest> {
    let run_dir = checkpoint.parent()?.parent()?;
    let text = fs::read_to_string(run_dir.join("run.json")).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, exec: Exec) -> Result<(), CliError> {
    let (net, log_sigma2) = load_checkpoint(checkpoint)?;
    let preset = cfg.preset();
    if net.arch.deterministic() != preset.architecture() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not match preset {preset}",
            checkpoint.display()
        )));
    }
    let suite = cfg.suite();
    let samples = if net.is_variational() { cfg.mc_samples } else { 1 };
    let solutions = solve_all(&suite.specs, suite.grid, exec);
    let mut results = Vec::with_capacity(suite.specs.len());
    for (s, sol) in suite.specs.iter().zip(solutions) {
        let dns = match sol {
            Ok(d) => Some(d),
            Err(e) => {
                log::error!("{}: no reference solution: {e}", s.name);
                None
            }
        };
        let r = BvpResult::evaluate(
            &net,
            s,
            suite.grid,
            samples,
            cfg.seed,
            cfg.train.sigma1,
            dns,
            exec,
        )?;
        results.push(r);
    }
    let meta = ReportMeta {
        suite: Some(suite.id.as_str().to_string()),
        checkpoint: Some(checkpoint.display().to_string()),
        sigma2: log_sigma2.map(f64::exp),
        sigma2_history: manifest_near(checkpoint)
            .map(|m| m.history.iter().filter_map(|r| r.sigma2).collect())
            .unwrap_or_default(),
    };
    let dir = cfg.output.join("report");
    let files = uq::emit_report(&dir, &results, &suite.cut_lines, &meta)?;
    cfg.write(&cfg.output)?;
    for r in &results {
        let s = r.summary();
        if let Some(linf) = s.linf {
            log::info!("{}: L-inf {:.4e}", s.name, linf);
        }
    }
    log::info!("wrote {} report files to {}", files.len(), dir.display());
    Ok(())
}

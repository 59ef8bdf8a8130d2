use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wfs_core::grid::{Suite, SuiteId};
use wfs_core::physics::PhysicsModel;
use wfs_core::tensor::Preset;
use wfs_core::train::TrainConfig;

use crate::CliError;

/// Everything a command needs, with defaults expanded before it is written
/// next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub suite: SuiteId,
    /// Square grid size; the suite default when absent.
    pub grid: Option<usize>,
    /// Replaces the physics of every suite member.
    pub physics: Option<PhysicsModel>,
    /// Architecture preset; derived from suite and grid when absent.
    pub preset: Option<Preset>,
    pub train: TrainConfig,
    /// Randomly refilled copies of every training input.
    pub copies: usize,
    /// Train only on members tagged for training when the suite has tags.
    pub train_tagged_only: bool,
    pub mc_samples: usize,
    pub output: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            suite: SuiteId::Diffusion20,
            grid: None,
            physics: None,
            preset: None,
            train: TrainConfig::deterministic(),
            copies: 1024,
            train_tagged_only: true,
            mc_samples: 50,
            output: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Fill derived fields and check consistency.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let grid = self.grid.unwrap_or_else(|| self.suite.default_grid());
        self.grid = Some(grid);
        if self.preset.is_none() {
            self.preset = Some(default_preset(self.suite, grid));
        }
        self.train.seed = self.seed;
        if let Some(p) = &self.physics {
            if !p.is_valid() {
                return Err(CliError::Config(format!("invalid physics parameters {p:?}")));
            }
            if p.dof() != self.suite.physics().dof() {
                return Err(CliError::Config(format!(
                    "physics {} does not fit suite {}",
                    p.name(),
                    self.suite
                )));
            }
        }
        if self.copies == 0 {
            return Err(CliError::Config("copies must be at least 1".into()));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(self)
    }

    pub fn grid(&self) -> usize {
        self.grid.unwrap_or_else(|| self.suite.default_grid())
    }

    pub fn preset(&self) -> Preset {
        self.preset.unwrap_or_else(|| default_preset(self.suite, self.grid()))
    }

    /// Suite members with the physics override applied.
    pub fn suite(&self) -> Suite {
        let mut suite = Suite::build(self.suite);
        suite.grid = self.grid();
        if let Some(p) = self.physics {
            for s in &mut suite.specs {
                s.physics = p;
            }
        }
        suite
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

pub fn default_preset(suite: SuiteId, grid: usize) -> Preset {
    match suite {
        SuiteId::Diffusion20 => Preset::Diffusion,
        SuiteId::Elasticity30Linear | SuiteId::Elasticity30Nonlinear | SuiteId::NonlinearSteps => {
            Preset::Elasticity
        }
        SuiteId::Octagon1 if grid == 64 => Preset::Octagon64,
        SuiteId::Octagon1 => Preset::Octagon,
        SuiteId::LshapeSteps => Preset::LShape,
    }
}

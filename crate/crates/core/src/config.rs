//! Run configuration: one TOML document drives every command.
//!
//! Resolution ties the sections together: the solver's `alpha` becomes
//! `P / N` (zero without a width), the sampler inherits width, temperature
//! and `sigma2` from the model and solver, and the top-level seed feeds the
//! data, heads, solver and sampler.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::data::{HmcTaskConfig, OneShotConfig, SyntheticEpisodeConfig};
use crate::error::{Error, Result};
use crate::io::Digest;
use crate::model::ReadoutMode;
use crate::paths::PathIndex;
use crate::predictor::default_temperature_grid;
use crate::sampler::HmcConfig;
use crate::solver::SolverConfig;

/// Offset between the top-level seed and the random-head seed, so head
/// weights never share a stream with the data.
pub const HEAD_SEED_OFFSET: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width `N`; absent means the infinite-width limit.
    pub width: Option<usize>,
    pub heads: usize,
    pub depth: usize,
    /// Query/key dimension `G` of randomly initialised query-key heads.
    pub query_dim: usize,
    pub readout: ReadoutMode,
    /// Keep only these paths, as one-based labels like `"(1,2)"`.
    pub paths: Option<Vec<String>>,
    /// Normalise a path subset by its own size instead of `H^L`.
    pub renormalize_paths: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: None,
            heads: 2,
            depth: 2,
            query_dim: 16,
            readout: ReadoutMode::SingleToken(1),
            paths: None,
            renormalize_paths: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Hmc,
    OneShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneShotTask {
    pub shot: OneShotConfig,
    pub source: SyntheticEpisodeConfig,
    /// Leading episodes used for training; the rest form the test split.
    pub train_count: usize,
}

impl Default for OneShotTask {
    fn default() -> Self {
        Self {
            shot: OneShotConfig::default(),
            source: SyntheticEpisodeConfig::default(),
            train_count: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub hmc: HmcTaskConfig,
    pub one_shot: OneShotTask,
}

impl TaskConfig {
    pub fn train_count(&self) -> usize {
        match self.kind {
            TaskKind::Hmc => self.hmc.train_count,
            TaskKind::OneShot => self.one_shot.train_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub temperatures: Vec<f64>,
    /// Leading test examples used for validation; accuracy at the chosen
    /// temperature is reported on the remainder.
    pub validation_count: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            temperatures: default_temperature_grid(),
            validation_count: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Heads to remove, as one-based `[layer, head]` pairs.
    pub heads: Vec<[usize; 2]>,
    /// Cap on the ordered sweep; absent means all but one head.
    pub max_removed: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub alphas: Vec<f64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 1.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub out_dir: PathBuf,
    /// Inputs; default to the files `gen-data` writes into `out_dir`.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub attention: Option<PathBuf>,
    /// Also export datasets and features as CSV.
    pub export_csv: bool,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            train: None,
            test: None,
            attention: None,
            export_csv: false,
        }
    }
}

impl FileConfig {
    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn train_path(&self) -> PathBuf {
        self.train.clone().unwrap_or_else(|| self.out("train.apkd"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.test.clone().unwrap_or_else(|| self.out("test.apkd"))
    }

    pub fn attention_path(&self) -> PathBuf {
        self.attention.clone().unwrap_or_else(|| self.out("attention.apkw"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub solver: SolverConfig,
    pub sampler: HmcConfig,
    pub sweep: SweepConfig,
    pub prune: PruneConfig,
    pub compare: CompareConfig,
    pub files: FileConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn head_seed(&self) -> u64 {
        self.seed.wrapping_add(HEAD_SEED_OFFSET)
    }

    /// Propagate shared settings and validate.
    pub fn resolve(mut self) -> Result<Self> {
        let seed = self.seed;
        self.task.hmc.seed = seed;
        self.task.one_shot.shot.seed = seed;
        self.task.one_shot.source.seed = seed.wrapping_add(1);
        self.solver.seed = seed;
        self.sampler.seed = seed;
        let p = self.task.train_count();
        self.solver.alpha = match self.model.width {
            Some(0) => return Err(Error::Config("model.width must be >= 1".into())),
            Some(n) => p as f64 / n as f64,
            None => 0.0,
        };
        if let Some(n) = self.model.width {
            self.sampler.width = n;
        }
        self.sampler.temperature = self.solver.temperature;
        self.sampler.sigma2 = self.solver.sigma2;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model.heads == 0 || self.model.depth == 0 || self.model.query_dim == 0 {
            return bad("model.heads, model.depth and model.query_dim must be >= 1".into());
        }
        if self.task.kind == TaskKind::Hmc && (self.model.heads, self.model.depth) != (2, 2) {
            return bad("the hmc task uses two layers of two heads".into());
        }
        match self.task.kind {
            TaskKind::Hmc => self.task.hmc.validate()?,
            TaskKind::OneShot => {
                let t = &self.task.one_shot;
                if t.train_count == 0 || t.train_count >= t.source.episodes {
                    return bad("one_shot.train_count must lie in [1, episodes)".into());
                }
            }
        }
        self.solver.validate()?;
        if self.task.train_count() == 0 {
            return bad("train_count must be >= 1".into());
        }
        if self.sweep.temperatures.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return bad("sweep temperatures must be > 0".into());
        }
        for [layer, head] in &self.prune.heads {
            if *layer == 0 || *layer > self.model.depth || *head == 0 || *head > self.model.heads {
                return bad(format!("prune head [{layer}, {head}] is out of range"));
            }
        }
        if let Some(labels) = &self.model.paths {
            if labels.is_empty() {
                return bad("model.paths must not be empty".into());
            }
            self.path_positions()?;
        }
        Ok(())
    }

    /// Flat positions of `model.paths`, in the listed order.
    pub fn path_positions(&self) -> Result<Option<Vec<usize>>> {
        let Some(labels) = &self.model.paths else {
            return Ok(None);
        };
        labels
            .iter()
            .map(|s| {
                let misfit = || Error::Config(format!("path {s} does not fit the model"));
                let p = PathIndex::parse_label(s, self.model.heads).map_err(|_| misfit())?;
                if p.depth() != self.model.depth {
                    return Err(misfit());
                }
                Ok(p.flat(self.model.heads))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Canonical text of the resolved configuration.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn digest(&self) -> Result<Digest> {
        Ok(digest_text(&self.canonical_toml()?))
    }
}

pub fn digest_text(text: &str) -> Digest {
    Sha256::digest(text.as_bytes()).into()
}

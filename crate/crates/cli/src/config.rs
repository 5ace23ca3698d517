use std::path::{Path, PathBuf};

use lensformer::detector::ModelConfig;
use lensformer::lenssim::SimRanges;
use lensformer::metrics::{EvalOptions, StratifyKey, Tpr10Reading};
use lensformer::training::{Stage, TrainConfig};
use lensformer::Parallelism;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "LENSFORMER_SEED";

/// Everything a pipeline run needs, as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives simulation, weight initialisation and shuffling.
    pub seed: u64,
    #[serde(default = "ModelConfig::desk")]
    pub model: ModelConfig,
    pub train: TrainSection,
    pub simulation: SimulationSection,
    pub evaluation: EvalSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::desk(),
            train: TrainSection::default(),
            simulation: SimulationSection::default(),
            evaluation: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub stages: Vec<Stage>,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub augment_rotations: bool,
    pub parallelism: Parallelism,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            stages: t.stages,
            batch_size: t.batch_size,
            val_fraction: t.val_fraction,
            augment_rotations: t.augment_rotations,
            parallelism: t.parallelism,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub n: usize,
    pub lens_fraction: f64,
    /// Keeps only this many bands of the ranges' per-band arrays.
    pub bands: Option<usize>,
    #[serde(default = "SimRanges::desk")]
    pub ranges: SimRanges,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self { n: 1000, lens_fraction: 0.5, bands: None, ranges: SimRanges::desk() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub accuracy_threshold: f64,
    pub thresholds: Vec<f64>,
    pub tpr10_reading: Tpr10Reading,
    pub stratify: Vec<StratifyKey>,
    /// Title of the ROC plot.
    pub title: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self {
            accuracy_threshold: o.accuracy_threshold,
            thresholds: o.thresholds,
            tpr10_reading: o.tpr10_reading,
            stratify: Vec::new(),
            title: "ROC".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub eval_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { data_dir: "data".into(), run_dir: "run".into(), eval_dir: "eval".into() }
    }
}

impl RunConfig {
    /// Reads a config file, naming the offending key on failure.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            CliError::Usage(format!("invalid config {} at `{at}`: {}", path.display(), e.inner()))
        })
    }

    /// Built-in defaults, or the file when given.
    pub fn resolve(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an integer")))?;
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stages: t.stages.clone(),
            batch_size: t.batch_size,
            seed: self.seed,
            val_fraction: t.val_fraction,
            augment_rotations: t.augment_rotations,
            parallelism: t.parallelism,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            accuracy_threshold: self.evaluation.accuracy_threshold,
            thresholds: self.evaluation.thresholds.clone(),
            tpr10_reading: self.evaluation.tpr10_reading,
        }
    }

    /// Simulator ranges after band selection.
    pub fn ranges(&self) -> Result<SimRanges, CliError> {
        let r = self.simulation.ranges.clone();
        let r = match self.simulation.bands {
            Some(b) => r.with_bands(b).map_err(CliError::usage)?,
            None => r,
        };
        r.validate().map_err(CliError::usage)?;
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}

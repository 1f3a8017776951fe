//! TOML run configuration shared by the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ablation::AblationRow;
use super::dataset::Schema;
use super::synthetic::SyntheticConfig;
use super::train::TrainConfig;
use super::HarnessError;
use crate::attention::ModelConfig;
use crate::distill::DistillConfig;
use crate::teacher::TeacherConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// CSV to load; the synthetic corpus is generated when absent.
    pub path: Option<PathBuf>,
    pub schema: Schema,
    pub synthetic: SyntheticConfig,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { path: None, schema: Schema::default(), synthetic: SyntheticConfig::default(), split_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// SMILES corpus, one per line or a CSV with a `smiles` column. The
    /// dataset's SMILES are used when absent.
    pub corpus: Option<PathBuf>,
    pub batch_size: usize,
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { corpus: None, batch_size: 256, runs: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: vec![0, 1, 2], rows: AblationRow::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Directory for checkpoints, traces, logs and tables.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub teacher_train: TrainConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub bench: BenchConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::desk(),
            teacher: TeacherConfig::default(),
            teacher_train: TrainConfig { epochs: 30, ..TrainConfig::desk() },
            train: TrainConfig::desk(),
            distill: DistillConfig::desk(),
            bench: BenchConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig, HarnessError> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Swaps in the full-size student, layer pairs and optimizer schedule.
    /// The teacher keeps its configured size; the layer pairs then need a
    /// teacher with at least twelve layers.
    pub fn with_paper_settings(mut self) -> RunConfig {
        self.model = ModelConfig::paper();
        self.distill = DistillConfig::paper();
        self.train = TrainConfig { seed: self.train.seed, ..TrainConfig::paper() };
        self.teacher.layers = self.teacher.layers.max(12);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> RunConfig {
        self.train.seed = seed;
        self.teacher_train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.train.validate()?;
        self.teacher_train.validate()?;
        self.distill.validate(self.model.biased_range(), self.teacher.layers)?;
        if self.model.d_k * self.model.heads == 0 || self.model.layers() == 0 {
            return Err(HarnessError::Config("model needs heads, head width and at least one layer".into()));
        }
        Ok(())
    }

    pub fn student_checkpoint(&self) -> PathBuf {
        self.output_dir.join("student.ckpt")
    }

    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.output_dir.join("teacher.ckpt")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.output_dir.join("teacher.trace")
    }
}

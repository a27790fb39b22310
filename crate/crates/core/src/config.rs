//! File-backed experiment configuration (TOML, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mtlam::MemoryConfig;
use crate::pipeline::{ModelConfig, TrainConfig, TABLE_SUBSETS};
use crate::temporal::TemporalStackConfig;
use crate::toytask::{SplitSizes, ToyTaskConfig};

/// Dataset sizes and the seed of the split sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub split_seed: u64,
}

impl DataSection {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

/// Architecture; input width and class count come from the toy task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub levels: Vec<usize>,
    pub pool_width: usize,
    pub memory: MemoryConfig,
    pub loss_weights: LossWeights,
    pub visual_stack: TemporalStackConfig,
    pub audio_stack: TemporalStackConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub subsets: Vec<Vec<usize>>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            seeds: vec![0, 1, 2],
            subsets: TABLE_SUBSETS.iter().map(|s| s.to_vec()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub toytask: ToyTaskConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    /// The values of `configs/default.toml`.
    fn default() -> Self {
        let dim = 16;
        let stack = TemporalStackConfig::default_stack(dim).expect("default stack is valid");
        ExperimentConfig {
            output_dir: PathBuf::from("runs/default"),
            data: DataSection {
                train: 1024,
                val: 500,
                test: 2000,
                split_seed: 1,
            },
            toytask: ToyTaskConfig::default(),
            model: ModelSection {
                dim,
                levels: vec![1, 2, 3],
                pool_width: 7,
                memory: MemoryConfig::default(),
                loss_weights: LossWeights::default(),
                visual_stack: stack.clone(),
                audio_stack: stack,
            },
            train: TrainConfig::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.toytask.validate()?;
        if self.data.train == 0 || self.data.val == 0 || self.data.test == 0 {
            return Err(Error::config("data", "every split needs at least one sample"));
        }
        self.model_config()?;
        if self.ablation.seeds.is_empty() {
            return Err(Error::config("ablation.seeds", "need at least one seed"));
        }
        for subset in &self.ablation.subsets {
            let mut cfg = self.model_config()?;
            cfg.levels = subset.clone();
            cfg.validate()
                .map_err(|e| Error::config("ablation.subsets", e.to_string()))?;
        }
        Ok(())
    }

    /// Full model config: the `[model]` and `[train]` sections plus the toy
    /// task's input width and vocabulary.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            input_dim: self.toytask.feature_dim,
            classes: self.toytask.vocab_size,
            dim: m.dim,
            visual_stack: m.visual_stack.clone(),
            audio_stack: m.audio_stack.clone(),
            levels: m.levels.clone(),
            memory: m.memory,
            pool_width: m.pool_width,
            loss_weights: m.loss_weights,
            train: self.train.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

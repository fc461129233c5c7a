//! Run configuration: a TOML file with `data`, `model`, `train`, `distill`
//! and `eval` sections. Every key is optional; unknown keys are errors.

use std::path::Path;

use segdistill::distill::TransferConfig;
use segdistill::model::{ModelConfig, ModelKind, DEFAULT_FUSION_MAPS};
use segdistill::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Name of the effective configuration written next to run outputs.
pub const EFFECTIVE_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_dense: usize,
    pub num_sparse: usize,
    pub num_unlabeled: usize,
    /// Labeled mixed-density scenes written to `test/` inside the dataset.
    pub num_test: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// 8 or 11.
    pub classes: usize,
    /// Where teacher caches live; empty means `teacher-cache/` in the
    /// dataset directory.
    pub cache_dir: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { num_dense: 200, num_sparse: 200, num_unlabeled: 100, num_test: 100, width: 64, height: 64, seed: 0, classes: 8, cache_dir: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub num_blocks: usize,
    pub feature_maps: usize,
    pub kernel: usize,
    pub dropout_p: f64,
    /// Fusion head widths when an ensemble is assembled.
    pub fusion_maps: Vec<usize>,
    /// Dense and sparse base checkpoints for `ensemble_fusion` training.
    pub bases: Vec<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Tnet,
            num_blocks: 8,
            feature_maps: 64,
            kernel: 7,
            dropout_p: 0.0,
            fusion_maps: DEFAULT_FUSION_MAPS.to_vec(),
            bases: Vec::new(),
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let base = match self.kind {
            ModelKind::MiniFcn => ModelConfig::mini_fcn(self.feature_maps, self.kernel, num_classes),
            _ => ModelConfig::tnet(self.num_blocks, self.feature_maps, self.kernel, num_classes),
        };
        ModelConfig { dropout_p: self.dropout_p, ..base }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Labeled evaluation set, relative to the dataset directory.
    pub test_dir: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { test_dir: "test".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub distill: TransferConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                Self::parse(&text).map_err(|e| format!("{}: {e}", p.display()))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

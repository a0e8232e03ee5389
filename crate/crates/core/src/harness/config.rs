use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, QicaError, Result};
use crate::loss::LossWeights;
use crate::model::{ModelConfig, TrainingObjective};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

/// Training configuration; the JSON config file uses these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of quantity hypotheses per image (odd).
    pub k: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    /// Overrides `model.text.prompt_depth`.
    pub prompt_depth: usize,
    /// Overrides `model.text.prompt_length`.
    pub prompt_length: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
    pub precision: Precision,
    /// Score all hypotheses against one class token from unconditioned prompts.
    pub shared_vg: bool,
    pub augment: bool,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    /// Relative paths resolve against the config file's directory.
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            optimizer: OptimizerKind::AdamW,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            epochs: 50,
            batch_size: 8,
            k: 5,
            lambda1: 0.1,
            lambda2: 0.05,
            beta: 0.1,
            prompt_depth: model.text.prompt_depth,
            prompt_length: model.text.prompt_length,
            seed: 0,
            freeze_backbone: false,
            precision: Precision::Single,
            shared_vg: false,
            augment: false,
            max_steps: 0,
            train_manifest: None,
            val_manifest: None,
            model,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config: Self = serde_json::from_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for m in [&mut config.train_manifest, &mut config.val_manifest].into_iter().flatten() {
            if m.is_relative() {
                *m = dir.join(&*m);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }

    /// Model configuration with the prompt overrides applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.text.prompt_depth = self.prompt_depth;
        m.text.prompt_length = self.prompt_length;
        m
    }

    pub fn objective(&self) -> TrainingObjective {
        TrainingObjective {
            k: self.k,
            weights: LossWeights {
                lambda_enc: self.lambda1,
                lambda_dec: self.lambda2,
                beta: self.beta,
            },
            shared_vg: self.shared_vg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("beta", self.beta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(QicaError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(QicaError::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(QicaError::Config("batch_size must be at least 1".into()));
        }
        crate::quantity::validate_k(self.k)?;
        self.model_config().validate()
    }
}

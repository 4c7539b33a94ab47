use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{ProposalConfig, SceneConfig};
use crate::discovery::DiscoveryConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::par::Execution;
use crate::sampling::OmegaDenominator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    /// Images per step.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub tau_iou: f64,
    pub tau_drop: f64,
    /// Weight of the contrastive term.
    pub lambda: f64,
    /// Contrastive temperature.
    pub temperature: f64,
    /// Trains the similarity head with the contrastive loss.
    pub wscl: bool,
    pub omega_denominator: OmegaDenominator,
    pub discovery: DiscoveryConfig,
    pub model: ModelConfig,
    pub execution: Execution,
    /// Metric log cadence in steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            batch_size: 2,
            lr: 0.01,
            weight_decay: 1e-4,
            momentum: 0.9,
            tau_iou: 0.5,
            tau_drop: 0.3,
            lambda: 0.03,
            temperature: 0.2,
            wscl: true,
            omega_denominator: OmegaDenominator::Sampled,
            discovery: DiscoveryConfig::default(),
            model: ModelConfig::default(),
            execution: Execution::default(),
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.discovery.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if !(self.tau_iou > 0.0 && self.tau_iou < 1.0) {
            return Err(Error::config("tau_iou must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.tau_drop) {
            return Err(Error::config("tau_drop must lie in [0, 1)"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be nonnegative"));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        Ok(())
    }

    /// Whether a step needs embeddings and the bank at all.
    pub fn needs_bank(&self) -> bool {
        self.wscl || self.discovery.enabled
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub nms: f64,
    pub score_threshold: f64,
    pub max_per_image: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            nms: 0.4,
            score_threshold: 0.01,
            max_per_image: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    #[default]
    AllPoint,
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub ap_mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            ap_mode: ApMode::AllPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding one directory per split.
    pub root: PathBuf,
    pub train_split: String,
    pub test_split: String,
    pub num_train: usize,
    pub num_test: usize,
    pub scene: SceneConfig,
    pub proposals: ProposalConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_split: "train".into(),
            test_split: "test".into(),
            num_train: 500,
            num_test: 100,
            scene: SceneConfig::default(),
            proposals: ProposalConfig::default(),
        }
    }
}

/// Everything a CLI invocation can configure.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.train.validate()?;
        if self.train.model.num_classes != self.data.scene.num_categories {
            return Err(Error::config(format!(
                "model has {} classes but the scene config has {} categories",
                self.train.model.num_classes, self.data.scene.num_categories
            )));
        }
        if !(0.0..=1.0).contains(&self.infer.nms) {
            return Err(Error::config("infer.nms must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(Error::config("eval.iou_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

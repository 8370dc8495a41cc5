//! JSON run configuration.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "task":      { "kind": "cluster-regression", "n_clusters": 8, ... },
//!   "model":     { "depth": 1, "n_expert": 8, "top_k": 2, "d_inner": 16 },
//!   "estimator": { "kind": "sparsemixer_v2", "r_thresh": 0.1, ... },
//!   "train":     { "steps": 5000, "lr": 0.001, "alpha": 0.01, ... }
//! }
//! ```
//!
//! Every section and field may be omitted except `schema_version`; unknown
//! keys are rejected. Estimator fields left out take the defaults of the
//! chosen `kind`. [`RunConfig::resolve`] fills every default, and the
//! resolved form serializes back to a config that parses to itself.

use serde::{Deserialize, Serialize};

use crate::balance::BalanceConfig;
use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, EstimatorKind, InferenceMode};
use crate::model::{MoELayerSpec, ToyModelSpec};
use crate::trainer::{TaskSpec, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub depth: usize,
    pub n_expert: usize,
    pub top_k: usize,
    pub d_inner: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            depth: 1,
            n_expert: 8,
            top_k: 2,
            d_inner: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    #[serde(default = "default_kind")]
    pub kind: EstimatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_thresh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bernoulli_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter_epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub renormalize_topk: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference_mode: Option<InferenceMode>,
}

fn default_kind() -> EstimatorKind {
    EstimatorKind::SparseMixerV2
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self::from(&EstimatorConfig::new(default_kind()))
    }
}

impl From<&EstimatorConfig> for EstimatorSection {
    fn from(c: &EstimatorConfig) -> Self {
        Self {
            kind: c.kind,
            r_thresh: Some(c.r_thresh),
            temperature: Some(c.temperature),
            bernoulli_p: Some(c.bernoulli_p),
            jitter_epsilon: Some(c.jitter_epsilon),
            renormalize_topk: Some(c.renormalize_topk),
            inference_mode: Some(c.inference_mode),
        }
    }
}

impl EstimatorSection {
    pub fn to_config(&self) -> EstimatorConfig {
        let d = EstimatorConfig::new(self.kind);
        EstimatorConfig {
            kind: self.kind,
            r_thresh: self.r_thresh.unwrap_or(d.r_thresh),
            temperature: self.temperature.unwrap_or(d.temperature),
            bernoulli_p: self.bernoulli_p.unwrap_or(d.bernoulli_p),
            jitter_epsilon: self.jitter_epsilon.unwrap_or(d.jitter_epsilon),
            renormalize_topk: self.renormalize_topk.unwrap_or(d.renormalize_topk),
            inference_mode: self.inference_mode.unwrap_or(d.inference_mode),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            task: TaskSpec::default(),
            model: ModelSection::default(),
            estimator: EstimatorSection::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The same config with every estimator default written out.
    pub fn resolve(&self) -> Self {
        Self {
            estimator: EstimatorSection::from(&self.estimator.to_config()),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Every failure is reported as [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        let check = || -> Result<()> {
            self.task.validate()?;
            self.estimator.to_config().validate()?;
            self.train.validate()?;
            self.model_spec().validate()
        };
        check().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })
    }

    pub fn model_spec(&self) -> ToyModelSpec {
        let n = self.model.n_expert;
        ToyModelSpec::uniform(
            self.model.depth,
            MoELayerSpec {
                n_expert: n,
                top_k: self.model.top_k,
                d_model: self.task.d_model,
                d_inner: self.model.d_inner,
                estimator: self.estimator.to_config(),
                balance: BalanceConfig {
                    alpha: self.train.alpha,
                    scope: self.train.scope,
                    n,
                },
            },
            self.task.d_out,
        )
    }
}

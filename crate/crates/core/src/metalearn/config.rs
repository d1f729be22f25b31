use serde::{Deserialize, Serialize};

use super::MetaError;
use crate::imitation::LocalAdaptConfig;
use crate::numgrad::DiffOrder;

/// Which part of the memory path is switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Memory reads return uniformly random slots.
    NoSimilaritySearch,
    /// The predicted value is the mean of the retrieved values.
    NoValuePredictor,
    /// The value predictor is applied with its global parameters.
    NoLocalAdaptation,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::NoSimilaritySearch,
        Ablation::NoValuePredictor,
        Ablation::NoLocalAdaptation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoSimilaritySearch => "no-similarity-search",
            Ablation::NoValuePredictor => "no-value-predictor",
            Ablation::NoLocalAdaptation => "no-local-adaptation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Memiml,
    Maml,
    /// Joint pretraining on all training data, then gradient steps on each
    /// test support set.
    Finetune,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Memiml => "memiml",
            Method::Maml => "maml",
            Method::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Method::Memiml, Method::Maml, Method::Finetune]
            .into_iter()
            .find(|m| m.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterOptimizer {
    Sgd,
    #[default]
    Adam,
}

impl OuterOptimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            OuterOptimizer::Sgd => "sgd",
            OuterOptimizer::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OuterOptimizer::Sgd),
            "adam" => Some(OuterOptimizer::Adam),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub method: Method,
    /// Inner-loop step size on the support set.
    pub inner_lr: f64,
    pub inner_steps: usize,
    /// Outer step size on the initialization.
    pub outer_lr: f64,
    pub optimizer: OuterOptimizer,
    /// Step size of the global value-predictor update.
    pub global_lr: f64,
    pub local: LocalAdaptConfig,
    pub n_neighbors: usize,
    pub store_ratio: f64,
    pub beta: f64,
    pub order: DiffOrder,
    pub ablation: Ablation,
    /// Tasks per outer step.
    pub meta_batch: usize,
    /// Width of the base model's hidden layers.
    pub hidden: usize,
    pub key_dim: usize,
    /// Width of the value predictor's hidden layer.
    pub vp_hidden: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            method: Method::Memiml,
            inner_lr: 0.01,
            inner_steps: 1,
            outer_lr: 3e-4,
            optimizer: OuterOptimizer::Adam,
            global_lr: 0.01,
            local: LocalAdaptConfig::default(),
            n_neighbors: 20,
            store_ratio: 0.8,
            beta: 0.2,
            order: DiffOrder::Second,
            ablation: Ablation::None,
            meta_batch: 4,
            hidden: 40,
            key_dim: 16,
            vp_hidden: 64,
            seed: 0,
        }
    }
}

fn nonneg(name: &str, v: f64) -> Result<(), MetaError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(MetaError::Config(format!("{name} must be finite and nonnegative, got {v}")))
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        nonneg("inner_lr", self.inner_lr)?;
        nonneg("outer_lr", self.outer_lr)?;
        nonneg("global_lr", self.global_lr)?;
        nonneg("local.gamma", self.local.gamma)?;
        nonneg("local.step_size", self.local.step_size)?;
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(MetaError::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.store_ratio > 0.0 && self.store_ratio <= 1.0) {
            return Err(MetaError::Config(format!(
                "store_ratio must lie in (0, 1], got {}",
                self.store_ratio
            )));
        }
        if self.n_neighbors == 0 {
            return Err(MetaError::Config("n_neighbors must be at least 1".into()));
        }
        if self.meta_batch == 0 {
            return Err(MetaError::Config("meta_batch must be at least 1".into()));
        }
        if self.hidden == 0 || self.key_dim == 0 || self.vp_hidden == 0 {
            return Err(MetaError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Whether the memory path contributes to predictions.
    pub fn uses_memory(&self) -> bool {
        self.method == Method::Memiml
    }
}

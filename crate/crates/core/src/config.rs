use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimisation and loss settings shared by every training scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Hidden widths of the feature extractor; the last one is the feature size.
    pub extractor_hidden: Vec<usize>,
    /// Hidden widths of each label predictor (empty = linear head).
    pub head_hidden: Vec<usize>,
    /// Draw class-balanced source mini-batches.
    pub resample: bool,
    pub seed: u64,
    pub adversarial: AdversarialConfig,
    pub moment: MomentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            extractor_hidden: vec![32, 32],
            head_hidden: Vec::new(),
            resample: false,
            seed: 0,
            adversarial: AdversarialConfig::default(),
            moment: MomentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with the reduced learning rate used for single-source runs.
    pub fn single_source() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.extractor_hidden.is_empty() || self.extractor_hidden.contains(&0) {
            return Err(Error::Config("extractor_hidden needs at least one non-zero width".into()));
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::Config("head_hidden widths must be non-zero".into()));
        }
        self.adversarial.validate()?;
        self.moment.validate()
    }

    pub fn feature_dim(&self) -> usize {
        *self.extractor_hidden.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaSchedule {
    Constant,
    /// Linear ramp from 0 to `lambda` over the first `ramp_fraction` of steps.
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// (1/γ)·log((1/K)·Σ exp(γ·e_k)), between the mean and the max of e_k
    Soft,
    /// max_k e_k
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialConfig {
    /// Gradient-reversal scale and domain-loss weight.
    pub lambda: f64,
    pub schedule: LambdaSchedule,
    pub ramp_fraction: f64,
    pub discriminator_hidden: Vec<usize>,
    /// Temperature of the multi-source soft maximum.
    pub gamma: f64,
    pub aggregation: Aggregation,
    /// Alignment epochs of the two-stage method (stage 1 uses `epochs`).
    pub adda_stage2_epochs: usize,
    /// Stage-2 learning rate; falls back to the main learning rate.
    pub adda_learning_rate: Option<f64>,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            lambda: 1.0,
            schedule: LambdaSchedule::Ramp,
            ramp_fraction: 0.2,
            discriminator_hidden: vec![16],
            gamma: 10.0,
            aggregation: Aggregation::Soft,
            adda_stage2_epochs: 100,
            adda_learning_rate: None,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return Err(Error::Config(format!("ramp_fraction must lie in (0, 1], got {}", self.ramp_fraction)));
        }
        if self.discriminator_hidden.contains(&0) {
            return Err(Error::Config("discriminator_hidden widths must be non-zero".into()));
        }
        if let Some(lr) = self.adda_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("adda_learning_rate must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    /// Reversal coefficient at optimisation step `step` of `total`.
    pub fn lambda_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LambdaSchedule::Constant => self.lambda,
            LambdaSchedule::Ramp => {
                let ramp_steps = self.ramp_fraction * total as f64;
                if ramp_steps <= 0.0 {
                    self.lambda
                } else {
                    self.lambda * (step as f64 / ramp_steps).min(1.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleRule {
    Uniform,
    /// Weights proportional to each head's accuracy on held-out data of its
    /// own source.
    SourceAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentConfig {
    /// Weight of the moment-alignment term.
    pub eta: f64,
    /// Weight of the classifier-discrepancy term.
    pub rho: f64,
    pub ensemble: EnsembleRule,
    /// Fraction of each source held out to score heads under
    /// [`EnsembleRule::SourceAccuracy`].
    pub holdout_ratio: f64,
}

impl Default for MomentConfig {
    fn default() -> Self {
        MomentConfig {
            eta: 1.0,
            rho: 0.1,
            ensemble: EnsembleRule::Uniform,
            holdout_ratio: 0.1,
        }
    }
}

impl MomentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be non-negative, got {}", self.eta)));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be non-negative, got {}", self.rho)));
        }
        if !(self.holdout_ratio > 0.0 && self.holdout_ratio < 1.0) {
            return Err(Error::Config(format!("holdout_ratio must lie in (0, 1), got {}", self.holdout_ratio)));
        }
        Ok(())
    }
}

//! Unsupervised domain adaptation toolkit: synthetic multi-domain data,
//! small MLP classifiers with hand-written backpropagation, adversarial and
//! moment-matching adaptation, fairness metrics, shift diagnostics and an
//! experiment harness.

pub mod adversarial;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod moment;
pub mod nn;
pub mod shift;
pub mod train;

pub use config::TrainConfig;
pub use data::{DomainDataset, DomainSpec, Unlabeled, UnlabeledDataset};
pub use error::{Error, Result};
pub use train::{Model, RunRecord, TrainOutput};

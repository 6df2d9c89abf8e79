//! Shared training machinery: seeded batch streams, the trained-model
//! container, run records, and the no-adaptation (ERM) baseline.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{DomainDataset, WeightedSampler};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, sgd_step, softmax, Activation, Mlp, OptimizerState, Prediction};

/// Independent random streams derived from one run seed.
pub(crate) mod stream {
    pub const INIT: u64 = 0;
    pub const SOURCE: u64 = 1;
    pub const TARGET: u64 = 2;
    pub const DISCRIMINATOR: u64 = 3;
    pub const ALIGN_SOURCE: u64 = 4;
    pub const HOLDOUT: u64 = 5;
    /// Source `k` of a multi-source run uses `SOURCE_BASE + k`.
    pub const SOURCE_BASE: u64 = 16;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Endless supply of row indices: shuffled passes without replacement, or
/// class-balanced draws with replacement.
pub(crate) struct IndexStream {
    order: Vec<usize>,
    pos: usize,
    sampler: Option<WeightedSampler>,
    rng: ChaCha8Rng,
}

impl IndexStream {
    pub fn shuffled(n: usize, rng: ChaCha8Rng) -> Self {
        IndexStream {
            order: (0..n).collect(),
            pos: n,
            sampler: None,
            rng,
        }
    }

    pub fn for_source(data: &DomainDataset, resample: bool, rng: ChaCha8Rng) -> Result<Self> {
        let mut s = IndexStream::shuffled(data.len(), rng);
        if resample {
            s.sampler = Some(WeightedSampler::new(&data.labels, data.n_classes)?);
        }
        Ok(s)
    }

    pub fn take(&mut self, count: usize) -> Vec<usize> {
        if let Some(sampler) = &self.sampler {
            return sampler.draw(&mut self.rng, count);
        }
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let k = (count - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + k]);
            self.pos += k;
        }
        out
    }
}

/// Batch sizes of one epoch over `n` rows: full batches, then the remainder.
pub(crate) fn epoch_batches(n: usize, batch: usize) -> Vec<usize> {
    let mut sizes = vec![batch; n / batch];
    if !n.is_multiple_of(batch) {
        sizes.push(n % batch);
    }
    sizes
}

pub(crate) fn rows(x: ArrayView2<'_, f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

pub(crate) fn build_extractor(input_dim: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Mlp {
    let mut sizes = vec![input_dim];
    sizes.extend(&cfg.extractor_hidden);
    Mlp::new(&sizes, Activation::Relu, Activation::Relu, rng)
}

pub(crate) fn build_head(n_classes: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Mlp {
    let mut sizes = vec![cfg.feature_dim()];
    sizes.extend(&cfg.head_hidden);
    sizes.push(n_classes);
    Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng)
}

pub(crate) fn build_discriminator(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Mlp {
    let mut sizes = vec![cfg.feature_dim()];
    sizes.extend(&cfg.adversarial.discriminator_hidden);
    sizes.push(1);
    Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng)
}

/// A trained predictor: one feature extractor and one or more label heads
/// whose softmax outputs are mixed with `head_weights`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub extractor: Mlp,
    pub heads: Vec<Mlp>,
    pub head_weights: Vec<f64>,
}

impl Model {
    pub fn single(extractor: Mlp, head: Mlp) -> Self {
        Model {
            extractor,
            heads: vec![head],
            head_weights: vec![1.0],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.heads[0].output_dim()
    }

    pub fn features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.extractor.apply(x)
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Prediction> {
        crate::moment::ensemble_predict(&self.extractor, &self.heads, &self.head_weights, x)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean classification loss over the epoch's steps (summed over sources
    /// for multi-head training).
    pub classification_loss: f64,
    /// Mean domain loss of each discriminator.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub domain_losses: Vec<f64>,
    /// Mean moment distance of each aligned pair, in [`RunRecord::moment_pairs`] order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub moment_terms: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discrepancy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator_accuracy: Option<f64>,
    /// Mean value of the full objective.
    pub total_loss: f64,
}

/// Per-run training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scheme: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage2_epochs: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub moment_pairs: Vec<String>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_ref: Option<String>,
}

impl RunRecord {
    pub fn new(scheme: impl Into<String>, config: &TrainConfig) -> Self {
        RunRecord {
            scheme: scheme.into(),
            config: config.clone(),
            seed: config.seed,
            epochs: Vec::new(),
            stage2_epochs: Vec::new(),
            moment_pairs: Vec::new(),
            warnings: Vec::new(),
            model_ref: None,
        }
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.total_loss)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub record: RunRecord,
}

/// Serialised model plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub scheme: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub model: Model,
}

impl ModelFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        file.model.extractor.validate()?;
        for head in &file.model.heads {
            head.validate()?;
        }
        Ok(file)
    }
}

pub(crate) fn check_loss(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, loss })
    }
}

/// Attaches the epoch index to optimiser failures.
pub(crate) fn at_epoch(err: Error, epoch: usize) -> Error {
    match err {
        Error::NonFiniteGradient { .. } => Error::Divergence { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Mutable state of a single-head classifier under training.
pub(crate) struct Classifier {
    pub extractor: Mlp,
    pub head: Mlp,
    pub opt_extractor: OptimizerState,
    pub opt_head: OptimizerState,
}

impl Classifier {
    pub fn init(input_dim: usize, n_classes: usize, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = rng_for(cfg.seed, stream::INIT);
        let extractor = build_extractor(input_dim, cfg, &mut rng);
        let head = build_head(n_classes, cfg, &mut rng);
        let opt_extractor = OptimizerState::new("extractor", &extractor, cfg.learning_rate, cfg.momentum)?;
        let opt_head = OptimizerState::new("head", &head, cfg.learning_rate, cfg.momentum)?;
        Ok(Classifier {
            extractor,
            head,
            opt_extractor,
            opt_head,
        })
    }
}

pub(crate) fn check_source(data: &DomainDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.validate()
}

/// Supervised training on the source only.
pub fn train_erm(source: &DomainDataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    check_source(source)?;
    let mut net = Classifier::init(source.dim(), source.n_classes, cfg)?;
    let mut batches = IndexStream::for_source(source, cfg.resample, rng_for(cfg.seed, stream::SOURCE))?;
    let mut record = RunRecord::new("erm", cfg);
    let x = source.features.view();
    for epoch in 0..cfg.epochs {
        let sizes = epoch_batches(source.len(), cfg.batch_size);
        let mut total = 0.0;
        for &size in &sizes {
            let idx = batches.take(size);
            let xb = rows(x, &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| source.labels[i]).collect();
            let f_acts = net.extractor.forward_unchecked(xb.view());
            let h_acts = net.head.forward_unchecked(f_acts.output().view());
            let (loss, g_logits) = cross_entropy(h_acts.output(), &yb)?;
            check_loss(loss, epoch)?;
            let (g_head, g_feat) = net.head.backward(&h_acts, &g_logits);
            let (g_ext, _) = net.extractor.backward(&f_acts, &g_feat);
            sgd_step(&mut net.head, &g_head, &mut net.opt_head).map_err(|e| at_epoch(e, epoch))?;
            sgd_step(&mut net.extractor, &g_ext, &mut net.opt_extractor).map_err(|e| at_epoch(e, epoch))?;
            total += loss;
        }
        let mean = total / sizes.len() as f64;
        record.epochs.push(EpochLog {
            epoch,
            classification_loss: mean,
            total_loss: mean,
            ..EpochLog::default()
        });
    }
    Ok(TrainOutput {
        model: Model::single(net.extractor, net.head),
        record,
    })
}

/// Class probabilities of a single head, without the ensemble machinery.
pub fn head_scores(extractor: &Mlp, head: &Mlp, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let features = extractor.apply(x)?;
    Ok(softmax(&head.apply(features.view())?))
}

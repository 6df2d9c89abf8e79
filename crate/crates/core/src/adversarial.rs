//! Adversarial feature alignment.
//!
//! * DANN: one shared extractor trained through a gradient-reversal layer
//!   against a source-vs-target discriminator.
//! * ADDA: source pre-training, then a separate target extractor trained to
//!   fool a discriminator while the source side stays frozen.
//! * MDAN: one discriminator per source; per-source losses
//!   `e_k = CE_k + λ·D_k` combined by a soft (or hard) maximum.
//!
//! DANN is the single-source case of the MDAN step. Discriminators always
//! descend their own (aggregation-weighted) domain loss; the reversal
//! coefficient only scales what flows back into the extractor.

use ndarray::{concatenate, s, Array2, Axis};

use crate::config::{Aggregation, TrainConfig};
use crate::data::{DomainDataset, Unlabeled};
use crate::error::{Error, Result};
use crate::nn::{binary_cross_entropy, cross_entropy, sgd_step, Mlp, MlpGrads, OptimizerState};
use crate::train::{
    at_epoch, build_discriminator, check_loss, check_source, epoch_batches, rng_for, rows, stream, train_erm,
    Classifier, EpochLog, IndexStream, Model, RunRecord, TrainOutput,
};

/// Identity forward, `−λ`-scaled backward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReverse {
    pub lambda: f64,
}

impl GradReverse {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Invalid(format!("reversal coefficient must be non-negative, got {lambda}")));
        }
        Ok(GradReverse { lambda })
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.clone()
    }

    pub fn backward(&self, upstream: &Array2<f64>) -> Array2<f64> {
        upstream * -self.lambda
    }
}

/// Combined value and per-source weights `∂value/∂e_k`.
///
/// The soft rule is `(1/γ)·log((1/K) Σ_k exp(γ·e_k))`, which lies between
/// the mean (γ → 0⁺) and the maximum (γ → ∞) of `e`.
pub fn aggregate_losses(e: &[f64], rule: Aggregation, gamma: f64) -> (f64, Vec<f64>) {
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    match rule {
        Aggregation::Hard => {
            let k = e.iter().position(|&v| v == max).unwrap_or(0);
            let mut w = vec![0.0; e.len()];
            w[k] = 1.0;
            (max, w)
        }
        Aggregation::Soft => {
            let exps: Vec<f64> = e.iter().map(|&v| (gamma * (v - max)).exp()).collect();
            let total: f64 = exps.iter().sum();
            let value = max + (total / e.len() as f64).ln() / gamma;
            (value, exps.into_iter().map(|x| x / total).collect())
        }
    }
}

/// One labelled source mini-batch.
#[derive(Debug, Clone)]
pub struct SourceBatch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AdversarialGrads {
    /// Aggregated objective value.
    pub value: f64,
    pub classification: Vec<f64>,
    pub domain: Vec<f64>,
    pub weights: Vec<f64>,
    /// Fraction of source and target rows each discriminator gets right.
    pub discriminator_accuracy: Vec<f64>,
    pub extractor: MlpGrads,
    pub head: MlpGrads,
    pub discriminators: Vec<MlpGrads>,
}

/// Gradients of one multi-source adversarial step.
///
/// Source rows carry domain label 1, target rows 0. The extractor receives
/// `Σ_k w_k (∂CE_k − λ ∂D_k)`, the head `Σ_k w_k ∂CE_k` and discriminator `k`
/// `w_k ∂D_k`.
pub fn adversarial_gradients(
    extractor: &Mlp,
    head: &Mlp,
    discriminators: &[Mlp],
    sources: &[SourceBatch],
    target: &Array2<f64>,
    lambda: f64,
    rule: Aggregation,
    gamma: f64,
) -> Result<AdversarialGrads> {
    if sources.len() != discriminators.len() || sources.is_empty() {
        return Err(Error::Invalid(format!(
            "{} source batches for {} discriminators",
            sources.len(),
            discriminators.len()
        )));
    }
    let reverse = GradReverse::new(lambda)?;
    let t_acts = extractor.forward(target.view())?;
    let n_t = target.nrows();

    let mut classification = Vec::with_capacity(sources.len());
    let mut domain = Vec::with_capacity(sources.len());
    let mut accuracy = Vec::with_capacity(sources.len());
    let mut per_source = Vec::with_capacity(sources.len());
    for (batch, disc) in sources.iter().zip(discriminators) {
        let s_acts = extractor.forward(batch.features.view())?;
        let h_acts = head.forward(s_acts.output().view())?;
        let (ce, g_logits) = cross_entropy(h_acts.output(), &batch.labels)?;
        let (g_head, g_feat_cls) = head.backward(&h_acts, &g_logits);

        let n_s = batch.features.nrows();
        let d_in = concatenate![Axis(0), *s_acts.output(), *t_acts.output()];
        let d_acts = disc.forward(d_in.view())?;
        let targets: Vec<f64> = (0..n_s + n_t).map(|i| if i < n_s { 1.0 } else { 0.0 }).collect();
        let (bce, g_d) = binary_cross_entropy(d_acts.output(), &targets);
        let (g_disc, g_din) = disc.backward(&d_acts, &g_d);
        let correct = d_acts
            .output()
            .column(0)
            .iter()
            .zip(&targets)
            .filter(|(&z, &t)| (z > 0.0) == (t > 0.5))
            .count();

        classification.push(ce);
        domain.push(bce);
        accuracy.push(correct as f64 / (n_s + n_t) as f64);
        per_source.push((s_acts, g_head, g_feat_cls, g_disc, g_din));
    }

    let e: Vec<f64> = classification.iter().zip(&domain).map(|(c, d)| c + lambda * d).collect();
    let (value, weights) = aggregate_losses(&e, rule, gamma);

    let mut g_extractor = extractor.zero_grads();
    let mut g_head_total = head.zero_grads();
    let mut g_target_feat = Array2::zeros(t_acts.output().raw_dim());
    let mut g_discs = Vec::with_capacity(sources.len());
    for (w, (s_acts, mut g_head, g_feat_cls, mut g_disc, g_din)) in weights.iter().zip(per_source) {
        let n_s = s_acts.output().nrows();
        let reversed = reverse.backward(&g_din);
        let g_src = (&g_feat_cls + &reversed.slice(s![..n_s, ..])) * *w;
        g_target_feat.scaled_add(*w, &reversed.slice(s![n_s.., ..]));
        let (g_ext_src, _) = extractor.backward(&s_acts, &g_src);
        g_extractor.add_assign(&g_ext_src);
        g_head.scale(*w);
        g_head_total.add_assign(&g_head);
        g_disc.scale(*w);
        g_discs.push(g_disc);
    }
    let (g_ext_tgt, _) = extractor.backward(&t_acts, &g_target_feat);
    g_extractor.add_assign(&g_ext_tgt);

    Ok(AdversarialGrads {
        value,
        classification,
        domain,
        weights,
        discriminator_accuracy: accuracy,
        extractor: g_extractor,
        head: g_head_total,
        discriminators: g_discs,
    })
}

fn check_target(target: &Unlabeled<'_>, dim: usize) -> Result<()> {
    if target.is_empty() {
        return Err(Error::Invalid(format!("target domain `{}` is empty", target.domain_id)));
    }
    if target.dim() != dim {
        return Err(Error::Shape(format!(
            "target has dim {} but sources have dim {dim}",
            target.dim()
        )));
    }
    Ok(())
}

struct Discriminators {
    nets: Vec<Mlp>,
    opts: Vec<OptimizerState>,
}

impl Discriminators {
    fn init(count: usize, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = rng_for(cfg.seed, stream::DISCRIMINATOR);
        let nets: Vec<Mlp> = (0..count).map(|_| build_discriminator(cfg, &mut rng)).collect();
        let opts = nets
            .iter()
            .enumerate()
            .map(|(k, d)| OptimizerState::new(format!("discriminator{k}"), d, cfg.learning_rate, cfg.momentum))
            .collect::<Result<_>>()?;
        Ok(Discriminators { nets, opts })
    }
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    classification: f64,
    total: f64,
    domain: Vec<f64>,
    accuracy: f64,
}

impl EpochAccumulator {
    fn add(&mut self, g: &AdversarialGrads) {
        self.steps += 1;
        self.classification += g.classification.iter().zip(&g.weights).map(|(c, w)| c * w).sum::<f64>();
        self.total += g.value;
        if self.domain.is_empty() {
            self.domain = vec![0.0; g.domain.len()];
        }
        for (acc, d) in self.domain.iter_mut().zip(&g.domain) {
            *acc += d;
        }
        self.accuracy += g.discriminator_accuracy.iter().sum::<f64>() / g.discriminator_accuracy.len() as f64;
    }

    fn finish(self, epoch: usize) -> EpochLog {
        let n = self.steps.max(1) as f64;
        EpochLog {
            epoch,
            classification_loss: self.classification / n,
            domain_losses: self.domain.into_iter().map(|d| d / n).collect(),
            discriminator_accuracy: Some(self.accuracy / n),
            total_loss: self.total / n,
            ..EpochLog::default()
        }
    }
}

fn apply_step(
    net: &mut Classifier,
    discs: &mut Discriminators,
    grads: &AdversarialGrads,
    epoch: usize,
) -> Result<()> {
    sgd_step(&mut net.head, &grads.head, &mut net.opt_head).map_err(|e| at_epoch(e, epoch))?;
    sgd_step(&mut net.extractor, &grads.extractor, &mut net.opt_extractor).map_err(|e| at_epoch(e, epoch))?;
    for ((d, g), opt) in discs.nets.iter_mut().zip(&grads.discriminators).zip(&mut discs.opts) {
        sgd_step(d, g, opt).map_err(|e| at_epoch(e, epoch))?;
    }
    Ok(())
}

/// Domain-adversarial training through gradient reversal.
///
/// Source batching matches [`train_erm`] step for step, so with `λ = 0` the
/// extractor and head follow the ERM trajectory exactly.
pub fn train_dann(source: &DomainDataset, target: Unlabeled<'_>, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    check_source(source)?;
    check_target(&target, source.dim())?;
    let mut net = Classifier::init(source.dim(), source.n_classes, cfg)?;
    let mut discs = Discriminators::init(1, cfg)?;
    let mut src_stream = IndexStream::for_source(source, cfg.resample, rng_for(cfg.seed, stream::SOURCE))?;
    let mut tgt_stream = IndexStream::shuffled(target.len(), rng_for(cfg.seed, stream::TARGET));
    let sizes = epoch_batches(source.len(), cfg.batch_size);
    let total_steps = cfg.epochs * sizes.len();
    let adv = &cfg.adversarial;
    let mut record = RunRecord::new("dann", cfg);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut acc = EpochAccumulator::default();
        for &size in &sizes {
            let idx = src_stream.take(size);
            let batch = SourceBatch {
                features: rows(source.features.view(), &idx),
                labels: idx.iter().map(|&i| source.labels[i]).collect(),
            };
            let xt = rows(target.features, &tgt_stream.take(size));
            let lambda = adv.lambda_at(step, total_steps);
            let grads = adversarial_gradients(
                &net.extractor,
                &net.head,
                &discs.nets,
                std::slice::from_ref(&batch),
                &xt,
                lambda,
                adv.aggregation,
                adv.gamma,
            )?;
            check_loss(grads.value, epoch)?;
            apply_step(&mut net, &mut discs, &grads, epoch)?;
            acc.add(&grads);
            step += 1;
        }
        record.epochs.push(acc.finish(epoch));
    }
    Ok(TrainOutput {
        model: Model::single(net.extractor, net.head),
        record,
    })
}

/// Multi-source adversarial training with one discriminator per source.
pub fn train_mdan(sources: &[&DomainDataset], target: Unlabeled<'_>, cfg: &TrainConfig) -> Result<TrainOutput> {
    if sources.len() < 2 {
        return Err(Error::Invalid(format!(
            "multi-source adversarial training needs at least 2 sources, got {}; use train_dann for a single source",
            sources.len()
        )));
    }
    cfg.validate()?;
    let dim = sources[0].dim();
    let n_classes = sources[0].n_classes;
    for s in sources {
        check_source(s)?;
        if s.dim() != dim || s.n_classes != n_classes {
            return Err(Error::Shape(format!("source `{}` does not share dim/label space", s.domain_id)));
        }
    }
    check_target(&target, dim)?;

    let mut net = Classifier::init(dim, n_classes, cfg)?;
    let mut discs = Discriminators::init(sources.len(), cfg)?;
    let mut src_streams = sources
        .iter()
        .enumerate()
        .map(|(k, s)| IndexStream::for_source(s, cfg.resample, rng_for(cfg.seed, stream::SOURCE_BASE + k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut tgt_stream = IndexStream::shuffled(target.len(), rng_for(cfg.seed, stream::TARGET));
    let largest = sources.iter().map(|s| s.len()).max().unwrap_or(1);
    let steps_per_epoch = largest.div_ceil(cfg.batch_size);
    let batch = cfg.batch_size;
    let total_steps = cfg.epochs * steps_per_epoch;
    let adv = &cfg.adversarial;
    let mut record = RunRecord::new("mdan", cfg);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut acc = EpochAccumulator::default();
        for _ in 0..steps_per_epoch {
            let batches: Vec<SourceBatch> = sources
                .iter()
                .zip(&mut src_streams)
                .map(|(s, stream)| {
                    let idx = stream.take(batch);
                    SourceBatch {
                        features: rows(s.features.view(), &idx),
                        labels: idx.iter().map(|&i| s.labels[i]).collect(),
                    }
                })
                .collect();
            let xt = rows(target.features, &tgt_stream.take(batch));
            let lambda = adv.lambda_at(step, total_steps);
            let grads = adversarial_gradients(
                &net.extractor,
                &net.head,
                &discs.nets,
                &batches,
                &xt,
                lambda,
                adv.aggregation,
                adv.gamma,
            )?;
            check_loss(grads.value, epoch)?;
            apply_step(&mut net, &mut discs, &grads, epoch)?;
            acc.add(&grads);
            step += 1;
        }
        record.epochs.push(acc.finish(epoch));
    }
    Ok(TrainOutput {
        model: Model::single(net.extractor, net.head),
        record,
    })
}

#[derive(Debug, Clone)]
pub struct AddaGrads {
    pub discriminator_loss: f64,
    pub discriminator_accuracy: f64,
    pub discriminator: MlpGrads,
}

/// Discriminator update of the alignment stage: frozen source features
/// labelled 1, target-extractor features labelled 0.
pub fn adda_discriminator_gradients(
    discriminator: &Mlp,
    source_features: &Array2<f64>,
    target_features: &Array2<f64>,
) -> Result<AddaGrads> {
    let n_s = source_features.nrows();
    let d_in = concatenate![Axis(0), *source_features, *target_features];
    let acts = discriminator.forward(d_in.view())?;
    let targets: Vec<f64> = (0..d_in.nrows()).map(|i| if i < n_s { 1.0 } else { 0.0 }).collect();
    let (loss, g) = binary_cross_entropy(acts.output(), &targets);
    let (grads, _) = discriminator.backward(&acts, &g);
    let correct = acts
        .output()
        .column(0)
        .iter()
        .zip(&targets)
        .filter(|(&z, &t)| (z > 0.0) == (t > 0.5))
        .count();
    Ok(AddaGrads {
        discriminator_loss: loss,
        discriminator_accuracy: correct as f64 / d_in.nrows() as f64,
        discriminator: grads,
    })
}

/// Target-extractor update: discriminator loss on target rows with the
/// inverted (source) label. Returns the loss and the extractor gradient.
pub fn adda_target_gradients(
    target_extractor: &Mlp,
    discriminator: &Mlp,
    target_x: &Array2<f64>,
) -> Result<(f64, MlpGrads)> {
    let f_acts = target_extractor.forward(target_x.view())?;
    let d_acts = discriminator.forward(f_acts.output().view())?;
    let (loss, g) = binary_cross_entropy(d_acts.output(), &vec![1.0; target_x.nrows()]);
    let (_, g_feat) = discriminator.backward(&d_acts, &g);
    let (grads, _) = target_extractor.backward(&f_acts, &g_feat);
    Ok((loss, grads))
}

/// Two-stage adversarial discriminative adaptation.
///
/// The returned model composes the adapted target extractor with the frozen
/// source head. If the discriminator is right on more than 99% of an
/// epoch's rows, the record carries a `discriminator-collapse` warning.
pub fn train_adda(source: &DomainDataset, target: Unlabeled<'_>, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    check_source(source)?;
    check_target(&target, source.dim())?;
    let stage1 = train_erm(source, cfg)?;
    let mut record = stage1.record;
    record.scheme = "adda".into();
    let source_extractor = stage1.model.extractor;
    let head = stage1.model.heads.into_iter().next().expect("single head");

    let adv = &cfg.adversarial;
    let lr = adv.adda_learning_rate.unwrap_or(cfg.learning_rate);
    let mut target_extractor = source_extractor.clone();
    let mut opt_target = OptimizerState::new("target_extractor", &target_extractor, lr, cfg.momentum)?;
    let mut disc = build_discriminator(cfg, &mut rng_for(cfg.seed, stream::DISCRIMINATOR));
    let mut opt_disc = OptimizerState::new("discriminator0", &disc, lr, cfg.momentum)?;
    let mut src_stream = IndexStream::for_source(source, cfg.resample, rng_for(cfg.seed, stream::ALIGN_SOURCE))?;
    let mut tgt_stream = IndexStream::shuffled(target.len(), rng_for(cfg.seed, stream::TARGET));
    let sizes = epoch_batches(source.len().max(target.len()), cfg.batch_size);

    for epoch in 0..adv.adda_stage2_epochs {
        let (mut d_loss, mut g_loss, mut correct, mut seen) = (0.0, 0.0, 0.0, 0.0);
        for &size in &sizes {
            let xs = rows(source.features.view(), &src_stream.take(size));
            let xt = rows(target.features, &tgt_stream.take(size));
            let fs = source_extractor.apply(xs.view())?;
            let ft = target_extractor.apply(xt.view())?;
            let dg = adda_discriminator_gradients(&disc, &fs, &ft)?;
            check_loss(dg.discriminator_loss, epoch)?;
            sgd_step(&mut disc, &dg.discriminator, &mut opt_disc).map_err(|e| at_epoch(e, epoch))?;

            let (loss, g_target) = adda_target_gradients(&target_extractor, &disc, &xt)?;
            check_loss(loss, epoch)?;
            sgd_step(&mut target_extractor, &g_target, &mut opt_target).map_err(|e| at_epoch(e, epoch))?;

            let rows_seen = (fs.nrows() + ft.nrows()) as f64;
            d_loss += dg.discriminator_loss;
            g_loss += loss;
            correct += dg.discriminator_accuracy * rows_seen;
            seen += rows_seen;
        }
        let n = sizes.len() as f64;
        let accuracy = correct / seen;
        if accuracy > 0.99 {
            record
                .warnings
                .push(format!("discriminator-collapse: accuracy {accuracy:.4} over stage-2 epoch {epoch}"));
        }
        record.stage2_epochs.push(EpochLog {
            epoch,
            classification_loss: g_loss / n,
            domain_losses: vec![d_loss / n],
            discriminator_accuracy: Some(accuracy),
            total_loss: d_loss / n,
            ..EpochLog::default()
        });
    }
    Ok(TrainOutput {
        model: Model::single(target_extractor, head),
        record,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn reversal_forward_is_bitwise_identity() {
        let x = array![[1.5, -0.0, f64::MIN_POSITIVE], [3.0e300, -7.25, 0.1]];
        let y = GradReverse::new(0.7).unwrap().forward(&x);
        for (a, b) in x.iter().zip(y.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn reversal_backward_scales_by_minus_lambda() {
        let g = array![[1.0, -2.0]];
        assert_eq!(GradReverse::new(0.5).unwrap().backward(&g), array![[-0.5, 1.0]]);
        assert!(GradReverse::new(0.0).unwrap().backward(&g).iter().all(|&v| v == 0.0));
        assert!(GradReverse::new(-1.0).is_err());
    }

    #[test]
    fn soft_aggregation_limits() {
        let e = [3.0, 1.0];
        let (hot, _) = aggregate_losses(&e, Aggregation::Soft, 1e4);
        assert!((hot - 3.0).abs() < 1e-3);
        let (cold, w) = aggregate_losses(&e, Aggregation::Soft, 1e-6);
        assert!((cold - 2.0).abs() < 1e-5);
        assert!((w[0] - 0.5).abs() < 1e-5);
        let (hard, w) = aggregate_losses(&e, Aggregation::Hard, 1.0);
        assert_eq!((hard, w), (3.0, vec![1.0, 0.0]));
    }

    #[test]
    fn soft_aggregation_bounds() {
        let cases: [&[f64]; 4] = [&[0.1, 0.2, 0.3], &[5.0, 5.0], &[2.0], &[0.0, 10.0, -3.0, 4.0]];
        for e in cases {
            for gamma in [0.1, 1.0, 10.0, 100.0] {
                let (v, w) = aggregate_losses(e, Aggregation::Soft, gamma);
                let mean = e.iter().sum::<f64>() / e.len() as f64;
                let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(v >= mean - 1e-12 && v <= max + 1e-12);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

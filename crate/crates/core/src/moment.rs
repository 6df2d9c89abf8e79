//! Multi-source moment matching.
//!
//! A shared extractor feeds one label head per source. Training aligns the
//! first two feature moments of every source with the target and with every
//! other source, and pulls the heads' target predictions towards each other.
//! At inference all heads vote.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::config::{EnsembleRule, TrainConfig};
use crate::data::{stratified_split, DomainDataset, Unlabeled};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, sgd_step, softmax, Mlp, MlpGrads, OptimizerState, Prediction};
use crate::adversarial::SourceBatch;
use crate::train::{
    at_epoch, build_extractor, build_head, check_loss, check_source, rng_for, rows, stream, EpochLog, IndexStream,
    Model, RunRecord, TrainOutput,
};

fn moment_differences(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let mean_a = a.mean_axis(Axis(0)).expect("non-empty");
    let mean_b = b.mean_axis(Axis(0)).expect("non-empty");
    let sq_a = a.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
    let sq_b = b.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
    (mean_a - mean_b, sq_a - sq_b)
}

fn check_pair(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("feature dims differ: {} vs {}", a.ncols(), b.ncols())));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// `‖mean(a) − mean(b)‖₂ + ‖mean(a²) − mean(b²)‖₂`, squares taken
/// element-wise.
pub fn moment_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair(&a, &b)?;
    let (d1, d2) = moment_differences(&a, &b);
    Ok(d1.dot(&d1).sqrt() + d2.dot(&d2).sqrt())
}

/// [`moment_distance`] and its gradients with respect to both batches. A
/// term whose norm is exactly zero contributes a zero subgradient.
pub fn moment_distance_grad(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_pair(&a, &b)?;
    let (d1, d2) = moment_differences(&a, &b);
    let (n1, n2) = (d1.dot(&d1).sqrt(), d2.dot(&d2).sqrt());
    let u1 = if n1 > 0.0 { &d1 / n1 } else { Array1::zeros(d1.len()) };
    let u2 = if n2 > 0.0 { &d2 / n2 } else { Array1::zeros(d2.len()) };
    let grad = |x: &ArrayView2<'_, f64>, sign: f64| {
        let n = x.nrows() as f64;
        let mut g = x.to_owned();
        for mut row in g.rows_mut() {
            for ((v, &e1), &e2) in row.iter_mut().zip(&u1).zip(&u2) {
                *v = sign * (e1 + 2.0 * *v * e2) / n;
            }
        }
        g
    };
    Ok((n1 + n2, grad(&a, 1.0), grad(&b, -1.0)))
}

/// Mean over rows of `Σ_c |p_c − q_c|` and its gradient with respect to `p`.
fn l1_rows(p: &Array2<f64>, q: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = p.nrows() as f64;
    let diff = p - q;
    let value = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    let grad = diff.mapv(|d| {
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    });
    (value, grad)
}

/// Backpropagates a gradient on softmax outputs to the logits.
fn softmax_backward(p: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.raw_dim());
    for ((p_row, g_row), mut o_row) in p.rows().into_iter().zip(g.rows()).zip(out.rows_mut()) {
        let dot = p_row.dot(&g_row);
        for ((o, &pv), &gv) in o_row.iter_mut().zip(&p_row).zip(&g_row) {
            *o = pv * (gv - dot);
        }
    }
    out
}

/// Labels of the aligned pairs, in the order of [`MomentGrads::moment_terms`]:
/// every source against the target, then every source pair `k < l`.
pub fn moment_pair_labels(source_ids: &[&str], target_id: &str) -> Vec<String> {
    let mut out: Vec<String> = source_ids.iter().map(|s| format!("{s}~{target_id}")).collect();
    for k in 0..source_ids.len() {
        for l in k + 1..source_ids.len() {
            out.push(format!("{}~{}", source_ids[k], source_ids[l]));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct MomentGrads {
    pub value: f64,
    pub classification: Vec<f64>,
    pub moment_terms: Vec<f64>,
    pub discrepancy: f64,
    pub extractor: MlpGrads,
    pub heads: Vec<MlpGrads>,
}

/// Gradients of
/// `Σ_k CE_k + η·(Σ_k md(f_k, f_T) + Σ_{k<l} md(f_k, f_l)) + ρ·mean_{k<l} L1(p_k, p_l)`
/// where `f` are extractor features, `p_k` head `k`'s softmax on target rows.
pub fn m3sda_gradients(
    extractor: &Mlp,
    heads: &[Mlp],
    sources: &[SourceBatch],
    target: &Array2<f64>,
    eta: f64,
    rho: f64,
) -> Result<MomentGrads> {
    if heads.len() != sources.len() || heads.is_empty() {
        return Err(Error::Invalid(format!("{} heads for {} sources", heads.len(), sources.len())));
    }
    let k_sources = sources.len();
    let t_acts = extractor.forward(target.view())?;
    let s_acts = sources
        .iter()
        .map(|b| extractor.forward(b.features.view()))
        .collect::<Result<Vec<_>>>()?;
    let mut g_src_feat: Vec<Array2<f64>> = s_acts.iter().map(|a| Array2::zeros(a.output().raw_dim())).collect();
    let mut g_tgt_feat = Array2::zeros(t_acts.output().raw_dim());
    let mut g_heads = Vec::with_capacity(k_sources);
    let mut classification = Vec::with_capacity(k_sources);

    for ((head, batch), (acts, g_feat)) in heads.iter().zip(sources).zip(s_acts.iter().zip(&mut g_src_feat)) {
        let h_acts = head.forward(acts.output().view())?;
        let (ce, g_logits) = cross_entropy(h_acts.output(), &batch.labels)?;
        let (g_head, g_in) = head.backward(&h_acts, &g_logits);
        *g_feat += &g_in;
        g_heads.push(g_head);
        classification.push(ce);
    }

    let mut moment_terms = Vec::new();
    for k in 0..k_sources {
        let (d, ga, gb) = moment_distance_grad(s_acts[k].output().view(), t_acts.output().view())?;
        g_src_feat[k].scaled_add(eta, &ga);
        g_tgt_feat.scaled_add(eta, &gb);
        moment_terms.push(d);
    }
    for k in 0..k_sources {
        for l in k + 1..k_sources {
            let (d, ga, gb) = moment_distance_grad(s_acts[k].output().view(), s_acts[l].output().view())?;
            g_src_feat[k].scaled_add(eta, &ga);
            g_src_feat[l].scaled_add(eta, &gb);
            moment_terms.push(d);
        }
    }

    let mut discrepancy = 0.0;
    if k_sources > 1 {
        let t_head_acts = heads
            .iter()
            .map(|h| h.forward(t_acts.output().view()))
            .collect::<Result<Vec<_>>>()?;
        let probs: Vec<Array2<f64>> = t_head_acts.iter().map(|a| softmax(a.output())).collect();
        let n_pairs = (k_sources * (k_sources - 1) / 2) as f64;
        let mut g_probs: Vec<Array2<f64>> = probs.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        for k in 0..k_sources {
            for l in k + 1..k_sources {
                let (v, g) = l1_rows(&probs[k], &probs[l]);
                discrepancy += v / n_pairs;
                g_probs[k].scaled_add(1.0 / n_pairs, &g);
                g_probs[l].scaled_add(-1.0 / n_pairs, &g);
            }
        }
        for (k, (acts, g_p)) in t_head_acts.iter().zip(&g_probs).enumerate() {
            let g_logits = softmax_backward(&probs[k], g_p) * rho;
            let (mut g_head, g_in) = heads[k].backward(acts, &g_logits);
            g_tgt_feat += &g_in;
            g_head.add_assign(&g_heads[k]);
            g_heads[k] = g_head;
        }
    }

    let mut g_extractor = extractor.zero_grads();
    for (acts, g) in s_acts.iter().zip(&g_src_feat) {
        g_extractor.add_assign(&extractor.backward(acts, g).0);
    }
    g_extractor.add_assign(&extractor.backward(&t_acts, &g_tgt_feat).0);

    let value = classification.iter().sum::<f64>() + eta * moment_terms.iter().sum::<f64>() + rho * discrepancy;
    Ok(MomentGrads {
        value,
        classification,
        moment_terms,
        discrepancy,
        extractor: g_extractor,
        heads: g_heads,
    })
}

/// Mixture weights for `rule`. `accuracies` are the heads' held-out source
/// accuracies and are only read by [`EnsembleRule::SourceAccuracy`].
pub fn ensemble_weights(rule: EnsembleRule, heads: usize, accuracies: &[f64]) -> Vec<f64> {
    match rule {
        EnsembleRule::SourceAccuracy if accuracies.iter().sum::<f64>() > 0.0 => {
            let total: f64 = accuracies.iter().sum();
            accuracies.iter().map(|a| a / total).collect()
        }
        _ => vec![1.0 / heads as f64; heads],
    }
}

/// Weighted average of the heads' softmax outputs; argmax with the lowest
/// index winning ties.
pub fn ensemble_predict(extractor: &Mlp, heads: &[Mlp], weights: &[f64], x: ArrayView2<'_, f64>) -> Result<Prediction> {
    if heads.is_empty() {
        return Err(Error::Invalid("ensemble needs at least one classifier".into()));
    }
    if weights.len() != heads.len() {
        return Err(Error::Shape(format!("{} weights for {} classifiers", weights.len(), heads.len())));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Invalid("ensemble weights must be non-negative with a positive sum".into()));
    }
    let features = extractor.apply(x)?;
    let mut scores: Option<Array2<f64>> = None;
    for (head, &w) in heads.iter().zip(weights) {
        let p = softmax(&head.apply(features.view())?) * (w / total);
        scores = Some(match scores {
            None => p,
            Some(acc) => acc + p,
        });
    }
    Ok(Prediction::from_scores(scores.expect("at least one head")))
}

/// Multi-source moment matching with per-source heads.
pub fn train_m3sda(sources: &[&DomainDataset], target: Unlabeled<'_>, cfg: &TrainConfig) -> Result<TrainOutput> {
    if sources.len() < 2 {
        return Err(Error::Invalid(format!(
            "moment matching needs at least 2 sources, got {}",
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
    if target.is_empty() {
        return Err(Error::Invalid(format!("target domain `{}` is empty", target.domain_id)));
    }
    if target.dim() != dim {
        return Err(Error::Shape(format!("target has dim {} but sources have dim {dim}", target.dim())));
    }

    let weighted = cfg.moment.ensemble == EnsembleRule::SourceAccuracy;
    let (train_parts, holdouts): (Vec<DomainDataset>, Vec<Option<DomainDataset>>) = if weighted {
        let mut train_parts = Vec::new();
        let mut holdouts = Vec::new();
        for (k, s) in sources.iter().enumerate() {
            let split = stratified_split(s, cfg.moment.holdout_ratio, cfg.seed ^ (stream::HOLDOUT << 32) ^ k as u64)?;
            let holdout = (!split.test.is_empty()).then_some(split.test);
            let train = if split.train.is_empty() { (*s).clone() } else { split.train };
            train_parts.push(train);
            holdouts.push(holdout);
        }
        (train_parts, holdouts)
    } else {
        (sources.iter().map(|s| (*s).clone()).collect(), vec![None; sources.len()])
    };

    let mut init = rng_for(cfg.seed, stream::INIT);
    let mut extractor = build_extractor(dim, cfg, &mut init);
    let mut heads: Vec<Mlp> = (0..sources.len()).map(|_| build_head(n_classes, cfg, &mut init)).collect();
    let mut opt_extractor = OptimizerState::new("extractor", &extractor, cfg.learning_rate, cfg.momentum)?;
    let mut opt_heads = heads
        .iter()
        .enumerate()
        .map(|(k, h)| OptimizerState::new(format!("head{k}"), h, cfg.learning_rate, cfg.momentum))
        .collect::<Result<Vec<_>>>()?;
    let mut src_streams = train_parts
        .iter()
        .enumerate()
        .map(|(k, s)| IndexStream::for_source(s, cfg.resample, rng_for(cfg.seed, stream::SOURCE_BASE + k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut tgt_stream = IndexStream::shuffled(target.len(), rng_for(cfg.seed, stream::TARGET));
    let largest = train_parts.iter().map(|s| s.len()).max().unwrap_or(1);
    let steps_per_epoch = largest.div_ceil(cfg.batch_size);
    let batch = cfg.batch_size;

    let mut record = RunRecord::new("m3sda", cfg);
    let ids: Vec<&str> = sources.iter().map(|s| s.domain_id.as_str()).collect();
    record.moment_pairs = moment_pair_labels(&ids, target.domain_id);
    for epoch in 0..cfg.epochs {
        let (mut cls, mut total, mut disc) = (0.0, 0.0, 0.0);
        let mut terms = vec![0.0; record.moment_pairs.len()];
        for _ in 0..steps_per_epoch {
            let batches: Vec<SourceBatch> = train_parts
                .iter()
                .zip(&mut src_streams)
                .map(|(s, st)| {
                    let idx = st.take(batch);
                    SourceBatch {
                        features: rows(s.features.view(), &idx),
                        labels: idx.iter().map(|&i| s.labels[i]).collect(),
                    }
                })
                .collect();
            let xt = rows(target.features, &tgt_stream.take(batch));
            let g = m3sda_gradients(&extractor, &heads, &batches, &xt, cfg.moment.eta, cfg.moment.rho)?;
            check_loss(g.value, epoch)?;
            sgd_step(&mut extractor, &g.extractor, &mut opt_extractor).map_err(|e| at_epoch(e, epoch))?;
            for ((h, gh), opt) in heads.iter_mut().zip(&g.heads).zip(&mut opt_heads) {
                sgd_step(h, gh, opt).map_err(|e| at_epoch(e, epoch))?;
            }
            cls += g.classification.iter().sum::<f64>();
            total += g.value;
            disc += g.discrepancy;
            for (acc, v) in terms.iter_mut().zip(&g.moment_terms) {
                *acc += v;
            }
        }
        let n = steps_per_epoch as f64;
        record.epochs.push(EpochLog {
            epoch,
            classification_loss: cls / n,
            moment_terms: terms.into_iter().map(|t| t / n).collect(),
            discrepancy: Some(disc / n),
            total_loss: total / n,
            ..EpochLog::default()
        });
    }

    let accuracies = heads
        .iter()
        .zip(&holdouts)
        .map(|(h, holdout)| match holdout {
            Some(d) => {
                let p = ensemble_predict(&extractor, std::slice::from_ref(h), &[1.0], d.features.view())?;
                Ok(p.labels.iter().zip(&d.labels).filter(|(a, b)| a == b).count() as f64 / d.len() as f64)
            }
            None => Ok(1.0),
        })
        .collect::<Result<Vec<f64>>>()?;
    let head_weights = ensemble_weights(cfg.moment.ensemble, heads.len(), &accuracies);
    if weighted {
        record.warnings.extend(
            holdouts
                .iter()
                .zip(&ids)
                .filter(|(h, _)| h.is_none())
                .map(|(_, id)| format!("source `{id}` too small for a holdout; head scored as 1.0")),
        );
    }
    Ok(TrainOutput {
        model: Model {
            extractor,
            heads,
            head_weights,
        },
        record,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::nn::{Activation, Layer};

    #[test]
    fn moment_distance_reference_values() {
        let a = Array2::<f64>::zeros((4, 2));
        let b = Array2::<f64>::ones((4, 2));
        let d = moment_distance(a.view(), b.view()).unwrap();
        assert!((d - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(moment_distance(b.view(), b.view()).unwrap(), 0.0);
        assert!(moment_distance(a.view(), Array2::zeros((3, 3)).view()).is_err());
    }

    #[test]
    fn moment_distance_ignores_row_order() {
        let a = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]];
        let b = array![[0.0, 1.0], [2.0, 2.0]];
        let shuffled = array![[0.5, 0.0], [1.0, 2.0], [3.0, -1.0]];
        let d1 = moment_distance(a.view(), b.view()).unwrap();
        let d2 = moment_distance(shuffled.view(), b.view()).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }

    fn fixed_head(logits: [f64; 2]) -> Mlp {
        // zero weights: the head emits its bias for every row
        Mlp {
            layers: vec![Layer {
                weight: Array2::zeros((2, 1)),
                bias: array![logits[0], logits[1]],
                activation: Activation::Identity,
            }],
        }
    }

    fn identity_extractor() -> Mlp {
        Mlp {
            layers: vec![Layer {
                weight: Array2::eye(1),
                bias: Array1::zeros(1),
                activation: Activation::Identity,
            }],
        }
    }

    #[test]
    fn opposite_heads_tie_to_class_zero() {
        let x = array![[0.0], [1.0]];
        let heads = [fixed_head([50.0, 0.0]), fixed_head([0.0, 50.0])];
        let p = ensemble_predict(&identity_extractor(), &heads, &[0.5, 0.5], x.view()).unwrap();
        assert!((p.scores[[0, 0]] - 0.5).abs() < 1e-12);
        assert_eq!(p.labels, vec![0, 0]);
    }

    #[test]
    fn weighted_ensemble_is_convex_combination() {
        let x = array![[0.0]];
        let heads = [fixed_head([2.0, 0.0]), fixed_head([0.0, 1.0])];
        let w = ensemble_weights(EnsembleRule::SourceAccuracy, 2, &[0.9, 0.1]);
        let p = ensemble_predict(&identity_extractor(), &heads, &w, x.view()).unwrap();
        let p0 = 2f64.exp() / (2f64.exp() + 1.0);
        let q0 = 1.0 / (1.0 + 1f64.exp());
        assert!((p.scores[[0, 0]] - (0.9 * p0 + 0.1 * q0)).abs() < 1e-12);
    }

    #[test]
    fn single_head_ensemble_matches_predict() {
        let x = array![[0.3], [-2.0]];
        let heads = [fixed_head([0.2, 0.7])];
        let e = ensemble_predict(&identity_extractor(), &heads, &[1.0], x.view()).unwrap();
        let p = crate::nn::predict(&identity_extractor(), &heads[0], x.view()).unwrap();
        assert_eq!(e, p);
    }

    #[test]
    fn pair_labels_cover_all_pairs() {
        let labels = moment_pair_labels(&["a", "b", "c"], "t");
        assert_eq!(labels, ["a~t", "b~t", "c~t", "a~b", "a~c", "b~c"]);
    }
}

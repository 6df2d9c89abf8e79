//! Independent oracles shared by the integration and acceptance tests.
//!
//! Loss values are recomputed here from forward passes only, so
//! finite-difference checks never reuse the library's loss or gradient code.

#![allow(dead_code)]

pub mod oracle;

use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use udakit::adversarial::{
    adda_discriminator_gradients, adda_target_gradients, adversarial_gradients, SourceBatch,
};
use udakit::config::Aggregation;
use udakit::moment::m3sda_gradients;
use udakit::nn::{Activation, Mlp, MlpGrads};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely: central differences
/// carry an O(h²) truncation error that dwarfs their magnitude.
const RELATIVE_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random network with non-zero biases.
pub fn random_mlp(rng: &mut ChaCha8Rng, sizes: &[usize]) -> Mlp {
    let mut net = Mlp::new(sizes, Activation::Relu, Activation::Identity, rng);
    for i in 0..net.parameter_count() {
        let p = net.parameter_mut(i);
        *p += 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    net
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

// ---- loss oracles --------------------------------------------------------

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row.mapv_inplace(|v| (v - m).exp() / z);
    }
    p
}

/// Mean negative log-likelihood via log-sum-exp.
pub fn ce(logits: &Array2<f64>, y: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(y) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / y.len() as f64
}

/// Mean logistic loss of logits `z` (n × 1) against 0/1 targets.
pub fn bce(z: &Array2<f64>, t: &[f64]) -> f64 {
    let softplus = |v: f64| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
    z.column(0).iter().zip(t).map(|(&v, &t)| softplus(v) - t * v).sum::<f64>() / t.len() as f64
}

pub fn moment_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for j in 0..a.ncols() {
        let ma = a.column(j).sum() / a.nrows() as f64;
        let mb = b.column(j).sum() / b.nrows() as f64;
        let sa = a.column(j).iter().map(|v| v * v).sum::<f64>() / a.nrows() as f64;
        let sb = b.column(j).iter().map(|v| v * v).sum::<f64>() / b.nrows() as f64;
        d1 += (ma - mb).powi(2);
        d2 += (sa - sb).powi(2);
    }
    d1.sqrt() + d2.sqrt()
}

pub fn soft_max_aggregate(e: &[f64], gamma: f64) -> f64 {
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + (e.iter().map(|v| (gamma * (v - m)).exp()).sum::<f64>() / e.len() as f64).ln() / gamma
}

// ---- finite differences --------------------------------------------------

/// Outcome of comparing one analytic gradient block with central differences.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdStats {
    pub checked: usize,
    /// Coordinates where a ReLU or |·| kink lies within ±h.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl FdStats {
    pub fn merge(self, other: FdStats) -> FdStats {
        FdStats {
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
        }
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` with central differences of `f` over every parameter
/// of `net`. `f` returns the loss and the pattern of all non-smooth switches
/// it passed through; coordinates whose pattern differs between +h and −h
/// are skipped.
pub fn fd_check(net: &Mlp, analytic: &MlpGrads, f: impl Fn(&Mlp) -> (f64, Vec<bool>)) -> FdStats {
    let g = analytic.flatten();
    assert_eq!(g.len(), net.parameter_count(), "gradient/parameter count mismatch");
    let mut stats = FdStats::default();
    let mut probe = net.clone();
    for (i, &a) in g.iter().enumerate() {
        let orig = *probe.parameter_mut(i);
        *probe.parameter_mut(i) = orig + FD_STEP;
        let (fp, pp) = f(&probe);
        *probe.parameter_mut(i) = orig - FD_STEP;
        let (fm, pm) = f(&probe);
        *probe.parameter_mut(i) = orig;
        if pp != pm {
            stats.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        stats.checked += 1;
        stats.max_rel_error = stats.max_rel_error.max(rel_error(a, numeric));
    }
    stats
}

/// Forward pass recording the ReLU pattern.
pub fn run(net: &Mlp, x: &Array2<f64>, pattern: &mut Vec<bool>) -> Array2<f64> {
    let acts = net.forward(x.view()).expect("forward");
    pattern.extend(acts.relu_pattern(net));
    acts.output().clone()
}

pub struct Dims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

/// Networks of at most three layers and sixteen units.
pub fn random_dims(rng: &mut ChaCha8Rng) -> Dims {
    let depth = rng.random_range(1..=2);
    Dims {
        input: rng.random_range(2..=5),
        hidden: (0..depth).map(|_| rng.random_range(3..=16)).collect(),
        classes: rng.random_range(2..=4),
    }
}

fn extractor_sizes(d: &Dims) -> Vec<usize> {
    let mut s = vec![d.input];
    s.extend(&d.hidden);
    s
}

// ---- per-loss checks -----------------------------------------------------

/// Cross-entropy through extractor and head.
pub fn check_cross_entropy(seed: u64) -> FdStats {
    let mut r = rng(seed);
    let d = random_dims(&mut r);
    let ext = random_mlp(&mut r, &extractor_sizes(&d));
    let feat = *d.hidden.last().unwrap();
    let head = random_mlp(&mut r, &[feat, d.classes]);
    let n = r.random_range(3..=8);
    let x = normal_matrix(&mut r, n, d.input, 1.0);
    let y = labels(&mut r, n, d.classes);

    let f_acts = ext.forward(x.view()).unwrap();
    let h_acts = head.forward(f_acts.output().view()).unwrap();
    let (_, g_logits) = udakit::nn::cross_entropy(h_acts.output(), &y).unwrap();
    let (g_head, g_feat) = head.backward(&h_acts, &g_logits);
    let (g_ext, _) = ext.backward(&f_acts, &g_feat);

    let loss = |e: &Mlp, h: &Mlp| {
        let mut p = Vec::new();
        let f = run(e, &x, &mut p);
        (ce(&run(h, &f, &mut p), &y), p)
    };
    fd_check(&ext, &g_ext, |e| loss(e, &head)).merge(fd_check(&head, &g_head, |h| loss(&ext, h)))
}

/// Domain-adversarial objective with `k` sources (`k = 1` is the
/// single-source case).
pub fn check_adversarial(seed: u64, k: usize, rule: Aggregation) -> FdStats {
    let mut r = rng(seed);
    let d = random_dims(&mut r);
    let ext = random_mlp(&mut r, &extractor_sizes(&d));
    let feat = *d.hidden.last().unwrap();
    let head = random_mlp(&mut r, &[feat, d.classes]);
    let disc_hidden = r.random_range(2..=8);
    let discs: Vec<Mlp> = (0..k).map(|_| random_mlp(&mut r, &[feat, disc_hidden, 1])).collect();
    let sources: Vec<SourceBatch> = (0..k)
        .map(|_| {
            let n = r.random_range(3..=6);
            SourceBatch {
                features: normal_matrix(&mut r, n, d.input, 1.0),
                labels: labels(&mut r, n, d.classes),
            }
        })
        .collect();
    let nt = r.random_range(3..=6);
    let xt = normal_matrix(&mut r, nt, d.input, 1.0);
    let lambda = r.random_range(0.1..2.0);
    let gamma = r.random_range(0.5..5.0);

    let g = adversarial_gradients(&ext, &head, &discs, &sources, &xt, lambda, rule, gamma).unwrap();
    let w = g.weights.clone();

    // per-source (CE_k, D_k) with the ReLU pattern of every pass
    let terms = |e: &Mlp, h: &Mlp, ds: &[Mlp]| {
        let mut p = Vec::new();
        let ft = run(e, &xt, &mut p);
        let mut out = Vec::new();
        for (b, dk) in sources.iter().zip(ds) {
            let fs = run(e, &b.features, &mut p);
            let c = ce(&run(h, &fs, &mut p), &b.labels);
            let din = concatenate![Axis(0), fs, ft];
            let t: Vec<f64> = (0..din.nrows()).map(|i| if i < fs.nrows() { 1.0 } else { 0.0 }).collect();
            out.push((c, bce(&run(dk, &din, &mut p), &t)));
        }
        (out, p)
    };
    let aggregate = |e: &[f64]| match rule {
        Aggregation::Soft => soft_max_aggregate(e, gamma),
        Aggregation::Hard => e.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };

    // head: gradient of the aggregated objective
    let head_stats = fd_check(&head, &g.head, |h| {
        let (t, p) = terms(&ext, h, &discs);
        (aggregate(&t.iter().map(|(c, dl)| c + lambda * dl).collect::<Vec<_>>()), p)
    });
    // extractor: classification minus λ·domain, weights held at the current point
    let ext_stats = fd_check(&ext, &g.extractor, |e| {
        let (t, p) = terms(e, &head, &discs);
        (t.iter().zip(&w).map(|((c, dl), wk)| wk * (c - lambda * dl)).sum(), p)
    });
    // discriminator k: its weighted domain loss
    let mut stats = head_stats.merge(ext_stats);
    for j in 0..k {
        stats = stats.merge(fd_check(&discs[j], &g.discriminators[j], |dj| {
            let mut ds = discs.clone();
            ds[j] = dj.clone();
            let (t, p) = terms(&ext, &head, &ds);
            (w[j] * t[j].1, p)
        }));
    }
    // aggregation weights are the partial derivatives of the aggregate
    let (t, _) = terms(&ext, &head, &discs);
    let e: Vec<f64> = t.iter().map(|(c, dl)| c + lambda * dl).collect();
    for j in 0..k {
        let mut ep = e.clone();
        let mut em = e.clone();
        ep[j] += FD_STEP;
        em[j] -= FD_STEP;
        let numeric = (aggregate(&ep) - aggregate(&em)) / (2.0 * FD_STEP);
        stats.checked += 1;
        stats.max_rel_error = stats.max_rel_error.max(rel_error(w[j], numeric));
    }
    stats
}

/// Both stages of the two-stage alignment objective.
pub fn check_adda(seed: u64) -> FdStats {
    let mut r = rng(seed);
    let d = random_dims(&mut r);
    let src_ext = random_mlp(&mut r, &extractor_sizes(&d));
    let tgt_ext = random_mlp(&mut r, &extractor_sizes(&d));
    let feat = *d.hidden.last().unwrap();
    let disc_hidden = r.random_range(2..=8);
    let disc = random_mlp(&mut r, &[feat, disc_hidden, 1]);
    let ns = r.random_range(3..=6);
    let xs = normal_matrix(&mut r, ns, d.input, 1.0);
    let nt = r.random_range(3..=6);
    let xt = normal_matrix(&mut r, nt, d.input, 1.0);
    let fs = src_ext.apply(xs.view()).unwrap();
    let ft = tgt_ext.apply(xt.view()).unwrap();

    let dg = adda_discriminator_gradients(&disc, &fs, &ft).unwrap();
    let din = concatenate![Axis(0), fs, ft];
    let t: Vec<f64> = (0..din.nrows()).map(|i| if i < fs.nrows() { 1.0 } else { 0.0 }).collect();
    let disc_stats = fd_check(&disc, &dg.discriminator, |dn| {
        let mut p = Vec::new();
        (bce(&run(dn, &din, &mut p), &t), p)
    });

    let (_, g_tgt) = adda_target_gradients(&tgt_ext, &disc, &xt).unwrap();
    let ones = vec![1.0; xt.nrows()];
    let tgt_stats = fd_check(&tgt_ext, &g_tgt, |e| {
        let mut p = Vec::new();
        let f = run(e, &xt, &mut p);
        (bce(&run(&disc, &f, &mut p), &ones), p)
    });
    disc_stats.merge(tgt_stats)
}

/// Moment matching with classifier discrepancy over `k ≥ 2` sources.
pub fn check_moment(seed: u64, k: usize) -> FdStats {
    let mut r = rng(seed);
    let d = random_dims(&mut r);
    let ext = random_mlp(&mut r, &extractor_sizes(&d));
    let feat = *d.hidden.last().unwrap();
    let heads: Vec<Mlp> = (0..k).map(|_| random_mlp(&mut r, &[feat, d.classes])).collect();
    let sources: Vec<SourceBatch> = (0..k)
        .map(|_| {
            let n = r.random_range(3..=6);
            SourceBatch {
                features: normal_matrix(&mut r, n, d.input, 1.0) + r.random_range(-1.0..1.0),
                labels: labels(&mut r, n, d.classes),
            }
        })
        .collect();
    let nt = r.random_range(3..=6);
    let xt = normal_matrix(&mut r, nt, d.input, 1.0);
    let eta = r.random_range(0.1..2.0);
    let rho = r.random_range(0.1..2.0);
    let g = m3sda_gradients(&ext, &heads, &sources, &xt, eta, rho).unwrap();

    let objective = |e: &Mlp, hs: &[Mlp]| {
        let mut p = Vec::new();
        let ft = run(e, &xt, &mut p);
        let fs: Vec<Array2<f64>> = sources.iter().map(|b| run(e, &b.features, &mut p)).collect();
        let mut value = 0.0;
        for ((b, f), h) in sources.iter().zip(&fs).zip(hs) {
            value += ce(&run(h, f, &mut p), &b.labels);
        }
        let mut md = 0.0;
        for f in &fs {
            md += moment_distance(f, &ft);
        }
        for a in 0..k {
            for b in a + 1..k {
                md += moment_distance(&fs[a], &fs[b]);
            }
        }
        let probs: Vec<Array2<f64>> = hs.iter().map(|h| softmax_rows(&run(h, &ft, &mut p))).collect();
        let mut disc = 0.0;
        let pairs = (k * (k - 1) / 2) as f64;
        for a in 0..k {
            for b in a + 1..k {
                let diff = &probs[a] - &probs[b];
                p.extend(diff.iter().map(|v| *v > 0.0));
                disc += diff.iter().map(|v| v.abs()).sum::<f64>() / xt.nrows() as f64 / pairs;
            }
        }
        (value + eta * md + rho * disc, p)
    };
    let mut stats = fd_check(&ext, &g.extractor, |e| objective(e, &heads));
    for j in 0..k {
        stats = stats.merge(fd_check(&heads[j], &g.heads[j], |h| {
            let mut hs = heads.clone();
            hs[j] = h.clone();
            objective(&ext, &hs)
        }));
    }
    stats
}

// ---- synthetic domains ---------------------------------------------------

use udakit::data::{generate_domain, DomainSpec};
use udakit::DomainDataset;

pub fn spec(id: &str, means: Vec<Vec<f64>>, labels: &[f64], n: usize, seed: u64) -> DomainSpec {
    let dim = means[0].len();
    DomainSpec {
        domain_id: id.into(),
        n_samples: n,
        dim,
        class_means: means,
        class_cov_scale: 1.0,
        label_distribution: labels.to_vec(),
        sensitive_distribution: vec![1.0],
        sensitive_mean_offset: vec![vec![0.0; dim]],
        seed,
    }
}

pub fn domain(id: &str, means: Vec<Vec<f64>>, labels: &[f64], n: usize, seed: u64) -> DomainDataset {
    generate_domain(&spec(id, means, labels, n, seed)).expect("valid spec")
}

/// Two unit-variance classes at `(±sep + shift, 0)`.
pub fn two_blobs(id: &str, sep: f64, shift: f64, labels: &[f64], n: usize, seed: u64) -> DomainDataset {
    domain(id, vec![vec![-sep + shift, 0.0], vec![sep + shift, 0.0]], labels, n, seed)
}

/// Three classes evenly spaced on a circle of `radius`, translated by `offset`.
pub fn ring_means(radius: f64, offset: [f64; 2]) -> Vec<Vec<f64>> {
    (0..3)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
            vec![radius * a.cos() + offset[0], radius * a.sin() + offset[1]]
        })
        .collect()
}

pub fn target_accuracy(model: &udakit::Model, target: &DomainDataset) -> f64 {
    let pred = model.predict(target.features.view()).expect("predict");
    udakit::metrics::accuracy_of(&target.labels, &pred.labels)
}

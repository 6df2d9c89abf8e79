//! Feature- and label-shift measurements between domains, and their
//! correlation with cross-domain test error.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};

pub const DEFAULT_PROJECTIONS: usize = 256;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Exact W1 between two 1-D empirical measures with uniform weights:
/// the integral over `t ∈ [0, 1]` of the gap between their quantile
/// functions. For equal sizes this is the mean absolute difference of
/// matched order statistics.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite value in W1 input".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    // Walk the merged breakpoints i/n and j/m in integer units of 1/(n·m).
    let (mut i, mut j) = (0usize, 0usize);
    let (mut t, mut total) = (0usize, 0.0);
    while i < n && j < m {
        let next = ((i + 1) * m).min((j + 1) * n);
        total += (next - t) as f64 * (a[i] - b[j]).abs();
        t = next;
        if t == (i + 1) * m {
            i += 1;
        }
        if t == (j + 1) * n {
            j += 1;
        }
    }
    Ok(total / (n * m) as f64)
}

/// `E|⟨θ, x⟩|` for θ uniform on the unit sphere of `R^d` and unit `x`:
/// `Γ(d/2) / (√π Γ((d+1)/2))`.
pub fn projection_constant(dim: usize) -> f64 {
    // ratio via the recurrence c_{d+2} = c_d · d / (d + 1)
    let (mut c, mut d) = if dim % 2 == 1 { (1.0, 1) } else { (2.0 / std::f64::consts::PI, 2) };
    while d < dim {
        c *= d as f64 / (d + 1) as f64;
        d += 2;
    }
    c
}

/// Sliced W1 between two point clouds: the mean 1-D W1 along `projections`
/// random unit directions, divided by [`projection_constant`] so that a pure
/// translation by `v` scores `‖v‖` in every dimension. In 1-D this is exact W1.
pub fn sliced_wasserstein(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("dimension {} vs {}", a.ncols(), b.ncols())));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if projections == 0 {
        return Err(Error::Invalid("projections must be at least 1".into()));
    }
    let dim = a.ncols();
    if dim == 1 {
        let xa: Vec<f64> = a.column(0).to_vec();
        let xb: Vec<f64> = b.column(0).to_vec();
        return wasserstein_1d(&xa, &xb);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..projections {
        let theta = random_direction(&mut rng, dim);
        let pa = a.dot(&theta).to_vec();
        let pb = b.dot(&theta).to_vec();
        total += wasserstein_1d(&pa, &pb)?;
    }
    Ok(total / projections as f64 / projection_constant(dim))
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

pub fn wasserstein_feature_distance(
    a: &DomainDataset,
    b: &DomainDataset,
    projections: usize,
    seed: u64,
) -> Result<f64> {
    sliced_wasserstein(a.features.view(), b.features.view(), projections, seed)
}

/// χ²(p‖q) = Σ (p_i − q_i)² / (q_i + ε) between two class distributions.
/// Asymmetric: `q` (the target) is in the denominator.
pub fn chi_square(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("{} vs {} classes", p.len(), q.len())));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(p.iter().zip(q).map(|(p, q)| (p - q).powi(2) / (q + epsilon)).sum())
}

/// χ² divergence from the source's empirical class distribution to the target's.
pub fn chi_square_label_divergence(source: &DomainDataset, target: &DomainDataset, epsilon: f64) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if source.n_classes != target.n_classes {
        return Err(Error::Shape(format!(
            "label universes differ: {} vs {} classes",
            source.n_classes, target.n_classes
        )));
    }
    chi_square(&source.class_distribution(), &target.class_distribution(), epsilon)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::CorrelationUndefined("need at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::CorrelationUndefined("constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Test error per ordered `(source, target)` pair.
pub type ErrorTable = BTreeMap<(String, String), f64>;

pub fn load_error_table(path: &Path) -> Result<ErrorTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut table = ErrorTable::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: i + 1,
                column: "row".into(),
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let error: f64 = record[2].trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row: i + 1,
            column: "test_error".into(),
            message: format!("cannot parse `{}`", &record[2]),
        })?;
        table.insert((record[0].trim().to_string(), record[1].trim().to_string()), error);
    }
    Ok(table)
}

pub fn save_error_table(table: &ErrorTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source", "target", "test_error"])?;
    for ((s, t), e) in table {
        w.write_record([s.as_str(), t.as_str(), &e.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftPair {
    pub source: String,
    pub target: String,
    pub feature_distance: f64,
    pub label_distance: f64,
    pub test_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub projections: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub pairs: Vec<ShiftPair>,
    pub pearson_feature_error: Option<f64>,
    pub pearson_label_error: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftOptions {
    pub projections: usize,
    pub seed: u64,
    pub epsilon: f64,
}

impl Default for ShiftOptions {
    fn default() -> Self {
        ShiftOptions {
            projections: DEFAULT_PROJECTIONS,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Distances for every ordered pair of distinct domains, optionally joined
/// with per-pair test errors and correlated against them.
pub fn build_shift_matrix(
    domains: &[DomainDataset],
    errors: Option<&ErrorTable>,
    opts: ShiftOptions,
) -> Result<ShiftReport> {
    if domains.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 domains, got {}", domains.len())));
    }
    let mut ids = BTreeSet::new();
    for d in domains {
        if !ids.insert(d.domain_id.as_str()) {
            return Err(Error::Invalid(format!("duplicate domain id `{}`", d.domain_id)));
        }
    }
    let keys: Vec<(usize, usize)> = (0..domains.len())
        .flat_map(|s| (0..domains.len()).filter(move |&t| t != s).map(move |t| (s, t)))
        .collect();
    // Every pair projects onto the same directions.
    let mut pairs = keys
        .par_iter()
        .map(|&(s, t)| {
            let (a, b) = (&domains[s], &domains[t]);
            Ok(ShiftPair {
                source: a.domain_id.clone(),
                target: b.domain_id.clone(),
                feature_distance: wasserstein_feature_distance(a, b, opts.projections, opts.seed)?,
                label_distance: chi_square_label_divergence(a, b, opts.epsilon)?,
                test_error: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = ShiftReport {
        projections: opts.projections,
        seed: opts.seed,
        epsilon: opts.epsilon,
        pairs: Vec::new(),
        pearson_feature_error: None,
        pearson_label_error: None,
        warnings: Vec::new(),
    };
    if let Some(table) = errors {
        let missing: Vec<String> = pairs
            .iter()
            .filter(|p| !table.contains_key(&(p.source.clone(), p.target.clone())))
            .map(|p| format!("{}->{}", p.source, p.target))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Invalid(format!("error table lacks pairs: {}", missing.join(", "))));
        }
        for p in &mut pairs {
            p.test_error = Some(table[&(p.source.clone(), p.target.clone())]);
        }
        let err: Vec<f64> = pairs.iter().filter_map(|p| p.test_error).collect();
        let feat: Vec<f64> = pairs.iter().map(|p| p.feature_distance).collect();
        let label: Vec<f64> = pairs.iter().map(|p| p.label_distance).collect();
        match pearson(&feat, &err) {
            Ok(r) => report.pearson_feature_error = Some(r),
            Err(e) => report.warnings.push(format!("feature/error correlation: {e}")),
        }
        match pearson(&label, &err) {
            Ok(r) => report.pearson_label_error = Some(r),
            Err(e) => report.warnings.push(format!("label/error correlation: {e}")),
        }
    }
    report.pairs = pairs;
    Ok(report)
}

impl ShiftReport {
    /// One row per ordered pair: `source,target,feature_distance,label_distance,test_error`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["source", "target", "feature_distance", "label_distance", "test_error"])?;
        for p in &self.pairs {
            w.write_record([
                p.source.clone(),
                p.target.clone(),
                p.feature_distance.to_string(),
                p.label_distance.to_string(),
                p.test_error.map(|e| e.to_string()).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` next to each other.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.to_json()?).map_err(|e| Error::io(&json_path, e))
    }
}

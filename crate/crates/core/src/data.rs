//! Domain datasets: the in-memory model, a Gaussian-mixture generator with
//! independent knobs for feature shift, label shift and group structure, and
//! the split / sampling / file utilities built on top of it.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_TOLERANCE: f64 = 1e-9;

/// Labeled samples of a single domain.
///
/// `n_classes` is the experiment-wide label space, so a dataset may contain
/// only a subset of the classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain_id: String,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub sensitive: Vec<usize>,
    pub sample_ids: Vec<String>,
    pub n_classes: usize,
    pub n_groups: usize,
}

impl DomainDataset {
    pub fn new(
        domain_id: impl Into<String>,
        features: Array2<f64>,
        labels: Vec<usize>,
        sensitive: Vec<usize>,
        sample_ids: Vec<String>,
        n_classes: usize,
        n_groups: usize,
    ) -> Result<Self> {
        let data = DomainDataset {
            domain_id: domain_id.into(),
            features,
            labels,
            sensitive,
            sample_ids,
            n_classes,
            n_groups,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if self.features.ncols() == 0 {
            return Err(Error::Shape("feature dimensionality must be at least 1".into()));
        }
        if self.labels.len() != n || self.sensitive.len() != n || self.sample_ids.len() != n {
            return Err(Error::Shape(format!(
                "{} rows but {} labels, {} sensitive ids, {} sample ids",
                n,
                self.labels.len(),
                self.sensitive.len(),
                self.sample_ids.len()
            )));
        }
        if self.n_classes == 0 || self.n_groups == 0 {
            return Err(Error::Invalid("class and group counts must be positive".into()));
        }
        if let Some((i, &y)) = self.labels.iter().enumerate().find(|(_, &y)| y >= self.n_classes) {
            return Err(Error::Invalid(format!(
                "row {i}: label {y} outside [0, {})",
                self.n_classes
            )));
        }
        if let Some((i, &g)) = self.sensitive.iter().enumerate().find(|(_, &g)| g >= self.n_groups) {
            return Err(Error::Invalid(format!(
                "row {i}: sensitive id {g} outside [0, {})",
                self.n_groups
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &self.sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Invalid(format!("duplicate sample id `{id}`")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Empirical class distribution over the global label space.
    pub fn class_distribution(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        self.class_counts().into_iter().map(|c| c as f64 / n).collect()
    }

    /// A label-free view of this dataset, used wherever the data plays the
    /// role of an unlabeled target domain.
    pub fn unlabeled(&self) -> Unlabeled<'_> {
        Unlabeled {
            domain_id: &self.domain_id,
            features: self.features.view(),
        }
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            domain_id: self.domain_id.clone(),
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sensitive: indices.iter().map(|&i| self.sensitive[i]).collect(),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            n_classes: self.n_classes,
            n_groups: self.n_groups,
        }
    }
}

/// Target-domain features without labels.
///
/// Adaptation routines only ever receive this type, so they cannot read
/// target labels.
#[derive(Debug, Clone, Copy)]
pub struct Unlabeled<'a> {
    pub domain_id: &'a str,
    pub features: ArrayView2<'a, f64>,
}

impl Unlabeled<'_> {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Owned counterpart of [`Unlabeled`], e.g. a target file read without its
/// label column.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    pub domain_id: String,
    pub features: Array2<f64>,
}

impl UnlabeledDataset {
    pub fn view(&self) -> Unlabeled<'_> {
        Unlabeled {
            domain_id: &self.domain_id,
            features: self.features.view(),
        }
    }
}

/// Generator parameters for one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub n_samples: usize,
    pub dim: usize,
    /// One mean vector per class (M × dim).
    pub class_means: Vec<Vec<f64>>,
    /// Per-coordinate standard deviation of the class Gaussians.
    pub class_cov_scale: f64,
    pub label_distribution: Vec<f64>,
    pub sensitive_distribution: Vec<f64>,
    /// One additive offset per sensitive group (|S| × dim).
    pub sensitive_mean_offset: Vec<Vec<f64>>,
    pub seed: u64,
}

impl DomainSpec {
    pub fn n_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn n_groups(&self) -> usize {
        self.sensitive_distribution.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Invalid("n_samples must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Invalid("dim must be at least 1".into()));
        }
        if !(self.class_cov_scale > 0.0 && self.class_cov_scale.is_finite()) {
            return Err(Error::Invalid(format!(
                "class_cov_scale must be positive, got {}",
                self.class_cov_scale
            )));
        }
        if self.class_means.is_empty() {
            return Err(Error::Invalid("at least one class mean is required".into()));
        }
        if self.class_means.len() != self.label_distribution.len() {
            return Err(Error::Shape(format!(
                "{} class means but label_distribution has {} entries",
                self.class_means.len(),
                self.label_distribution.len()
            )));
        }
        if self.sensitive_mean_offset.len() != self.sensitive_distribution.len() {
            return Err(Error::Shape(format!(
                "{} group offsets but sensitive_distribution has {} entries",
                self.sensitive_mean_offset.len(),
                self.sensitive_distribution.len()
            )));
        }
        for (what, rows) in [("class mean", &self.class_means), ("group offset", &self.sensitive_mean_offset)] {
            if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != self.dim) {
                return Err(Error::Shape(format!(
                    "{what} {i} has length {}, expected {}",
                    row.len(),
                    self.dim
                )));
            }
        }
        check_distribution("label_distribution", &self.label_distribution)?;
        check_distribution("sensitive_distribution", &self.sensitive_distribution)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: DomainSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Invalid(format!("{name} is empty")));
    }
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Invalid(format!("{name} has a negative or non-finite entry {v}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::Invalid(format!("{name} sums to {total}, expected 1")));
    }
    Ok(())
}

/// Normalises non-negative weights into a probability vector.
pub fn normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Class names used by the label-distribution presets, in preset order.
pub const PRESET_CLASSES: [&str; 8] = ["NEV", "MEL", "BCC", "BKL", "AK", "SCC", "DF", "VL"];

/// Per-class sample counts of the public dermatology collections, in
/// [`PRESET_CLASSES`] order. Derm7pt's dermoscopic and clinical halves share
/// one distribution.
pub fn preset_class_counts(name: &str) -> Option<[f64; 8]> {
    let counts = match name {
        "isic2018" => [6705.0, 1113.0, 514.0, 1099.0, 0.0, 0.0, 115.0, 142.0],
        "isic2020" => [5193.0, 584.0, 0.0, 223.0, 0.0, 0.0, 0.0, 0.0],
        "pad" => [244.0, 52.0, 845.0, 235.0, 730.0, 192.0, 0.0, 0.0],
        "fitz-roi" => [140.0, 299.0, 416.0, 52.0, 104.0, 408.0, 77.0, 0.0],
        "d7pt-d" | "d7pt-c" => [475.0, 191.0, 35.0, 67.0, 0.0, 0.0, 13.0, 22.0],
        _ => return None,
    };
    Some(counts)
}

/// Eight-class label distribution of a named collection.
pub fn preset_label_distribution(name: &str) -> Option<Vec<f64>> {
    preset_class_counts(name).map(|c| normalize(&c))
}

/// Nevus-vs-melanoma distribution of a named collection, renormalised over
/// the two classes (class 0 = NEV, class 1 = MEL).
pub fn preset_binary_distribution(name: &str) -> Option<Vec<f64>> {
    preset_class_counts(name).map(|c| normalize(&c[..2]))
}

/// Draws a dataset from `spec`.
///
/// Per sample: class, then group, then `dim` standard-normal coordinates, all
/// from one ChaCha8 stream seeded with `spec.seed`.
pub fn generate_domain(spec: &DomainSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let class_dist = WeightedIndex::new(&spec.label_distribution)
        .map_err(|e| Error::Invalid(format!("label_distribution: {e}")))?;
    let group_dist = WeightedIndex::new(&spec.sensitive_distribution)
        .map_err(|e| Error::Invalid(format!("sensitive_distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let n = spec.n_samples;
    let mut features = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    let mut sensitive = Vec::with_capacity(n);
    for mut row in features.rows_mut() {
        let c = class_dist.sample(&mut rng);
        let g = group_dist.sample(&mut rng);
        for (j, x) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = spec.class_means[c][j] + spec.sensitive_mean_offset[g][j] + spec.class_cov_scale * z;
        }
        labels.push(c);
        sensitive.push(g);
    }
    let sample_ids = (0..n).map(|i| format!("{}-{i}", spec.domain_id)).collect();
    DomainDataset::new(
        spec.domain_id.clone(),
        features,
        labels,
        sensitive,
        sample_ids,
        spec.n_classes(),
        spec.n_groups(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub train: DomainDataset,
    pub test: DomainDataset,
    pub ratio: f64,
}

/// Number of test samples a class of size `count` contributes.
pub fn stratified_test_count(count: usize, ratio: f64) -> usize {
    match count {
        0 | 1 => 0,
        n => ((ratio * n as f64).round() as usize).clamp(1, n - 1),
    }
}

/// Class-stratified train/test split. Both halves keep the input row order.
pub fn stratified_split(data: &DomainDataset, ratio: f64, seed: u64) -> Result<SplitPair> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.n_classes];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_test = vec![false; data.len()];
    for members in by_class.iter_mut() {
        let k = stratified_test_count(members.len(), ratio);
        members.shuffle(&mut rng);
        for &i in members.iter().take(k) {
            in_test[i] = true;
        }
    }
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| in_test[i]);
    Ok(SplitPair {
        train: data.select(&train_idx),
        test: data.select(&test_idx),
        ratio,
    })
}

/// Row-wise concatenation into a single "combined" source.
pub fn concat_domains(domains: &[&DomainDataset]) -> Result<DomainDataset> {
    let first = domains
        .first()
        .ok_or_else(|| Error::Invalid("cannot concatenate an empty list of domains".into()))?;
    let dim = first.dim();
    let n_classes = first.n_classes;
    for d in domains {
        if d.dim() != dim {
            return Err(Error::Shape(format!(
                "domain `{}` has dim {} but `{}` has dim {}",
                d.domain_id,
                d.dim(),
                first.domain_id,
                dim
            )));
        }
        if d.n_classes != n_classes {
            return Err(Error::Shape(format!(
                "domain `{}` uses {} classes but `{}` uses {}",
                d.domain_id, d.n_classes, first.domain_id, n_classes
            )));
        }
    }
    let views: Vec<_> = domains.iter().map(|d| d.features.view()).collect();
    let features = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let mut labels = Vec::with_capacity(features.nrows());
    let mut sensitive = Vec::with_capacity(features.nrows());
    let mut sample_ids = Vec::with_capacity(features.nrows());
    for d in domains {
        labels.extend_from_slice(&d.labels);
        sensitive.extend_from_slice(&d.sensitive);
        sample_ids.extend(d.sample_ids.iter().map(|id| format!("{}/{id}", d.domain_id)));
    }
    let n_groups = domains.iter().map(|d| d.n_groups).max().unwrap_or(1);
    DomainDataset::new("combined", features, labels, sensitive, sample_ids, n_classes, n_groups)
}

/// Per-sample weights `1 / (M * count(label))` for class-balanced sampling
/// under a uniform target label prior.
pub fn weighted_sampler_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(Error::Invalid(format!("label {y} outside [0, {n_classes})")));
        }
        counts[y] += 1;
    }
    Ok(labels
        .iter()
        .map(|&y| 1.0 / (n_classes as f64 * counts[y] as f64))
        .collect())
}

/// Draws indices with replacement, proportionally to class-balancing weights.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    index: WeightedIndex<f64>,
}

impl WeightedSampler {
    pub fn new(labels: &[usize], n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let weights = weighted_sampler_weights(labels, n_classes)?;
        let index = WeightedIndex::new(&weights).map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(WeightedSampler { index })
    }

    pub fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<usize> {
        (0..count).map(|_| self.index.sample(rng)).collect()
    }
}

/// Label space of a dataset file. The file format does not carry it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub n_classes: usize,
    pub n_groups: usize,
}

const FIXED_COLUMNS: [&str; 4] = ["id", "domain", "label", "sensitive"];

fn feature_header(dim: usize) -> Vec<String> {
    FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|j| format!("f{j}")))
        .collect()
}

/// Writes `data` as comma-separated text. Floats use the shortest
/// representation that parses back to the same value.
pub fn save_dataset(data: &DomainDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(feature_header(data.dim()))?;
    let mut record = Vec::with_capacity(4 + data.dim());
    for (i, row) in data.features.rows().into_iter().enumerate() {
        record.clear();
        record.push(data.sample_ids[i].clone());
        record.push(data.domain_id.clone());
        record.push(data.labels[i].to_string());
        record.push(data.sensitive[i].to_string());
        record.extend(row.iter().map(|x| x.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct RawTable {
    dim: usize,
    domain_id: String,
    rows: Vec<csv::StringRecord>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    if header.len() < 5 {
        return Err(parse_err(0, "header", format!("expected at least 5 columns, found {}", header.len())));
    }
    let dim = header.len() - 4;
    for (j, (found, expected)) in header.iter().zip(feature_header(dim)).enumerate() {
        if found != expected {
            return Err(parse_err(0, "header", format!("column {j} is `{found}`, expected `{expected}`")));
        }
    }
    let rows = reader.records().collect::<std::result::Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let domain_id = rows[0].get(1).unwrap_or_default().to_string();
    Ok(RawTable { dim, domain_id, rows })
}

fn parse_features(path: &Path, table: &RawTable) -> Result<Array2<f64>> {
    let mut features = Array2::zeros((table.rows.len(), table.dim));
    for (i, record) in table.rows.iter().enumerate() {
        for j in 0..table.dim {
            let raw = record.get(4 + j).unwrap_or_default();
            let value: f64 = raw.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row: i + 1,
                column: format!("f{j}"),
                message: format!("`{raw}` is not a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: i + 1,
                    column: format!("f{j}"),
                    message: format!("non-finite value `{raw}`"),
                });
            }
            features[[i, j]] = value;
        }
    }
    Ok(features)
}

/// Reads a dataset file. Rows are numbered from 1 in error messages; the
/// header is row 0.
pub fn load_dataset(path: &Path, schema: DatasetSchema) -> Result<DomainDataset> {
    let table = read_table(path)?;
    let features = parse_features(path, &table)?;
    let parse_index = |row: usize, column: &str, raw: &str, bound: usize| -> Result<usize> {
        let value: usize = raw.trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row,
            column: column.to_string(),
            message: format!("`{raw}` is not a non-negative integer"),
        })?;
        if value >= bound {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                column: column.to_string(),
                message: format!("{value} outside [0, {bound})"),
            });
        }
        Ok(value)
    };
    let mut labels = Vec::with_capacity(table.rows.len());
    let mut sensitive = Vec::with_capacity(table.rows.len());
    let mut sample_ids = Vec::with_capacity(table.rows.len());
    for (i, record) in table.rows.iter().enumerate() {
        sample_ids.push(record.get(0).unwrap_or_default().to_string());
        labels.push(parse_index(i + 1, "label", record.get(2).unwrap_or_default(), schema.n_classes)?);
        sensitive.push(parse_index(i + 1, "sensitive", record.get(3).unwrap_or_default(), schema.n_groups)?);
    }
    DomainDataset::new(
        table.domain_id,
        features,
        labels,
        sensitive,
        sample_ids,
        schema.n_classes,
        schema.n_groups,
    )
}

/// Reads only the features of a dataset file. The label and sensitive
/// columns are never parsed and may be blank.
pub fn load_unlabeled(path: &Path) -> Result<UnlabeledDataset> {
    let table = read_table(path)?;
    let features = parse_features(path, &table)?;
    Ok(UnlabeledDataset {
        domain_id: table.domain_id,
        features,
    })
}

/// Per-class counts keyed by class id, for reporting.
pub fn class_histogram(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut map = BTreeMap::new();
    for &y in labels {
        *map.entry(y).or_insert(0) += 1;
    }
    map
}

//! Classification quality and group-fairness metrics.
//!
//! The fairness metrics are ratios of the worst to the best sensitive group,
//! so 1 means parity and 0 maximal disparity:
//!
//! * PQD: per-group quality (accuracy or AUROC), min over max.
//! * DPM: per class, min over max of the group prediction rates `p(ŷ=i | s=j)`,
//!   averaged over classes.
//! * EOM: the same with per-group recalls `p(ŷ=i | y=i, s=j)`.
//!
//! When min and max are both zero the ratio is 1.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
    /// Positive-class scores; binary tasks only.
    pub scores: Option<Vec<f64>>,
    pub sensitive: Vec<usize>,
    pub n_classes: usize,
    pub n_groups: usize,
}

impl PredictionSet {
    pub fn new(
        y_true: Vec<usize>,
        y_pred: Vec<usize>,
        scores: Option<Vec<f64>>,
        sensitive: Vec<usize>,
        n_classes: usize,
        n_groups: usize,
    ) -> Result<Self> {
        let p = PredictionSet {
            y_true,
            y_pred,
            scores,
            sensitive,
            n_classes,
            n_groups,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y_true.len();
        if self.y_pred.len() != n || self.sensitive.len() != n {
            return Err(Error::Shape(format!(
                "{n} true labels, {} predictions, {} group ids",
                self.y_pred.len(),
                self.sensitive.len()
            )));
        }
        if let Some(s) = &self.scores {
            if s.len() != n {
                return Err(Error::Shape(format!("{n} rows but {} scores", s.len())));
            }
            if let Some(v) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Invalid(format!("score {v} outside [0, 1]")));
            }
        }
        if let Some(y) = self.y_true.iter().chain(&self.y_pred).find(|&&y| y >= self.n_classes) {
            return Err(Error::Invalid(format!("label {y} outside [0, {})", self.n_classes)));
        }
        if let Some(g) = self.sensitive.iter().find(|&&g| g >= self.n_groups) {
            return Err(Error::Invalid(format!("group {g} outside [0, {})", self.n_groups)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }

    /// Rows belonging to `group`.
    pub fn group(&self, group: usize) -> PredictionSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.sensitive[i] == group).collect();
        PredictionSet {
            y_true: idx.iter().map(|&i| self.y_true[i]).collect(),
            y_pred: idx.iter().map(|&i| self.y_pred[i]).collect(),
            scores: self.scores.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
            sensitive: vec![group; idx.len()],
            n_classes: self.n_classes,
            n_groups: self.n_groups,
        }
    }

    fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups];
        for &g in &self.sensitive {
            sizes[g] += 1;
        }
        sizes
    }

    fn require_nonempty_groups(&self) -> Result<Vec<usize>> {
        let sizes = self.group_sizes();
        match sizes.iter().position(|&n| n == 0) {
            Some(group) => Err(Error::EmptyGroup { group }),
            None => Ok(sizes),
        }
    }
}

pub fn accuracy_of(y_true: &[usize], y_pred: &[usize]) -> f64 {
    if y_true.is_empty() {
        return 0.0;
    }
    y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count() as f64 / y_true.len() as f64
}

/// Fraction of correct predictions.
pub fn accuracy(p: &PredictionSet) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(accuracy_of(&p.y_true, &p.y_pred))
}

/// Mean per-class recall over the classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut support = vec![0usize; n_classes];
    let mut hits = vec![0usize; n_classes];
    for (&y, &p) in y_true.iter().zip(y_pred) {
        support[y] += 1;
        if y == p {
            hits[y] += 1;
        }
    }
    let recalls: Vec<f64> = support
        .iter()
        .zip(&hits)
        .filter(|(&s, _)| s > 0)
        .map(|(&s, &h)| h as f64 / s as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Area under the ROC curve via the rank-sum statistic with mid-ranks for
/// ties: the probability that a random positive outscores a random
/// negative, ties counting one half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AurocUndefined(format!(
            "need both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (0-based) share the mid-rank, 1-based
        let mid_rank = (start + end + 1) as f64 / 2.0;
        rank_sum += mid_rank * order[start..end].iter().filter(|&&i| positive[i]).count() as f64;
        start = end;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUROC of a binary prediction set (class 1 positive).
pub fn auroc_of(p: &PredictionSet) -> Result<f64> {
    let scores = p
        .scores
        .as_ref()
        .ok_or_else(|| Error::AurocUndefined("prediction set carries no scores".into()))?;
    let positive: Vec<bool> = p.y_true.iter().map(|&y| y == 1).collect();
    auroc(scores, &positive)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityBasis {
    Accuracy,
    Auroc,
}

impl QualityBasis {
    /// AUROC for binary tasks, accuracy otherwise.
    pub fn for_classes(n_classes: usize) -> Self {
        if n_classes == 2 {
            QualityBasis::Auroc
        } else {
            QualityBasis::Accuracy
        }
    }
}

/// Worst-over-best ratio with the 0/0 = 1 convention.
fn disparity_ratio(values: impl IntoIterator<Item = f64>) -> f64 {
    let (min, max) = values
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if max <= 0.0 {
        1.0
    } else {
        min / max
    }
}

pub fn group_quality(p: &PredictionSet, basis: QualityBasis) -> Result<Vec<f64>> {
    p.validate()?;
    p.require_nonempty_groups()?;
    (0..p.n_groups)
        .map(|j| {
            let g = p.group(j);
            match basis {
                QualityBasis::Accuracy => accuracy(&g),
                QualityBasis::Auroc => {
                    auroc_of(&g).map_err(|e| Error::AurocUndefined(format!("group {j}: {e}")))
                }
            }
        })
        .collect()
}

/// Predictive quality disparity: `min_j q_j / max_j q_j`.
pub fn pqd(p: &PredictionSet, basis: QualityBasis) -> Result<f64> {
    let quality = group_quality(p, basis)?;
    pqd_from_quality(&quality)
}

fn pqd_from_quality(quality: &[f64]) -> Result<f64> {
    if quality.len() == 1 {
        return Ok(1.0);
    }
    let max = quality.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        return Err(Error::Undefined("PQD: best group quality is 0".into()));
    }
    let min = quality.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(min / max)
}

/// `rates[j][i] = p(ŷ = i | s = j)`.
pub fn prediction_rates(p: &PredictionSet) -> Result<Vec<Vec<f64>>> {
    p.validate()?;
    let sizes = p.require_nonempty_groups()?;
    let mut counts = vec![vec![0usize; p.n_classes]; p.n_groups];
    for (&g, &yhat) in p.sensitive.iter().zip(&p.y_pred) {
        counts[g][yhat] += 1;
    }
    Ok(counts
        .into_iter()
        .zip(sizes)
        .map(|(row, n)| row.into_iter().map(|c| c as f64 / n as f64).collect())
        .collect())
}

/// Demographic disparity: class-averaged min/max ratio of group prediction rates.
pub fn dpm(p: &PredictionSet) -> Result<f64> {
    let rates = prediction_rates(p)?;
    Ok(dpm_from_rates(&rates, p.n_classes))
}

fn dpm_from_rates(rates: &[Vec<f64>], n_classes: usize) -> f64 {
    (0..n_classes)
        .map(|i| disparity_ratio(rates.iter().map(|r| r[i])))
        .sum::<f64>()
        / n_classes as f64
}

/// `recalls[j][i] = p(ŷ = i | y = i, s = j)`, `None` when group `j` has no
/// true instance of class `i`.
pub fn recall_table(p: &PredictionSet) -> Result<Vec<Vec<Option<f64>>>> {
    p.validate()?;
    p.require_nonempty_groups()?;
    let mut support = vec![vec![0usize; p.n_classes]; p.n_groups];
    let mut hits = vec![vec![0usize; p.n_classes]; p.n_groups];
    for ((&g, &y), &yhat) in p.sensitive.iter().zip(&p.y_true).zip(&p.y_pred) {
        support[g][y] += 1;
        if y == yhat {
            hits[g][y] += 1;
        }
    }
    Ok(support
        .into_iter()
        .zip(hits)
        .map(|(s, h)| {
            s.into_iter()
                .zip(h)
                .map(|(s, h)| (s > 0).then(|| h as f64 / s as f64))
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EomDetail {
    pub value: f64,
    /// Classes without true instances in some (but not every) group; left
    /// out of the average.
    pub skipped_classes: Vec<usize>,
    /// Classes without true instances in any group; counted as ratio 1.
    pub absent_classes: Vec<usize>,
}

/// Equality of opportunity: class-averaged min/max ratio of group recalls.
///
/// A class with no true instances anywhere contributes 1. A class missing
/// from only some groups is skipped, or rejected when `strict`.
pub fn eom_detailed(p: &PredictionSet, strict: bool) -> Result<EomDetail> {
    let table = recall_table(p)?;
    eom_from_table(&table, p.n_classes, strict)
}

fn eom_from_table(table: &[Vec<Option<f64>>], n_classes: usize, strict: bool) -> Result<EomDetail> {
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = Vec::new();
    let mut absent = Vec::new();
    for i in 0..n_classes {
        let column: Vec<Option<f64>> = table.iter().map(|row| row[i]).collect();
        let present = column.iter().filter(|r| r.is_some()).count();
        if present == column.len() {
            total += disparity_ratio(column.into_iter().flatten());
            counted += 1;
            continue;
        }
        if strict {
            let group = column.iter().position(|r| r.is_none()).unwrap_or(0);
            return Err(Error::Undefined(format!(
                "EOM: class {i} has no true instances in group {group}"
            )));
        }
        if present == 0 {
            absent.push(i);
            total += 1.0;
            counted += 1;
        } else {
            skipped.push(i);
        }
    }
    let value = if counted == 0 { 1.0 } else { total / counted as f64 };
    Ok(EomDetail {
        value,
        skipped_classes: skipped,
        absent_classes: absent,
    })
}

pub fn eom(p: &PredictionSet) -> Result<f64> {
    eom_detailed(p, false).map(|d| d.value)
}

/// All three fairness metrics with the intermediate tables they are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub pqd: f64,
    pub dpm: f64,
    pub eom: f64,
    pub quality_basis: QualityBasis,
    pub group_sizes: Vec<usize>,
    pub group_quality: Vec<f64>,
    /// `[group][class]` prediction rates.
    pub prediction_rates: Vec<Vec<f64>>,
    /// `[group][class]` recalls; `null` where the group lacks the class.
    pub recalls: Vec<Vec<Option<f64>>>,
    pub warnings: Vec<String>,
}

pub fn fairness_report(p: &PredictionSet, basis: QualityBasis, strict: bool) -> Result<FairnessReport> {
    let group_quality = group_quality(p, basis)?;
    let pqd = pqd_from_quality(&group_quality)?;
    let prediction_rates = prediction_rates(p)?;
    let dpm = dpm_from_rates(&prediction_rates, p.n_classes);
    let recalls = recall_table(p)?;
    let detail = eom_from_table(&recalls, p.n_classes, strict)?;
    let mut warnings = Vec::new();
    if !detail.absent_classes.is_empty() {
        warnings.push(format!(
            "EOM: classes {:?} have no true instances in any group and count as parity",
            detail.absent_classes
        ));
    }
    if !detail.skipped_classes.is_empty() {
        warnings.push(format!(
            "EOM: classes {:?} are missing from some groups and were left out",
            detail.skipped_classes
        ));
    }
    Ok(FairnessReport {
        pqd,
        dpm,
        eom: detail.value,
        quality_basis: basis,
        group_sizes: p.group_sizes(),
        group_quality,
        prediction_rates,
        recalls,
        warnings,
    })
}

/// Bins mapping a raw attribute (skin type, age, ...) to group ids: a value
/// `v ≥ lower` belongs to the first group `i` with `v ≤ upper_edges[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBins {
    pub lower: f64,
    pub upper_edges: Vec<f64>,
}

impl GroupBins {
    /// Fitzpatrick skin type 1-2 / 3-4 / 5-6.
    pub fn fitzpatrick() -> Self {
        GroupBins {
            lower: 1.0,
            upper_edges: vec![2.0, 4.0, 6.0],
        }
    }

    /// Age ≤ 30 / > 30.
    pub fn age() -> Self {
        GroupBins {
            lower: 0.0,
            upper_edges: vec![30.0, f64::INFINITY],
        }
    }

    /// Each integer value `0..groups` is its own group.
    pub fn identity(groups: usize) -> Self {
        GroupBins {
            lower: 0.0,
            upper_edges: (0..groups).map(|g| g as f64).collect(),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.upper_edges.len()
    }

    pub fn group_of(&self, value: f64) -> Result<usize> {
        if value >= self.lower {
            if let Some(g) = self.upper_edges.iter().position(|&edge| value <= edge) {
                return Ok(g);
            }
        }
        Err(Error::Invalid(format!("attribute value {value} falls outside every group bin")))
    }
}

pub fn group_partition(values: &[f64], bins: &GroupBins) -> Result<Vec<usize>> {
    values.iter().map(|&v| bins.group_of(v)).collect()
}

/// Writes `id,y_true,y_pred,score,sensitive` rows. `score` is the
/// positive-class probability for binary tasks and empty otherwise.
pub fn save_predictions(path: &Path, ids: &[String], p: &PredictionSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "y_true", "y_pred", "score", "sensitive"])?;
    for i in 0..p.len() {
        let score = p.scores.as_ref().map(|s| s[i].to_string()).unwrap_or_default();
        w.write_record([
            ids[i].clone(),
            p.y_true[i].to_string(),
            p.y_pred[i].to_string(),
            score,
            p.sensitive[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_predictions(path: &Path, n_classes: usize, n_groups: usize) -> Result<(Vec<String>, PredictionSet)> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "y_true", "y_pred", "score", "sensitive"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 0,
            column: "header".into(),
            message: "expected `id,y_true,y_pred,score,sensitive`".into(),
        });
    }
    let (mut ids, mut y_true, mut y_pred, mut scores, mut groups) = (vec![], vec![], vec![], vec![], vec![]);
    let mut all_scored = true;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let field = |j: usize| record.get(j).unwrap_or_default().trim().to_string();
        let parse_err = |column: &str, raw: String| Error::Parse {
            path: path.to_path_buf(),
            row: i + 1,
            column: column.into(),
            message: format!("cannot parse `{raw}`"),
        };
        ids.push(field(0));
        y_true.push(field(1).parse::<usize>().map_err(|_| parse_err("y_true", field(1)))?);
        y_pred.push(field(2).parse::<usize>().map_err(|_| parse_err("y_pred", field(2)))?);
        if field(3).is_empty() {
            all_scored = false;
        } else {
            scores.push(field(3).parse::<f64>().map_err(|_| parse_err("score", field(3)))?);
        }
        groups.push(field(4).parse::<usize>().map_err(|_| parse_err("sensitive", field(4)))?);
    }
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scores = (all_scored && scores.len() == ids.len()).then_some(scores);
    let p = PredictionSet::new(y_true, y_pred, scores, groups, n_classes, n_groups)?;
    Ok((ids, p))
}

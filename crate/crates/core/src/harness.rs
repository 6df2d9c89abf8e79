//! Leave-one-domain-out experiment orchestration: every domain is the target
//! once, each configured scheme is trained on the remaining domains with the
//! target's labels withheld, and results are aggregated over repeats.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{train_adda, train_dann, train_mdan};
use crate::config::TrainConfig;
use crate::data::{
    concat_domains, generate_domain, load_dataset, stratified_split, DatasetSchema, DomainDataset, DomainSpec,
    Unlabeled,
};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auroc_of, fairness_report, GroupBins, PredictionSet, QualityBasis};
use crate::moment::train_m3sda;
use crate::train::{train_erm, Model, TrainOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Multiclass,
}

impl Task {
    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Binary => "auroc",
            Task::Multiclass => "accuracy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeKind {
    SingleErm,
    SingleDann,
    CombinedErm,
    CombinedDann,
    CombinedAdda,
    MultiMdan,
    MultiM3sda,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 7] = [
        SchemeKind::SingleErm,
        SchemeKind::SingleDann,
        SchemeKind::CombinedErm,
        SchemeKind::CombinedDann,
        SchemeKind::CombinedAdda,
        SchemeKind::MultiMdan,
        SchemeKind::MultiM3sda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::SingleErm => "single-erm",
            SchemeKind::SingleDann => "single-dann",
            SchemeKind::CombinedErm => "combined-erm",
            SchemeKind::CombinedDann => "combined-dann",
            SchemeKind::CombinedAdda => "combined-adda",
            SchemeKind::MultiMdan => "multi-mdan",
            SchemeKind::MultiM3sda => "multi-m3sda",
        }
    }

    pub fn is_single(self) -> bool {
        matches!(self, SchemeKind::SingleErm | SchemeKind::SingleDann)
    }

    /// Uses unlabeled target data during training.
    pub fn is_adaptive(self) -> bool {
        !matches!(self, SchemeKind::SingleErm | SchemeKind::CombinedErm)
    }
}

/// A training scheme, optionally with class-balanced source sampling
/// (written with an `rs-` prefix).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Scheme {
    pub kind: SchemeKind,
    pub resample: bool,
}

impl Scheme {
    pub fn new(kind: SchemeKind, resample: bool) -> Self {
        Scheme { kind, resample }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.resample {
            write!(f, "rs-")?;
        }
        write!(f, "{}", self.kind.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (resample, base) = match s.strip_prefix("rs-") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        SchemeKind::ALL
            .iter()
            .find(|k| k.name() == base)
            .map(|&kind| Scheme { kind, resample })
            .ok_or_else(|| {
                let names: Vec<&str> = SchemeKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown scheme `{s}`; expected [rs-]{{{}}}", names.join(", ")))
            })
    }
}

impl Serialize for Scheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where a domain's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainEntry {
    /// A dataset file; `id` overrides the domain column.
    File { path: PathBuf, id: Option<String> },
    Spec(DomainSpec),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairnessConfig {
    /// Schemes evaluated for fairness; empty means all configured schemes.
    pub schemes: Vec<Scheme>,
    /// Maps the raw sensitive attribute to groups; identity when absent.
    pub bins: Option<GroupBins>,
    /// Reject classes missing from some group instead of skipping them.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub domains: Vec<DomainEntry>,
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_test_ratio")]
    pub test_ratio: f64,
    /// Label space of file-backed domains.
    #[serde(default)]
    pub schema: Option<DatasetSchema>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Partial training configs keyed by scheme name (`multi-mdan`) or full
    /// name (`rs-multi-mdan`); the latter wins.
    #[serde(default)]
    pub overrides: BTreeMap<String, toml::Table>,
    #[serde(default)]
    pub fairness: Option<FairnessConfig>,
}

fn default_repeats() -> usize {
    3
}

fn default_test_ratio() -> f64 {
    0.2
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Config(format!("need at least 2 domains, got {}", self.domains.len())));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if !(self.test_ratio > 0.0 && self.test_ratio < 1.0) {
            return Err(Error::Config(format!("test_ratio must lie in (0, 1), got {}", self.test_ratio)));
        }
        if self.task == Task::Multiclass {
            if let Some(s) = self.schemes.iter().find(|s| s.kind == SchemeKind::SingleDann) {
                return Err(Error::Config(format!(
                    "scheme `{s}` is single-source adaptation, which is not run for multiclass tasks \
                     because a single source may lack target classes"
                )));
            }
        }
        if self.domains.iter().any(|d| matches!(d, DomainEntry::File { .. })) && self.schema.is_none() {
            return Err(Error::Config("file-backed domains need a [schema] with n_classes and n_groups".into()));
        }
        for key in self.overrides.keys() {
            key.parse::<Scheme>()?;
        }
        for s in &self.schemes {
            self.train_config(*s, 0)?;
        }
        Ok(())
    }

    /// Training config of `scheme` with the given seed: base config, then the
    /// scheme-kind override, then the full-name override.
    pub fn train_config(&self, scheme: Scheme, seed: u64) -> Result<TrainConfig> {
        let mut merged = toml::Table::try_from(&self.train)?;
        for key in [scheme.kind.name().to_string(), scheme.to_string()] {
            if let Some(over) = self.overrides.get(&key) {
                merge_tables(&mut merged, over);
            }
        }
        let mut cfg: TrainConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("overrides for `{scheme}`: {e}")))?;
        cfg.resample = scheme.resample;
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Materialises every domain, generating synthetic ones and reading
    /// files relative to `base_dir`.
    pub fn load_domains(&self, base_dir: &Path) -> Result<Vec<DomainDataset>> {
        let domains = self
            .domains
            .iter()
            .map(|entry| match entry {
                DomainEntry::Spec(spec) => generate_domain(spec),
                DomainEntry::File { path, id } => {
                    let schema = self.schema.expect("validated");
                    let mut d = load_dataset(&base_dir.join(path), schema)?;
                    if let Some(id) = id {
                        d.domain_id = id.clone();
                    }
                    Ok(d)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        check_domains(&domains, self.task)?;
        Ok(domains)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

fn merge_tables(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn check_domains(domains: &[DomainDataset], task: Task) -> Result<()> {
    if domains.len() < 2 {
        return Err(Error::Config(format!("need at least 2 domains, got {}", domains.len())));
    }
    let first = &domains[0];
    for d in domains {
        if d.dim() != first.dim() || d.n_classes != first.n_classes {
            return Err(Error::Config(format!(
                "domain `{}` ({} features, {} classes) does not match `{}` ({} features, {} classes)",
                d.domain_id,
                d.dim(),
                d.n_classes,
                first.domain_id,
                first.dim(),
                first.n_classes
            )));
        }
        if domains.iter().filter(|o| o.domain_id == d.domain_id).count() > 1 {
            return Err(Error::Config(format!("duplicate domain id `{}`", d.domain_id)));
        }
    }
    if task == Task::Binary && first.n_classes != 2 {
        return Err(Error::Config(format!("binary task but domains have {} classes", first.n_classes)));
    }
    Ok(())
}

/// Identifies one training run of the matrix, minus the repeat index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub target: String,
    pub scheme: Scheme,
    /// Source domain of single-source schemes.
    pub source: Option<String>,
}

impl CellKey {
    fn label(&self) -> String {
        format!("{}|{}|{}", self.target, self.scheme, self.source.as_deref().unwrap_or("*"))
    }
}

/// `base + repeat + h(cell key)`, where `h` is the leading 64 bits of the
/// key's SHA-256.
pub fn cell_seed(base: u64, repeat: usize, key: &CellKey) -> u64 {
    let digest = Sha256::digest(key.label().as_bytes());
    let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    base.wrapping_add(repeat as u64).wrapping_add(h)
}

/// Seed of a target domain's train/test split; shared by every scheme so
/// that all arms see the same split.
pub fn split_seed(base: u64, target: &str) -> u64 {
    let digest = Sha256::digest(format!("split|{target}").as_bytes());
    base.wrapping_add(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
}

/// Trains one scheme. The target only enters as unlabeled features.
pub fn train_scheme(
    scheme: Scheme,
    sources: &[&DomainDataset],
    target: Unlabeled<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let single = || -> Result<&DomainDataset> {
        match sources {
            [one] => Ok(*one),
            _ => Err(Error::Invalid(format!("{scheme} takes exactly one source, got {}", sources.len()))),
        }
    };
    let mut out = match scheme.kind {
        SchemeKind::SingleErm => train_erm(single()?, cfg)?,
        SchemeKind::SingleDann => train_dann(single()?, target, cfg)?,
        SchemeKind::CombinedErm => train_erm(&concat_domains(sources)?, cfg)?,
        SchemeKind::CombinedDann => train_dann(&concat_domains(sources)?, target, cfg)?,
        SchemeKind::CombinedAdda => train_adda(&concat_domains(sources)?, target, cfg)?,
        SchemeKind::MultiMdan => train_mdan(sources, target, cfg)?,
        SchemeKind::MultiM3sda => train_m3sda(sources, target, cfg)?,
    };
    out.record.scheme = scheme.to_string();
    Ok(out)
}

/// Scores a model on labeled data with `sensitive` mapped through `bins`.
pub fn prediction_set(model: &Model, data: &DomainDataset, bins: Option<&GroupBins>) -> Result<PredictionSet> {
    let pred = model.predict(data.features.view())?;
    let (sensitive, n_groups) = match bins {
        Some(b) => {
            let raw: Vec<f64> = data.sensitive.iter().map(|&s| s as f64).collect();
            (crate::metrics::group_partition(&raw, b)?, b.n_groups())
        }
        None => (data.sensitive.clone(), data.n_groups),
    };
    let scores = (data.n_classes == 2).then(|| pred.positive_scores());
    PredictionSet::new(data.labels.clone(), pred.labels, scores, sensitive, data.n_classes, n_groups)
}

/// AUROC for binary tasks, accuracy otherwise.
pub fn task_metric(task: Task, p: &PredictionSet) -> Result<f64> {
    match task {
        Task::Binary => auroc_of(p),
        Task::Multiclass => accuracy(p),
    }
}

/// Outcome of one (cell, repeat).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub target: String,
    pub scheme: Scheme,
    pub source: Option<String>,
    pub repeat: usize,
    pub seed: u64,
    pub metric: Option<f64>,
    /// Why no metric was produced (divergence or undefined metric).
    pub failure: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub mean: f64,
    /// Population standard deviation over the successful repeats.
    pub std: f64,
    pub runs: usize,
    pub failed: usize,
}

impl CellSummary {
    pub fn from_values(values: &[f64], failed: usize) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(CellSummary {
            mean,
            std: var.sqrt(),
            runs: values.len(),
            failed,
        })
    }
}

/// One table row: a scheme, or a (single-source scheme, source) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scheme: Scheme,
    pub source: Option<String>,
    /// Keyed by target domain; `None` when every repeat failed.
    pub cells: BTreeMap<String, Option<CellSummary>>,
    /// Mean of this row's cell means.
    pub average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeBlock {
    pub scheme: Scheme,
    pub rows: Vec<ReportRow>,
    /// Per target, mean of the block's cell means.
    pub column_averages: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub task: Task,
    pub metric: String,
    pub base_seed: u64,
    pub repeats: usize,
    pub targets: Vec<String>,
    pub blocks: Vec<SchemeBlock>,
    pub records: Vec<CellRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fairness: Option<Vec<FairnessCell>>,
}

impl EvalReport {
    pub fn failed_cells(&self) -> usize {
        self.records.iter().filter(|r| r.failure.is_some()).count()
    }

    pub fn diverged_cells(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.failure.as_deref().is_some_and(|f| f.starts_with(DIVERGED)))
            .count()
    }
}

const DIVERGED: &str = "diverged";

/// A planned training run.
#[derive(Debug, Clone)]
struct Job {
    key: CellKey,
    repeat: usize,
    seed: u64,
}

fn plan_jobs(cfg: &ExperimentConfig, schemes: &[Scheme], domain_ids: &[String]) -> Vec<Job> {
    let mut jobs = Vec::new();
    for target in domain_ids {
        for &scheme in schemes {
            let sources: Vec<Option<String>> = if scheme.kind.is_single() {
                domain_ids.iter().filter(|d| *d != target).cloned().map(Some).collect()
            } else {
                vec![None]
            };
            for source in sources {
                let key = CellKey {
                    target: target.clone(),
                    scheme,
                    source,
                };
                for repeat in 0..cfg.repeats {
                    jobs.push(Job {
                        seed: cell_seed(cfg.seed, repeat, &key),
                        key: key.clone(),
                        repeat,
                    });
                }
            }
        }
    }
    jobs
}

/// Splits of every domain, in input order.
fn split_all(cfg: &ExperimentConfig, domains: &[DomainDataset]) -> Result<Vec<(DomainDataset, DomainDataset)>> {
    domains
        .iter()
        .map(|d| {
            let s = stratified_split(d, cfg.test_ratio, split_seed(cfg.seed, &d.domain_id))?;
            Ok((s.train, s.test))
        })
        .collect()
}

/// Trains one job. Sources contribute their train split; the target only
/// its train-split features.
fn run_job(
    cfg: &ExperimentConfig,
    job: &Job,
    ids: &[String],
    splits: &[(DomainDataset, DomainDataset)],
) -> Result<std::result::Result<TrainOutput, Error>> {
    let t = ids.iter().position(|d| *d == job.key.target).expect("planned target");
    let sources: Vec<&DomainDataset> = match &job.key.source {
        Some(s) => vec![&splits[ids.iter().position(|d| d == s).expect("planned source")].0],
        None => (0..ids.len()).filter(|&i| i != t).map(|i| &splits[i].0).collect(),
    };
    let train_cfg = cfg.train_config(job.key.scheme, job.seed)?;
    match train_scheme(job.key.scheme, &sources, splits[t].0.unlabeled(), &train_cfg) {
        Ok(out) => Ok(Ok(out)),
        Err(e) if e.is_divergence() => Ok(Err(e)),
        Err(e) => Err(e),
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))
}

/// Runs the full leave-one-domain-out matrix on a pool of `workers` threads.
/// The report does not depend on `workers`.
pub fn run_matrix(cfg: &ExperimentConfig, domains: &[DomainDataset], workers: usize) -> Result<EvalReport> {
    cfg.validate()?;
    check_domains(domains, cfg.task)?;
    let ids: Vec<String> = domains.iter().map(|d| d.domain_id.clone()).collect();
    let splits = split_all(cfg, domains)?;
    let jobs = plan_jobs(cfg, &cfg.schemes, &ids);
    let outcomes: Vec<Result<CellRecord>> = thread_pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|job| {
                let t = ids.iter().position(|d| *d == job.key.target).expect("planned target");
                let mut record = CellRecord {
                    target: job.key.target.clone(),
                    scheme: job.key.scheme,
                    source: job.key.source.clone(),
                    repeat: job.repeat,
                    seed: job.seed,
                    metric: None,
                    failure: None,
                    warnings: Vec::new(),
                };
                match run_job(cfg, job, &ids, &splits)? {
                    Ok(out) => {
                        record.warnings = out.record.warnings;
                        let p = prediction_set(&out.model, &splits[t].1, None)?;
                        match task_metric(cfg.task, &p) {
                            Ok(m) => record.metric = Some(m),
                            Err(e) => record.failure = Some(format!("metric undefined: {e}")),
                        }
                    }
                    Err(e) => record.failure = Some(format!("{DIVERGED}: {e}")),
                }
                Ok(record)
            })
            .collect()
    });
    let mut records = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| {
        (&a.target, a.scheme, &a.source, a.repeat).cmp(&(&b.target, b.scheme, &b.source, b.repeat))
    });
    Ok(assemble_report(cfg, &ids, records))
}

/// Aggregates per-repeat records into blocks, rows and averages.
pub fn assemble_report(cfg: &ExperimentConfig, targets: &[String], records: Vec<CellRecord>) -> EvalReport {
    let mut grouped: BTreeMap<(Scheme, Option<String>, String), (Vec<f64>, usize)> = BTreeMap::new();
    for r in &records {
        let entry = grouped
            .entry((r.scheme, r.source.clone(), r.target.clone()))
            .or_default();
        match r.metric {
            Some(m) => entry.0.push(m),
            None => entry.1 += 1,
        }
    }
    let blocks = cfg
        .schemes
        .iter()
        .map(|&scheme| {
            let sources: Vec<Option<String>> = if scheme.kind.is_single() {
                targets.iter().cloned().map(Some).collect()
            } else {
                vec![None]
            };
            let rows: Vec<ReportRow> = sources
                .into_iter()
                .map(|source| {
                    let cells: BTreeMap<String, Option<CellSummary>> = targets
                        .iter()
                        .filter_map(|t| {
                            grouped
                                .get(&(scheme, source.clone(), t.clone()))
                                .map(|(vals, failed)| (t.clone(), CellSummary::from_values(vals, *failed)))
                        })
                        .collect();
                    let average = mean(cells.values().flatten().map(|c| c.mean));
                    ReportRow {
                        scheme,
                        source,
                        cells,
                        average,
                    }
                })
                .collect();
            let column_averages = targets
                .iter()
                .filter_map(|t| {
                    mean(rows.iter().filter_map(|r| r.cells.get(t).cloned().flatten()).map(|c| c.mean))
                        .map(|m| (t.clone(), m))
                })
                .collect();
            SchemeBlock {
                scheme,
                rows,
                column_averages,
            }
        })
        .collect();
    EvalReport {
        config_hash: cfg.hash(),
        task: cfg.task,
        metric: cfg.task.metric_name().to_string(),
        base_seed: cfg.seed,
        repeats: cfg.repeats,
        targets: targets.to_vec(),
        blocks,
        records,
        fairness: None,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Fairness of one scheme on one target, averaged over repeats and (for
/// single-source schemes) over sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessCell {
    pub target: String,
    pub scheme: Scheme,
    pub quality_basis: QualityBasis,
    pub pqd: f64,
    pub dpm: f64,
    pub eom: f64,
    /// Task metric on the full target data.
    pub quality: f64,
    pub runs: usize,
    pub failed: usize,
    pub warnings: Vec<String>,
}

/// Trains the fairness schemes as in [`run_matrix`] and evaluates them on
/// each target's full data (train and test splits together).
pub fn run_fairness(cfg: &ExperimentConfig, domains: &[DomainDataset], workers: usize) -> Result<Vec<FairnessCell>> {
    cfg.validate()?;
    check_domains(domains, cfg.task)?;
    let fcfg = cfg.fairness.clone().unwrap_or_default();
    let schemes = if fcfg.schemes.is_empty() {
        cfg.schemes.clone()
    } else {
        fcfg.schemes.clone()
    };
    if cfg.task == Task::Multiclass && schemes.iter().any(|s| s.kind == SchemeKind::SingleDann) {
        return Err(Error::Config("single-dann is not run for multiclass tasks".into()));
    }
    for d in domains {
        if d.n_groups == 0 || d.sensitive.len() != d.len() {
            return Err(Error::Config(format!("domain `{}` has no sensitive attribute", d.domain_id)));
        }
    }
    let basis = QualityBasis::for_classes(domains[0].n_classes);
    let ids: Vec<String> = domains.iter().map(|d| d.domain_id.clone()).collect();
    let splits = split_all(cfg, domains)?;
    let jobs = plan_jobs(cfg, &schemes, &ids);
    type Outcome = (CellKey, std::result::Result<(f64, crate::metrics::FairnessReport), String>);
    let outcomes: Vec<Result<Outcome>> = thread_pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|job| {
                let t = ids.iter().position(|d| *d == job.key.target).expect("planned target");
                let key = CellKey {
                    source: None,
                    ..job.key.clone()
                };
                let out = match run_job(cfg, job, &ids, &splits)? {
                    Ok(out) => out,
                    Err(e) => return Ok((key, Err(format!("{DIVERGED}: {e}")))),
                };
                let p = prediction_set(&out.model, &domains[t], fcfg.bins.as_ref())?;
                let quality = task_metric(cfg.task, &p);
                let report = fairness_report(&p, basis, fcfg.strict);
                Ok((
                    key,
                    match (quality, report) {
                        (Ok(q), Ok(r)) => Ok((q, r)),
                        (Err(e), _) | (_, Err(e)) => Err(format!("metric undefined: {e}")),
                    },
                ))
            })
            .collect()
    });
    let mut grouped: BTreeMap<CellKey, Vec<std::result::Result<(f64, crate::metrics::FairnessReport), String>>> =
        BTreeMap::new();
    for outcome in outcomes {
        let (key, result) = outcome?;
        grouped.entry(key).or_default().push(result);
    }
    Ok(ids
        .iter()
        .flat_map(|t| schemes.iter().map(move |&s| (t.clone(), s)))
        .filter_map(|(target, scheme)| {
            let key = CellKey {
                target,
                scheme,
                source: None,
            };
            let runs = grouped.get(&key)?;
            let ok: Vec<&(f64, crate::metrics::FairnessReport)> = runs.iter().filter_map(|r| r.as_ref().ok()).collect();
            let mut warnings: Vec<String> = runs.iter().filter_map(|r| r.as_ref().err().cloned()).collect();
            for (_, r) in &ok {
                for w in &r.warnings {
                    if !warnings.contains(w) {
                        warnings.push(w.clone());
                    }
                }
            }
            let avg = |f: fn(&(f64, crate::metrics::FairnessReport)) -> f64| {
                mean(ok.iter().map(|r| f(r))).unwrap_or(f64::NAN)
            };
            Some(FairnessCell {
                pqd: avg(|r| r.1.pqd),
                dpm: avg(|r| r.1.dpm),
                eom: avg(|r| r.1.eom),
                quality: avg(|r| r.0),
                target: key.target,
                scheme,
                quality_basis: basis,
                runs: ok.len(),
                failed: runs.len() - ok.len(),
                warnings,
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    /// Pretty JSON with a fixed key order.
    #[default]
    Canonical,
    /// Fixed-width text table of `mean±std` percentages.
    Table,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(ReportFormat::Canonical),
            "table" => Ok(ReportFormat::Table),
            other => Err(Error::Config(format!("unknown report format `{other}`; expected canonical or table"))),
        }
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Canonical => {
            let mut text = serde_json::to_string_pretty(report)?;
            text.push('\n');
            Ok(text)
        }
        ReportFormat::Table => Ok(render_table(report)),
    }
}

pub fn write_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    std::fs::write(path, emit_report(report, format)?).map_err(|e| Error::io(path, e))
}

/// `mean±std` in percent with one decimal, e.g. `86.2±2.1`.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{:.1}±{:.1}", 100.0 * mean, 100.0 * std)
}

/// Cells within this many percentage points of a column's best are all marked.
pub const BEST_TIE_POINTS: f64 = 0.05;

fn render_table(report: &EvalReport) -> String {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for block in &report.blocks {
        for row in &block.rows {
            for (t, cell) in &row.cells {
                if let Some(c) = cell {
                    let b = best.entry(t.as_str()).or_insert(f64::NEG_INFINITY);
                    *b = b.max(c.mean);
                }
            }
        }
    }
    let is_best = |t: &str, m: f64| best.get(t).is_some_and(|&b| 100.0 * (b - m) <= BEST_TIE_POINTS + 1e-9);

    let mut header = vec!["scheme".to_string(), "source".to_string()];
    header.extend(report.targets.iter().cloned());
    header.push("avg".to_string());
    let mut lines = vec![header];
    for block in &report.blocks {
        for row in &block.rows {
            let mut line = vec![row.scheme.to_string(), row.source.clone().unwrap_or_else(|| "-".into())];
            for t in &report.targets {
                line.push(match row.cells.get(t) {
                    None => "".into(),
                    Some(None) => "failed".into(),
                    Some(Some(c)) => {
                        let mut s = format_cell(c.mean, c.std);
                        if c.failed > 0 {
                            s.push_str(&format!(" ({}/{})", c.runs, c.runs + c.failed));
                        }
                        if is_best(t, c.mean) {
                            s.push('*');
                        }
                        s
                    }
                });
            }
            line.push(row.average.map(|a| format!("{:.1}", 100.0 * a)).unwrap_or_default());
            lines.push(line);
        }
        if block.rows.len() > 1 {
            let mut line = vec![block.scheme.to_string(), "avg".to_string()];
            for t in &report.targets {
                line.push(block.column_averages.get(t).map(|a| format!("{:.1}", 100.0 * a)).unwrap_or_default());
            }
            line.push(
                mean(block.column_averages.values().copied())
                    .map(|a| format!("{:.1}", 100.0 * a))
                    .unwrap_or_default(),
            );
            lines.push(line);
        }
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|j| lines.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = format!("{}, mean±std over {} repeats, * = best in column\n", report.metric, report.repeats);
    for line in &lines {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}", w = w))
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
    }
    out
}

/// Projects extractor features of `domains` onto their top two principal
/// components and writes `id,domain,label,x,y` rows for external plotting.
pub fn export_features(model: &Model, domains: &[&DomainDataset], path: &Path) -> Result<()> {
    let mut feats = Vec::new();
    for d in domains {
        feats.push(model.features(d.features.view())?);
    }
    let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
    let all = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let coords = pca_2d(&all);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "domain", "label", "x", "y"])?;
    let mut row = 0;
    for d in domains {
        for i in 0..d.len() {
            w.write_record([
                d.sample_ids[i].clone(),
                d.domain_id.clone(),
                d.labels[i].to_string(),
                coords[[row, 0]].to_string(),
                coords[[row, 1]].to_string(),
            ])?;
            row += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Scores on the two leading principal axes, found by power iteration with
/// deflation. Features narrower than two columns are zero-padded.
pub fn pca_2d(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows().max(1) as f64;
    let centered = x - &x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
    let mut cov = centered.t().dot(&centered) / n;
    let mut out = Array2::zeros((x.nrows(), 2));
    for k in 0..2.min(x.ncols()) {
        let mut v = Array1::from_elem(x.ncols(), 1.0 / (x.ncols() as f64).sqrt());
        for _ in 0..500 {
            let next = cov.dot(&v);
            let norm = next.dot(&next).sqrt();
            if norm < 1e-300 {
                break;
            }
            v = next / norm;
        }
        let lambda = v.dot(&cov.dot(&v));
        out.column_mut(k).assign(&centered.dot(&v));
        let outer = v.view().insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
        cov = cov - outer * lambda;
    }
    out
}

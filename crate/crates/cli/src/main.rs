use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use udakit::data::{self, DatasetSchema, DomainSpec};
use udakit::harness::{self, ExperimentConfig, ReportFormat, Scheme};
use udakit::metrics::{self, GroupBins, QualityBasis};
use udakit::shift::{self, ShiftOptions};
use udakit::train::{ModelFile, RunRecord};
use udakit::{Error, TrainConfig};

#[derive(Parser)]
#[command(name = "udakit", version, about = "Domain adaptation experiments on tabular domains")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Base random seed (overrides the one in specs or configs)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Experiment (matrix, fairness) or training (train) config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for independent runs
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Report format
    #[arg(long, global = true, value_enum, default_value_t = Format::Canonical)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Canonical,
    Table,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Canonical => ReportFormat::Canonical,
            Format::Table => ReportFormat::Table,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BinPreset {
    /// Fitzpatrick types 1-2, 3-4, 5-6
    Fitzpatrick,
    /// Age up to 30, above 30
    Age,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets from domain spec files
    Gen { specs: Vec<PathBuf> },
    /// Stratified train/test split of a dataset file
    Split {
        data: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
    },
    /// Train one scheme; targets are read without their labels
    Train {
        #[arg(long)]
        scheme: Scheme,
        #[arg(long = "source", required = true)]
        sources: Vec<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Predict a labeled dataset with a saved model
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write 2-D projections of the extracted features
        #[arg(long)]
        features: bool,
    },
    /// Fairness metrics of a predictions file, or of the configured experiment
    Fairness {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum)]
        bins: Option<BinPreset>,
        /// Fail on classes missing from some group
        #[arg(long)]
        strict: bool,
    },
    /// Pairwise shift matrix between datasets
    Diagnose {
        #[arg(required = true)]
        data: Vec<PathBuf>,
        /// `source,target,test_error` table to correlate against
        #[arg(long)]
        errors: Option<PathBuf>,
        #[arg(long, default_value_t = shift::DEFAULT_PROJECTIONS)]
        projections: usize,
        #[arg(long, default_value_t = shift::DEFAULT_EPSILON)]
        epsilon: f64,
    },
    /// Run the full leave-one-domain-out matrix of the configured experiment
    Matrix,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which is reserved for divergence
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            let diverged = err.chain().any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_divergence));
            ExitCode::from(if diverged { EXIT_DIVERGED } else { EXIT_CONFIG })
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let g = &cli.global;
    std::fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
    match &cli.command {
        Command::Gen { specs } => gen(g, specs),
        Command::Split { data, ratio } => split(g, data, *ratio),
        Command::Train { scheme, sources, target } => train(g, *scheme, sources, target.as_deref()),
        Command::Eval { model, data, features } => eval(g, model, data, *features),
        Command::Fairness {
            predictions,
            bins,
            strict,
        } => fairness(g, predictions.as_deref(), *bins, *strict),
        Command::Diagnose {
            data,
            errors,
            projections,
            epsilon,
        } => diagnose(g, data, errors.as_deref(), *projections, *epsilon),
        Command::Matrix => matrix(g),
    }
}

/// Label space of a dataset file: one past the largest label and group id.
fn infer_schema(path: &Path) -> Result<DatasetSchema> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let (mut classes, mut groups) = (0usize, 0usize);
    for record in reader.records() {
        let record = record?;
        let parse = |i: usize| record.get(i).and_then(|v| v.trim().parse::<usize>().ok());
        if let (Some(y), Some(s)) = (parse(2), parse(3)) {
            classes = classes.max(y + 1);
            groups = groups.max(s + 1);
        }
    }
    Ok(DatasetSchema {
        n_classes: classes.max(2),
        n_groups: groups.max(1),
    })
}

fn load(path: &Path) -> Result<data::DomainDataset> {
    let schema = infer_schema(path)?;
    Ok(data::load_dataset(path, schema)?)
}

fn load_with(path: &Path, schema: DatasetSchema) -> Result<data::DomainDataset> {
    Ok(data::load_dataset(path, schema)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen(g: &Global, specs: &[PathBuf]) -> Result<u8> {
    if specs.is_empty() {
        bail!(Error::Config("gen needs at least one spec file".into()));
    }
    for path in specs {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut spec = DomainSpec::from_toml_str(&text).map_err(|e| config_error(e, path))?;
        if let Some(seed) = g.seed {
            spec.seed = seed;
        }
        let dataset = data::generate_domain(&spec)?;
        let out = g.out.join(format!("{}.csv", spec.domain_id));
        data::save_dataset(&dataset, &out)?;
        println!("{}: {} samples -> {}", spec.domain_id, dataset.len(), out.display());
    }
    Ok(0)
}

fn config_error(e: Error, path: &Path) -> anyhow::Error {
    anyhow::Error::new(Error::Config(format!("{}: {e}", path.display())))
}

fn split(g: &Global, path: &Path, ratio: f64) -> Result<u8> {
    let dataset = load(path)?;
    let pair = data::stratified_split(&dataset, ratio, g.seed.unwrap_or(0))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    for (part, d) in [("train", &pair.train), ("test", &pair.test)] {
        let out = g.out.join(format!("{stem}_{part}.csv"));
        data::save_dataset(d, &out)?;
        println!("{part}: {} samples -> {}", d.len(), out.display());
    }
    Ok(0)
}

fn train_config(g: &Global) -> Result<TrainConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<TrainConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(g: &Global, scheme: Scheme, sources: &[PathBuf], target: Option<&Path>) -> Result<u8> {
    let mut cfg = train_config(g)?;
    cfg.resample = scheme.resample;
    let mut schema = DatasetSchema { n_classes: 2, n_groups: 1 };
    for path in sources {
        let s = infer_schema(path)?;
        schema.n_classes = schema.n_classes.max(s.n_classes);
        schema.n_groups = schema.n_groups.max(s.n_groups);
    }
    let sources = sources
        .iter()
        .map(|p| load_with(p, schema))
        .collect::<Result<Vec<_>>>()?;
    let target = match target {
        Some(p) => Some(data::load_unlabeled(p)?),
        None if scheme.kind.is_adaptive() => {
            bail!(Error::Config(format!("scheme {scheme} needs --target")))
        }
        None => None,
    };
    let empty = udakit::UnlabeledDataset {
        domain_id: "none".into(),
        features: ndarray::Array2::zeros((0, sources[0].dim())),
    };
    let refs: Vec<&data::DomainDataset> = sources.iter().collect();
    let out = harness::train_scheme(scheme, &refs, target.as_ref().unwrap_or(&empty).view(), &cfg)?;
    let model_path = g.out.join("model.json");
    ModelFile {
        scheme: scheme.to_string(),
        seed: cfg.seed,
        config: cfg,
        model: out.model,
    }
    .save(&model_path)?;
    let mut record: RunRecord = out.record;
    record.model_ref = Some(model_path.display().to_string());
    record.save(&g.out.join("run.json"))?;
    for w in &record.warnings {
        eprintln!("warning: {w}");
    }
    println!("model -> {}", model_path.display());
    Ok(0)
}

fn eval(g: &Global, model: &Path, path: &Path, features: bool) -> Result<u8> {
    let file = ModelFile::load(model)?;
    let mut schema = infer_schema(path)?;
    schema.n_classes = file.model.n_classes();
    let dataset = load_with(path, schema)?;
    let p = harness::prediction_set(&file.model, &dataset, None)?;
    if features {
        harness::export_features(&file.model, &[&dataset], &g.out.join("features.csv"))?;
    }
    let out = g.out.join("predictions.csv");
    metrics::save_predictions(&out, &dataset.sample_ids, &p)?;
    let acc = metrics::accuracy(&p)?;
    let summary = serde_json::json!({
        "accuracy": acc,
        "auroc": metrics::auroc_of(&p).ok(),
        "balanced_accuracy": metrics::balanced_accuracy(&p.y_true, &p.y_pred, p.n_classes)?,
        "n": p.len(),
    });
    write(&g.out.join("eval.json"), &format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(0)
}

fn load_experiment(g: &Global) -> Result<(ExperimentConfig, PathBuf)> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config <experiment.toml>".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn fairness(g: &Global, predictions: Option<&Path>, bins: Option<BinPreset>, strict: bool) -> Result<u8> {
    let bins = bins.map(|b| match b {
        BinPreset::Fitzpatrick => GroupBins::fitzpatrick(),
        BinPreset::Age => GroupBins::age(),
    });
    let out = g.out.join("fairness.json");
    if let Some(path) = predictions {
        let schema = infer_predictions_schema(path)?;
        let (_, mut p) = metrics::load_predictions(path, schema.n_classes, schema.n_groups)?;
        if let Some(b) = &bins {
            let raw: Vec<f64> = p.sensitive.iter().map(|&s| s as f64).collect();
            p.sensitive = metrics::group_partition(&raw, b)?;
            p.n_groups = b.n_groups();
        }
        let report = metrics::fairness_report(&p, QualityBasis::for_classes(p.n_classes), strict)?;
        write(&out, &format!("{}\n", serde_json::to_string_pretty(&report)?))?;
        println!("pqd {:.4}  dpm {:.4}  eom {:.4}", report.pqd, report.dpm, report.eom);
        return Ok(0);
    }
    let (mut cfg, base) = load_experiment(g)?;
    let fcfg = cfg.fairness.get_or_insert_with(Default::default);
    fcfg.strict |= strict;
    if bins.is_some() {
        fcfg.bins = bins;
    }
    let domains = cfg.load_domains(&base)?;
    let cells = harness::run_fairness(&cfg, &domains, g.workers)?;
    write(&out, &format!("{}\n", serde_json::to_string_pretty(&cells)?))?;
    for c in &cells {
        println!(
            "{:<12} {:<18} pqd {:.4}  dpm {:.4}  eom {:.4}  {} {:.4}",
            c.target,
            c.scheme.to_string(),
            c.pqd,
            c.dpm,
            c.eom,
            cfg.task.metric_name(),
            c.quality
        );
    }
    let failed: usize = cells.iter().map(|c| c.failed).sum();
    Ok(if failed > 0 { EXIT_DIVERGED } else { 0 })
}

fn infer_predictions_schema(path: &Path) -> Result<DatasetSchema> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let (mut classes, mut groups) = (2usize, 1usize);
    for record in reader.records() {
        let record = record?;
        let parse = |i: usize| record.get(i).and_then(|v| v.trim().parse::<usize>().ok());
        for y in [parse(1), parse(2)].into_iter().flatten() {
            classes = classes.max(y + 1);
        }
        if let Some(s) = parse(4) {
            groups = groups.max(s + 1);
        }
    }
    Ok(DatasetSchema {
        n_classes: classes,
        n_groups: groups,
    })
}

fn diagnose(g: &Global, paths: &[PathBuf], errors: Option<&Path>, projections: usize, epsilon: f64) -> Result<u8> {
    let mut schema = DatasetSchema { n_classes: 2, n_groups: 1 };
    for p in paths {
        let s = infer_schema(p)?;
        schema.n_classes = schema.n_classes.max(s.n_classes);
        schema.n_groups = schema.n_groups.max(s.n_groups);
    }
    let domains = paths.iter().map(|p| load_with(p, schema)).collect::<Result<Vec<_>>>()?;
    let table = errors.map(shift::load_error_table).transpose()?;
    let report = shift::build_shift_matrix(
        &domains,
        table.as_ref(),
        ShiftOptions {
            projections,
            seed: g.seed.unwrap_or(0),
            epsilon,
        },
    )?;
    report.save(&g.out, "shift")?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if let (Some(f), Some(l)) = (report.pearson_feature_error, report.pearson_label_error) {
        println!("pearson(feature, error) = {f:.4}  pearson(label, error) = {l:.4}");
    }
    println!("{} pairs -> {}", report.pairs.len(), g.out.join("shift.csv").display());
    Ok(0)
}

fn matrix(g: &Global) -> Result<u8> {
    let (cfg, base) = load_experiment(g)?;
    let domains = cfg.load_domains(&base)?;
    let report = harness::run_matrix(&cfg, &domains, g.workers)?;
    let format: ReportFormat = g.format.into();
    let ext = match format {
        ReportFormat::Canonical => "json",
        ReportFormat::Table => "txt",
    };
    let out = g.out.join(format!("report.{ext}"));
    harness::write_report(&report, format, &out)?;
    println!("{} cells -> {}", report.records.len(), out.display());
    let diverged = report.diverged_cells();
    if diverged > 0 {
        eprintln!("{diverged} runs diverged and are flagged in the report");
        return Ok(EXIT_DIVERGED);
    }
    Ok(0)
}

//! The subcommands, plus the library-level pieces they are built from.

use std::path::{Path, PathBuf};

use serde::Serialize;
use unvp::checkpoint;
use unvp::classifier::ClassifierModel;
use unvp::data::Dataset;
use unvp::flow::FlowModel;
use unvp::generalize::{fit_reference_flow, train_baseline, train_unvp, TrainingTrace};
use unvp::gradcheck::{check_names, run_all, CheckOutcome, GradcheckOptions};
use unvp::report::{latent_histograms, DomainAccuracy, Histogram, TrainingReport};
use unvp::Tensor;

use crate::config::{DomainEntry, ExperimentConfig};
use crate::export::{accuracy_table_csv, write_report_csvs};
use crate::provider::{ConfigProvider, DatasetProvider, Split};
use crate::{CliError, Mode, EXIT_GRADCHECK};

pub const CLASSIFIER_CKPT: &str = "classifier.ckpt";
pub const FLOW_CKPT: &str = "flow.ckpt";
pub const REPORT_JSON: &str = "report.json";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const EVAL_CSV: &str = "eval.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::config(format!("{}: {e}", path.display()))
}

/// Loads a config and applies a `--seed` override to the dataset and training seeds.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.dataset.seed = seed;
        cfg.training.seed = seed;
    }
    Ok(cfg)
}

pub struct TrainedModels {
    pub clf: ClassifierModel,
    /// The jointly trained flow for UNVP; a source-only reference flow for the baseline.
    pub flow: FlowModel,
    pub trace: TrainingTrace,
}

/// The training phase. It reads the clean train split and nothing else.
pub fn train_models(cfg: &ExperimentConfig, mode: Mode, provider: &impl DatasetProvider) -> Result<TrainedModels, CliError> {
    let source = provider.load(Split::Train, &DomainEntry::clean())?;
    match mode {
        Mode::Baseline => {
            let (clf, mut trace) = train_baseline(&source, &cfg.model, &cfg.training)?;
            let (flow, flow_trace) = fit_reference_flow(&source, &cfg.model, &cfg.training)?;
            trace.flow_nll = flow_trace.flow_nll;
            trace.flow_pretrain = flow_trace.flow_pretrain;
            Ok(TrainedModels { clf, flow, trace })
        }
        Mode::Unvp => {
            let (flow, clf, trace) = train_unvp(&source, &cfg.model, &cfg.training)?;
            Ok(TrainedModels { clf, flow, trace })
        }
    }
}

fn check_shape(what: &str, expected: &[usize], ds: &Dataset) -> Result<(), CliError> {
    if ds.sample_shape() != expected {
        return Err(CliError::config(format!(
            "shape mismatch: {what} expects samples of shape {expected:?}, domain `{}` has {:?}",
            ds.domain_tag,
            ds.sample_shape()
        )));
    }
    Ok(())
}

fn check_classes(clf: &ClassifierModel, ds: &Dataset) -> Result<(), CliError> {
    if clf.class_count() != ds.class_count {
        return Err(CliError::config(format!(
            "shape mismatch: classifier has {} classes, domain `{}` has {}",
            clf.class_count(),
            ds.domain_tag,
            ds.class_count
        )));
    }
    Ok(())
}

/// The evaluation phase: accuracy on the test split of every configured
/// domain, in config order, and latent histograms when a flow is given.
pub fn evaluate_domains(
    cfg: &ExperimentConfig,
    clf: &ClassifierModel,
    flow: Option<&FlowModel>,
    provider: &impl DatasetProvider,
) -> Result<(Vec<DomainAccuracy>, Vec<Histogram>), CliError> {
    let mut accuracy = Vec::new();
    let mut histograms = Vec::new();
    for entry in &cfg.dataset.eval_domains {
        let ds = provider.load(Split::Test, entry)?;
        check_shape("classifier", clf.input_shape(), &ds)?;
        check_classes(clf, &ds)?;
        let eval = clf.evaluate(&ds)?;
        accuracy.push(DomainAccuracy {
            domain: entry.tag().to_string(),
            accuracy: eval.accuracy,
            n: eval.count,
        });
        if let Some(flow) = flow {
            check_shape("flow", flow.input_shape(), &ds)?;
            histograms.extend(latent_histograms(flow, &ds, entry.tag())?);
        }
    }
    Ok((accuracy, histograms))
}

/// Trains, evaluates and assembles the report, without touching the filesystem.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mode: Mode,
    provider: &impl DatasetProvider,
) -> Result<(TrainedModels, TrainingReport), CliError> {
    let models = train_models(cfg, mode, provider)?;
    let (accuracy, histograms) = evaluate_domains(cfg, &models.clf, Some(&models.flow), provider)?;
    let report = TrainingReport {
        mode: mode.name().to_string(),
        seed: cfg.training.seed,
        source_domain: DomainEntry::clean().tag().to_string(),
        accuracy,
        clf_loss: models.trace.clf_loss.clone(),
        flow_nll: models.trace.flow_nll.clone(),
        distances: models.trace.distances.clone(),
        histograms,
    };
    report.validate()?;
    Ok((models, report))
}

pub fn format_table(rows: &[DomainAccuracy]) -> String {
    let width = rows.iter().map(|r| r.domain.len()).max().unwrap_or(0).max("domain".len());
    let mut out = format!("{:<width$}  {:>8}  {:>6}\n", "domain", "accuracy", "n");
    for r in rows {
        out.push_str(&format!("{:<width$}  {:>8.4}  {:>6}\n", r.domain, r.accuracy, r.n));
    }
    out
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

pub fn train(config: &Path, mode: Mode, out: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(config, seed)?;
    let out: PathBuf = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    let provider = ConfigProvider::new(&cfg.dataset);
    let (models, report) = run_experiment(&cfg, mode, &provider)?;
    std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
    checkpoint::save(out.join(CLASSIFIER_CKPT), &models.clf.to_entries())?;
    checkpoint::save(out.join(FLOW_CKPT), &models.flow.to_entries())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::config(e.to_string()))?;
    write(&out.join(REPORT_JSON), json + "\n")?;
    write(&out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    print!("{}", format_table(&report.accuracy));
    println!("wrote {}", out.display());
    Ok(())
}

pub fn load_classifier(path: &Path) -> Result<ClassifierModel, CliError> {
    let entries = checkpoint::load(path).map_err(|e| io_error(path, e))?;
    ClassifierModel::from_entries(&entries).map_err(|e| io_error(path, e))
}

pub fn eval(checkpoint_path: &Path, config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(config, seed)?;
    let clf = load_classifier(checkpoint_path)?;
    let provider = ConfigProvider::new(&cfg.dataset);
    let (rows, _) = evaluate_domains(&cfg, &clf, None, &provider)?;
    let dir = match out {
        Some(dir) => dir.to_path_buf(),
        None => checkpoint_path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    }
    write(&dir.join(EVAL_CSV), accuracy_table_csv(&rows))?;
    print!("{}", format_table(&rows));
    Ok(())
}

pub fn read_report(path: &Path) -> Result<TrainingReport, CliError> {
    let path = if path.is_dir() { path.join(REPORT_JSON) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    let report: TrainingReport =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: corrupt report: {e}", path.display())))?;
    report
        .validate()
        .map_err(|e| CliError::config(format!("{}: corrupt report: {e}", path.display())))?;
    Ok(report)
}

pub fn report(path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let report = read_report(path)?;
    let dir = match out {
        Some(dir) => dir.to_path_buf(),
        None if path.is_dir() => path.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    for file in write_report_csvs(&report, &dir)? {
        println!("wrote {}", file.display());
    }
    Ok(())
}

pub fn format_check(c: &CheckOutcome) -> String {
    format!(
        "{:<24} max_rel_err {:.3e}  threshold {:.0e}  {}",
        c.name,
        c.max_error,
        c.threshold,
        if c.passed() { "ok" } else { "FAIL" }
    )
}

pub fn gradcheck(seed: u64, inject_fault: Option<String>) -> Result<(), CliError> {
    if let Some(name) = &inject_fault {
        if !check_names(seed)?.contains(name) {
            return Err(CliError::config(format!("--inject-fault: no check named `{name}`")));
        }
    }
    let outcomes = run_all(&GradcheckOptions { seed, corrupt: inject_fault })?;
    for c in &outcomes {
        println!("{}", format_check(c));
    }
    let failed: Vec<&str> = outcomes.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("{} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_GRADCHECK,
            message: format!("gradient check failed: {}", failed.join(", ")),
        })
    }
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    file: String,
    split: &'static str,
    domain_tag: String,
    seed: u64,
    count: usize,
    class_counts: Vec<usize>,
}

fn dataset_entries(ds: &Dataset) -> Vec<(String, Tensor)> {
    vec![
        ("images".to_string(), ds.images.clone()),
        (
            "labels".to_string(),
            Tensor::vector(ds.labels.iter().map(|&l| l as f64).collect()),
        ),
    ]
}

pub fn export_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(config, seed)?;
    let provider = ConfigProvider::new(&cfg.dataset);
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let mut jobs = vec![(Split::Train, DomainEntry::clean())];
    jobs.extend(cfg.dataset.eval_domains.iter().map(|d| (Split::Test, d.clone())));
    let mut manifest = Vec::new();
    for (split, entry) in jobs {
        let ds = provider.load(split, &entry)?;
        let file = format!("{}_{}.ckpt", split.name(), entry.tag());
        checkpoint::save(out.join(&file), &dataset_entries(&ds))?;
        manifest.push(ManifestEntry {
            file,
            split: split.name(),
            domain_tag: ds.domain_tag.clone(),
            seed: ds.seed,
            count: ds.len(),
            class_counts: ds.class_counts(),
        });
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::config(e.to_string()))?;
    write(&out.join(MANIFEST_JSON), json + "\n")?;
    println!("wrote {} datasets to {}", manifest.len(), out.display());
    Ok(())
}

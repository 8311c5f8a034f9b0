//! The four pipeline steps. Each replicate runs as its own task and writes
//! only under its own directory; the summaries are built afterwards on one
//! thread.
//!
//! Output layout under the experiment's output directory:
//!
//! ```text
//! manifest.json                        config hash, seeds, completed steps
//! data/                                dataset cache
//! fits/<model>/rep_<i>/status.json     outcome of one replicate
//! fits/<model>/rep_<i>/checkpoint.json
//! fits/<model>/rep_<i>/loss_trace.csv
//! fits/summary.json
//! eval/<model>/rep_<i>/records.jsonl   one metric record per evaluation point
//! eval/<model>/rep_<i>/aggregates.csv  per-split summary of those records
//! eval/aggregates.csv                  all replicates
//! report/report.csv, report/report.json, report/cca.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use mmbnn::data::{self, Dataset, SplitLabel};
use mmbnn::eval::{self, MetricsRecord};
use mmbnn::models::{self, ModelCheckpoint, ModelKind, ModelState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Experiment;
use crate::error::{CliError, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// RNG streams per replicate seed. The optimizer seeds its own stream 0.
const INIT_STREAM: u64 = 1;
const PREDICT_STREAM: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Paths of one run.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn fit_dir(&self, model: ModelKind, replicate: usize) -> PathBuf {
        self.root
            .join("fits")
            .join(model.name())
            .join(format!("rep_{replicate:02}"))
    }

    pub fn eval_dir(&self, model: ModelKind, replicate: usize) -> PathBuf {
        self.root
            .join("eval")
            .join(model.name())
            .join(format!("rep_{replicate:02}"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

// ------------------------------------------------------------------ manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSeed {
    pub index: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub config_hash: String,
    pub dataset_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config_hash: String,
    pub dataset: String,
    pub dataset_seed: u64,
    pub replicates: Vec<ReplicateSeed>,
    pub experiment: Experiment,
    /// Completed steps and the configuration each ran under.
    pub steps: BTreeMap<String, StepRecord>,
}

fn update_manifest(layout: &Layout, exp: &Experiment, step: &str) -> Result<()> {
    let hash = exp.hash();
    let mut steps = match fs::read_to_string(layout.manifest()) {
        Ok(text) => serde_json::from_str::<RunManifest>(&text)
            .map(|m| m.steps)
            .unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    // Later steps computed under an older configuration are stale.
    let order = ["generate", "fit", "evaluate", "report"];
    if let Some(pos) = order.iter().position(|s| *s == step) {
        for later in &order[pos + 1..] {
            if steps.get(*later).is_some_and(|r| r.config_hash != hash) {
                steps.remove(*later);
            }
        }
    }
    steps.insert(
        step.to_string(),
        StepRecord {
            config_hash: hash.clone(),
            dataset_seed: exp.dataset_seed,
        },
    );
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        config_hash: hash,
        dataset: exp.dataset.clone(),
        dataset_seed: exp.dataset_seed,
        replicates: replicate_seeds(exp),
        experiment: exp.clone(),
        steps,
    };
    write_json(&layout.manifest(), &manifest)
}

fn replicate_seeds(exp: &Experiment) -> Vec<ReplicateSeed> {
    exp.replicate_seeds
        .iter()
        .enumerate()
        .map(|(index, &seed)| ReplicateSeed { index, seed })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Output {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

// ------------------------------------------------------------------ generate

/// Build the dataset and write its cache.
pub fn generate(exp: &Experiment) -> Result<Dataset> {
    let layout = Layout::new(&exp.output);
    let dataset = if data::needs_wind_table(&exp.dataset) {
        let path = exp.wind_csv.as_ref().ok_or_else(|| {
            CliError::Usage(format!(
                "dataset `{}` needs `wind_csv` in the experiment file",
                exp.dataset
            ))
        })?;
        let table = data::wind::WindTable::read(path)?;
        data::generate_wind(&exp.dataset, &table, exp.dataset_seed)?
    } else {
        data::generate(&exp.dataset, exp.dataset_seed)?
    };
    let dir = layout.data();
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    data::write_cache(&dataset, &dir)?;
    update_manifest(&layout, exp, "generate")?;
    Ok(dataset)
}

fn load_dataset(exp: &Experiment, layout: &Layout) -> Result<Dataset> {
    let dir = layout.data();
    if !dir.join("manifest.json").exists() {
        return Err(CliError::MissingCache(dir));
    }
    let dataset = data::read_cache(&dir)?;
    if dataset.name != exp.dataset || dataset.seed != exp.dataset_seed {
        return Err(CliError::Usage(format!(
            "the cache in {} holds `{}` with seed {}, but the experiment asks for `{}` with seed {}; run `generate` again",
            dir.display(),
            dataset.name,
            dataset.seed,
            exp.dataset,
            exp.dataset_seed
        )));
    }
    Ok(dataset)
}

// ----------------------------------------------------------------------- fit

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitStatus {
    Ok,
    Failed,
}

/// Outcome of one replicate fit, stored as `status.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub model: ModelKind,
    pub replicate: usize,
    pub seed: u64,
    pub status: FitStatus,
    pub epochs: usize,
    pub converged: bool,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

fn tasks(exp: &Experiment) -> Vec<(ModelKind, usize, u64)> {
    exp.models
        .iter()
        .flat_map(|&m| exp.replicate_seeds.iter().enumerate().map(move |(i, &s)| (m, i, s)))
        .collect()
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.serialize((i + 1, l))?;
    }
    w.flush()?;
    Ok(())
}

fn fit_one(
    exp: &Experiment,
    dataset: &Dataset,
    layout: &Layout,
    model: ModelKind,
    replicate: usize,
    seed: u64,
) -> Result<FitOutcome> {
    let dir = layout.fit_dir(model, replicate);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;

    let mut training = dataset.training_data()?;
    if exp.inject_nan.contains(&replicate) {
        training.main.x.data_mut()[0] = f64::NAN;
    }
    let result =
        ModelState::init(model, &training, &exp.architecture, &mut rng(seed, INIT_STREAM)).and_then(|mut state| {
            let report = models::fit(&mut state, &training, &exp.fit_for(seed))?;
            Ok((state, report))
        });

    let outcome = match result {
        Ok((state, report)) => {
            write_trace(&dir.join("loss_trace.csv"), &report.loss_trace)?;
            let outcome = FitOutcome {
                model,
                replicate,
                seed,
                status: FitStatus::Ok,
                epochs: report.epochs,
                converged: report.converged,
                final_loss: report.loss_trace.last().copied(),
                error: None,
            };
            let checkpoint = ModelCheckpoint::new(state, training, Some(report));
            fs::write(dir.join("checkpoint.json"), checkpoint.to_json()?)?;
            outcome
        }
        Err(e) => {
            let epochs = match &e {
                mmbnn::Error::Divergence { trace, .. } => {
                    write_trace(&dir.join("loss_trace.csv"), trace)?;
                    trace.len()
                }
                _ => 0,
            };
            let message = CliError::Replicate {
                model: model.name().into(),
                replicate,
                seed,
                source: e,
            }
            .to_string();
            log::warn!("{message}");
            FitOutcome {
                model,
                replicate,
                seed,
                status: FitStatus::Failed,
                epochs,
                converged: false,
                final_loss: None,
                error: Some(message),
            }
        }
    };
    write_json(&dir.join("status.json"), &outcome)?;
    Ok(outcome)
}

/// Fit every model and replicate. Failed replicates are recorded and the
/// rest continue; an error is returned only if nothing succeeded.
pub fn fit(exp: &Experiment) -> Result<Vec<FitOutcome>> {
    let layout = Layout::new(&exp.output);
    let dataset = load_dataset(exp, &layout)?;
    let outcomes = tasks(exp)
        .into_par_iter()
        .map(|(m, i, s)| fit_one(exp, &dataset, &layout, m, i, s))
        .collect::<Result<Vec<_>>>()?;
    write_json(&layout.root.join("fits").join("summary.json"), &outcomes)?;
    update_manifest(&layout, exp, "fit")?;
    if outcomes.iter().all(|o| o.status == FitStatus::Failed) {
        let first = &outcomes[0];
        return Err(CliError::Usage(format!(
            "every replicate failed; first failure: {}",
            first.error.as_deref().unwrap_or("unknown")
        )));
    }
    Ok(outcomes)
}

// ------------------------------------------------------------------ evaluate

/// One line of `records.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub model: ModelKind,
    pub replicate: usize,
    pub seed: u64,
    pub point: usize,
    pub split: SplitLabel,
    pub bias: f64,
    pub standardized_error: f64,
}

impl PointRecord {
    pub fn metrics(&self) -> MetricsRecord {
        MetricsRecord {
            point: self.point,
            split: self.split,
            bias: self.bias,
            standardized_error: self.standardized_error,
        }
    }
}

/// One row of an aggregates file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: ModelKind,
    pub replicate: usize,
    pub seed: u64,
    pub split: SplitLabel,
    pub count: usize,
    pub mean_bias: f64,
    pub median_bias: f64,
    pub mean_standardized_error: f64,
    pub median_standardized_error: f64,
}

fn aggregate_rows(model: ModelKind, replicate: usize, seed: u64, records: &[MetricsRecord]) -> Vec<AggregateRow> {
    eval::aggregate(records)
        .splits
        .into_iter()
        .map(|s| AggregateRow {
            model,
            replicate,
            seed,
            split: s.split,
            count: s.count,
            mean_bias: s.mean_bias,
            median_bias: s.median_bias,
            mean_standardized_error: s.mean_standardized_error,
            median_standardized_error: s.median_standardized_error,
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn read_records(path: &Path) -> Result<Vec<PointRecord>> {
    let file = fs::File::open(path)?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map(|l| !l.trim().is_empty()).unwrap_or(true))
        .map(|l| {
            serde_json::from_str(&l?).map_err(|e| CliError::Output {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub model: ModelKind,
    pub replicate: usize,
    pub seed: u64,
    pub records: usize,
    /// Why the replicate was not evaluated.
    pub skipped: Option<String>,
}

fn evaluate_one(
    exp: &Experiment,
    dataset: &Dataset,
    layout: &Layout,
    model: ModelKind,
    replicate: usize,
    seed: u64,
) -> Result<(EvalOutcome, Vec<AggregateRow>)> {
    let out_dir = layout.eval_dir(model, replicate);
    if out_dir.exists() {
        fs::remove_dir_all(&out_dir)?;
    }
    let fit_dir = layout.fit_dir(model, replicate);
    let skip = |why: String| {
        (
            EvalOutcome {
                model,
                replicate,
                seed,
                records: 0,
                skipped: Some(why),
            },
            Vec::new(),
        )
    };
    let status: FitOutcome = match read_json(&fit_dir.join("status.json")) {
        Ok(s) => s,
        Err(_) => return Ok(skip("not fitted".into())),
    };
    if status.status != FitStatus::Ok {
        return Ok(skip("fit failed".into()));
    }
    if status.seed != seed {
        return Ok(skip(format!(
            "fitted with seed {} instead of {seed}; run `fit` again",
            status.seed
        )));
    }
    let checkpoint = ModelCheckpoint::from_json(&fs::read_to_string(fit_dir.join("checkpoint.json"))?)?;
    let records = eval::evaluate_model(&checkpoint.model, dataset, exp.samples, &mut rng(seed, PREDICT_STREAM))
        .map_err(|e| CliError::Replicate {
            model: model.name().into(),
            replicate,
            seed,
            source: e,
        })?;

    fs::create_dir_all(&out_dir)?;
    let mut jsonl = Vec::new();
    for r in &records {
        let line = PointRecord {
            model,
            replicate,
            seed,
            point: r.point,
            split: r.split,
            bias: r.bias,
            standardized_error: r.standardized_error,
        };
        serde_json::to_writer(&mut jsonl, &line)?;
        jsonl.push(b'\n');
    }
    fs::File::create(out_dir.join("records.jsonl"))?.write_all(&jsonl)?;
    let rows = aggregate_rows(model, replicate, seed, &records);
    write_csv(&out_dir.join("aggregates.csv"), &rows)?;
    Ok((
        EvalOutcome {
            model,
            replicate,
            seed,
            records: records.len(),
            skipped: None,
        },
        rows,
    ))
}

/// Score every fitted replicate on the evaluation set.
pub fn evaluate(exp: &Experiment) -> Result<Vec<EvalOutcome>> {
    let layout = Layout::new(&exp.output);
    let dataset = load_dataset(exp, &layout)?;
    let results = tasks(exp)
        .into_par_iter()
        .map(|(m, i, s)| evaluate_one(exp, &dataset, &layout, m, i, s))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<AggregateRow> = results.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
    let outcomes: Vec<EvalOutcome> = results.into_iter().map(|(o, _)| o).collect();
    write_csv(&layout.root.join("eval").join("aggregates.csv"), &rows)?;
    write_json(&layout.root.join("eval").join("summary.json"), &outcomes)?;
    update_manifest(&layout, exp, "evaluate")?;
    Ok(outcomes)
}

// -------------------------------------------------------------------- report

/// Pooled metrics of one model on one split, over all evaluated replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: ModelKind,
    pub split: SplitLabel,
    pub replicates: usize,
    pub count: usize,
    pub mean_bias: f64,
    pub median_bias: f64,
    pub mean_standardized_error: f64,
    pub median_standardized_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaRow {
    pub dataset: String,
    pub canonical_correlation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub dataset: String,
    pub dataset_seed: u64,
    pub replicates: Vec<ReplicateSeed>,
    pub comparison: Vec<ComparisonRow>,
    pub canonical_correlation: Vec<CcaRow>,
}

pub fn report(exp: &Experiment) -> Result<Report> {
    let layout = Layout::new(&exp.output);
    let dataset = load_dataset(exp, &layout)?;
    let mut comparison = Vec::new();
    for &model in &exp.models {
        let mut pooled = Vec::new();
        let mut replicates = 0;
        for (i, _) in exp.replicate_seeds.iter().enumerate() {
            let path = layout.eval_dir(model, i).join("records.jsonl");
            if path.exists() {
                pooled.extend(read_records(&path)?.iter().map(PointRecord::metrics));
                replicates += 1;
            }
        }
        for s in eval::aggregate(&pooled).splits {
            comparison.push(ComparisonRow {
                model,
                split: s.split,
                replicates,
                count: s.count,
                mean_bias: s.mean_bias,
                median_bias: s.median_bias,
                mean_standardized_error: s.mean_standardized_error,
                median_standardized_error: s.median_standardized_error,
            });
        }
    }
    if comparison.is_empty() {
        return Err(CliError::EmptyReport(layout.root.join("eval")));
    }
    let canonical_correlation = vec![CcaRow {
        dataset: dataset.name.clone(),
        canonical_correlation: eval::dataset_canonical_correlation(&dataset)?,
    }];
    let report = Report {
        config_hash: exp.hash(),
        dataset: exp.dataset.clone(),
        dataset_seed: exp.dataset_seed,
        replicates: replicate_seeds(exp),
        comparison,
        canonical_correlation,
    };
    let dir = layout.report();
    write_csv(&dir.join("report.csv"), &report.comparison)?;
    write_csv(&dir.join("cca.csv"), &report.canonical_correlation)?;
    write_json(&dir.join("report.json"), &report)?;
    update_manifest(&layout, exp, "report")?;
    Ok(report)
}

/// Plain-text rendering of a report for the terminal.
pub fn render(report: &Report) -> String {
    let mut s = format!(
        "dataset {} (seed {}), config {}\n\n{:<10} {:<12} {:>5} {:>7} {:>12} {:>12} {:>12} {:>12}\n",
        report.dataset,
        report.dataset_seed,
        &report.config_hash[..12],
        "model",
        "split",
        "reps",
        "points",
        "mean bias",
        "median bias",
        "mean SE",
        "median SE"
    );
    for r in &report.comparison {
        s.push_str(&format!(
            "{:<10} {:<12} {:>5} {:>7} {:>12.4} {:>12.4} {:>12.4} {:>12.4}\n",
            r.model.name(),
            r.split.name(),
            r.replicates,
            r.count,
            r.mean_bias,
            r.median_bias,
            r.mean_standardized_error,
            r.median_standardized_error
        ));
    }
    s.push_str("\ncanonical correlation, main vs auxiliaries\n");
    for c in &report.canonical_correlation {
        s.push_str(&format!("{:<14} {:.4}\n", c.dataset, c.canonical_correlation));
    }
    s
}

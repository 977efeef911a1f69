//! Experiment driver: configuration, training, checkpoints, evaluation,
//! heatmap export and the λ sweep. Every `cmd_*` writes only below the
//! directory it is given.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod explain;
pub mod train;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use checkpoint::Checkpoint;
pub use config::{DataSource, ExperimentConfig};
pub use eval::{evaluate, EvalSettings, SampleMetrics};
pub use train::{train, EpochLog};

use crate::data::{generate_synthetic, load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::nn::Model;

pub const TRAIN_FILE: &str = "train.cgcd";
pub const VAL_FILE: &str = "val.cgcd";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.cgct";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_LAMBDAS: [f64; 6] = [0.0, 0.01, 0.1, 0.5, 1.0, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Forces single-threaded evaluation.
    pub deterministic: bool,
}

impl RunOptions {
    pub fn threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(output_dir: &Path, epoch: usize) -> PathBuf {
    output_dir.join("checkpoints").join(format!("epoch_{epoch:03}.cgct"))
}

/// Training and validation sets named by the configuration.
pub fn load_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &config.data {
        DataSource::Synthetic(spec) => generate_synthetic(spec),
        DataSource::Files { train, val } => Ok((load_dataset(train)?, load_dataset(val)?)),
    }
}

fn load_val(config: &ExperimentConfig, dataset: Option<&Path>) -> Result<Dataset> {
    match dataset {
        Some(p) => load_dataset(p),
        None => match &config.data {
            DataSource::Synthetic(spec) => Ok(generate_synthetic(spec)?.1),
            DataSource::Files { val, .. } => load_dataset(val),
        },
    }
}

fn check_compatible(model: &Model, ds: &Dataset) -> Result<()> {
    let c = &model.config;
    if ds.channels != c.input_channels || ds.height != c.input_size || ds.width != c.input_size {
        return Err(Error::invalid(format!(
            "dataset images are {}x{}x{} but the model expects {}x{}x{}",
            ds.channels, ds.height, ds.width, c.input_channels, c.input_size, c.input_size
        )));
    }
    if ds.num_classes != c.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes but the model has {}",
            ds.num_classes, c.num_classes
        )));
    }
    Ok(())
}

/// Writes `train.cgcd` and `val.cgcd`.
pub fn cmd_gen_data(config: &ExperimentConfig, output_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    config.validate()?;
    let (train, val) = load_data(config)?;
    create_dir(output_dir)?;
    let paths = (output_dir.join(TRAIN_FILE), output_dir.join(VAL_FILE));
    save_dataset(&paths.0, &train)?;
    save_dataset(&paths.1, &val)?;
    Ok(paths)
}

/// Full training run. Appends one JSON line per epoch to `train_log.jsonl`,
/// writes `checkpoints/epoch_NNN.cgct` after every epoch and `final.cgct` at
/// the end. With `resume`, continues from that checkpoint.
pub fn cmd_train(
    config: &ExperimentConfig,
    output_dir: &Path,
    resume: Option<&Path>,
) -> Result<Checkpoint> {
    config.validate()?;
    let start = resume.map(Checkpoint::load).transpose()?;
    let (train_set, _) = load_data(config)?;
    create_dir(&output_dir.join("checkpoints"))?;
    write_file(&output_dir.join("config.json"), config.to_json()?.as_bytes())?;
    let log_path = output_dir.join(TRAIN_LOG);
    let mut log = if start.is_some() {
        std::fs::OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let ck = train(config, &train_set, start, |line, ck| {
        let mut text = serde_json::to_string(line)?;
        text.push('\n');
        log.write_all(text.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        ck.save(&checkpoint_path(output_dir, ck.manifest.epoch))
    })?;
    ck.save(&output_dir.join(FINAL_CHECKPOINT))?;
    Ok(ck)
}

pub fn eval_settings(config: &ExperimentConfig, options: RunOptions) -> EvalSettings {
    EvalSettings {
        aug: config.resolved_aug(),
        temperature: config.tau,
        seed: config.seed,
        insertion_step: config.eval.insertion_step,
        threads: options.threads(),
    }
}

/// Evaluates a checkpoint on `dataset` (default: the validation set of its
/// configuration) and writes `report.json` and `report.csv`.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: Option<&Path>,
    output_dir: &Path,
    options: RunOptions,
) -> Result<MetricsReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let config = &ck.manifest.config;
    let model = Model::new(config.model.clone(), ck.params)?;
    let val = load_val(config, dataset)?;
    check_compatible(&model, &val)?;
    let report = evaluate(&model, &val, &eval_settings(config, options), &ck.manifest.config_fingerprint)?;
    create_dir(output_dir)?;
    write_file(&output_dir.join(REPORT_JSON), report.to_json()?.as_bytes())?;
    write_file(&output_dir.join(REPORT_CSV), report.to_csv().as_bytes())?;
    Ok(report)
}

/// Exports heatmaps of the given sample ids to `output_dir/explain`.
pub fn cmd_explain(
    checkpoint: &Path,
    dataset: Option<&Path>,
    ids: &[u64],
    output_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if ids.is_empty() {
        return Err(Error::invalid("no sample ids given"));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let config = &ck.manifest.config;
    let model = Model::new(config.model.clone(), ck.params)?;
    let val = load_val(config, dataset)?;
    check_compatible(&model, &val)?;
    explain::export_heatmaps(&model, &val, ids, &output_dir.join("explain"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub report: MetricsReport,
}

pub const SWEEP_HEADER: &str =
    "lambda,accuracy,content_heatmap_pct,eval_cgc_loss,insertion_auc,heatmap_entropy";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let mean = |m: &str| r.report.summary(m).and_then(|s| s.mean);
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.lambda,
            fmt_opt(mean(eval::ACCURACY)),
            fmt_opt(mean(eval::CONTENT_HEATMAP_PCT)),
            fmt_opt(r.report.aggregates.get(eval::EVAL_CGC_LOSS).copied()),
            fmt_opt(mean(eval::INSERTION_AUC)),
            fmt_opt(mean(eval::ENTROPY)),
        ));
    }
    out
}

/// Trains and evaluates one run per λ under `output_dir/lambda_<λ>` and
/// writes `sweep.csv` with one row per λ in the given order.
pub fn cmd_sweep(
    config: &ExperimentConfig,
    lambdas: &[f64],
    output_dir: &Path,
    options: RunOptions,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Config(vec!["sweep: the λ list is empty".to_string()]));
    }
    let bad: Vec<String> = lambdas
        .iter()
        .filter(|l| !(**l >= 0.0 && l.is_finite()))
        .map(|l| format!("sweep: λ = {l} must be finite and non-negative"))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    config.validate()?;
    create_dir(output_dir)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = config.clone();
        cfg.lambda = lambda;
        let dir = output_dir.join(format!("lambda_{lambda}"));
        cmd_train(&cfg, &dir, None)?;
        let report = cmd_eval(&dir.join(FINAL_CHECKPOINT), None, &dir, options)?;
        rows.push(SweepRow { lambda, report });
    }
    write_file(&output_dir.join(SWEEP_CSV), sweep_csv(&rows).as_bytes())?;
    Ok(rows)
}

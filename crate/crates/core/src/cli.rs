//! Experiment harness behind the `bmb` binary.
//!
//! Run directory layout (`<out>/<name>/seed_<s>/`):
//!
//! * `config.json`: resolved config plus its hash and the dataset hash
//! * `epochs.jsonl`: one epoch log per line
//! * `bank_counts.csv`, `estimated_counts.csv`: per-epoch snapshots
//! * `report.json`: final evaluation and last-20-epoch means
//! * `model.json`: final and EMA parameters
//!
//! Nothing time-dependent is written, so reruns are byte-identical.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{self, RunConfig};
use crate::data::{self, DatasetSplits, GeneratedDataset, Sample};
use crate::error::{Error, Result};
use crate::estimator::write_estimate_snapshot;
use crate::membank::write_counts_snapshot;
use crate::metrics::{self, EvalReport, ShotGroup};
use crate::numerics::ModelParams;
use crate::trainer::{self, EpochLog, FitData, Mode};

/// Epochs averaged for the headline accuracy.
pub const LAST_EPOCHS: usize = 20;

#[derive(Debug, Parser)]
#[command(
    name = "bmb",
    version,
    about = "Balanced memory bank experiments on synthetic long-tailed data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write dataset.csv, unlabeled_truth.csv and manifest.json.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one run per configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every value × seed cell of a sweep and aggregate.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Consolidate finished run directories into tables.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Write encoder features of every sample for a trained run.
    ExportEmbeddings {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use raw instead of EMA parameters.
        #[arg(long)]
        no_ema: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    PartialFailure,
}

pub fn exit_code(result: &Result<Outcome>) -> u8 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::PartialFailure) => 4,
        Err(Error::Config { .. }) => 2,
        Err(Error::Diverged { .. }) => 3,
        Err(_) => 1,
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = run(cli.command);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result))
}

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Generate { config, out, seed } => {
            let mut cfg = config::load_run_config(&config)?;
            if let Some(s) = seed {
                cfg.dataset.sample_seed = s;
            }
            generate(&cfg, &out)?;
            Ok(Outcome::Success)
        }
        Command::Train { config, out, seed } => {
            let mut cfg = config::load_run_config(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let out = resolve_out(&cfg, out)?;
            train_all(&cfg, &out)?;
            Ok(Outcome::Success)
        }
        Command::Sweep { config, out, seed } => {
            let mut spec = config::load_sweep(&config)?;
            if let Some(s) = seed {
                spec.base.seeds = vec![s];
            }
            let summary = sweep(&spec, &out)?;
            Ok(if summary.failed.is_empty() {
                Outcome::Success
            } else {
                Outcome::PartialFailure
            })
        }
        Command::Report { out, runs } => {
            report(&runs, &out)?;
            Ok(Outcome::Success)
        }
        Command::ExportEmbeddings {
            config,
            run,
            out,
            no_ema,
        } => {
            let cfg = config::load_run_config(&config)?;
            export_embeddings(&cfg, &run, &out, !no_ema)?;
            Ok(Outcome::Success)
        }
    }
}

fn resolve_out(cfg: &RunConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    out.or_else(|| cfg.out_dir.clone()).ok_or_else(|| {
        Error::config(
            "out_dir",
            "no output directory given (use --out or out_dir)",
        )
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: data::DatasetSpec,
    pub dataset_hash: String,
    pub labeled_counts: Vec<usize>,
    pub unlabeled_counts: Vec<usize>,
    pub test_per_class: usize,
    pub rows: usize,
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let generated = data::generate_dataset(&cfg.dataset)?;
    fs::create_dir_all(out)?;
    data::save_dataset_csv(&generated.splits, &out.join("dataset.csv"))?;
    data::save_truth_csv(
        &generated.splits.unlabeled,
        &generated.unlabeled_truth,
        &out.join("unlabeled_truth.csv"),
    )?;
    let s = &generated.splits;
    let manifest = Manifest {
        dataset: cfg.dataset.clone(),
        dataset_hash: cfg.dataset_hash(),
        labeled_counts: generated.labeled_counts.clone(),
        unlabeled_counts: generated.unlabeled_counts.clone(),
        test_per_class: cfg.dataset.test_per_class,
        rows: s.labeled.len() + s.unlabeled.len() + s.test.len(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Dataset a run trains on, with the hidden unlabeled counts when known.
#[derive(Debug, Clone)]
pub struct RunData {
    pub splits: DatasetSplits,
    pub num_classes: usize,
    pub true_unlabeled_counts: Option<Vec<usize>>,
}

pub fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    let k = cfg.dataset.num_classes;
    match &cfg.data_dir {
        None => {
            let GeneratedDataset {
                splits,
                unlabeled_counts,
                ..
            } = data::generate_dataset(&cfg.dataset)?;
            Ok(RunData {
                splits,
                num_classes: k,
                true_unlabeled_counts: Some(unlabeled_counts),
            })
        }
        Some(dir) => {
            let splits = data::load_dataset(&dir.join("dataset.csv"))?;
            if let Some(bad) = splits
                .labeled
                .iter()
                .chain(&splits.test)
                .find(|s| s.label.is_some_and(|l| l >= k))
            {
                return Err(Error::Schema(format!(
                    "sample {} has a label outside dataset.num_classes = {k}",
                    bad.id
                )));
            }
            let truth_path = dir.join("unlabeled_truth.csv");
            let truth = if truth_path.exists() {
                let mut counts = vec![0; k];
                for (_, label) in data::load_truth_csv(&truth_path)? {
                    *counts.get_mut(label).ok_or_else(|| {
                        Error::Schema(format!("truth label {label} out of range"))
                    })? += 1;
                }
                Some(counts)
            } else {
                None
            };
            Ok(RunData {
                splits,
                num_classes: k,
                true_unlabeled_counts: truth,
            })
        }
    }
}

pub fn resolve_groups(cfg: &RunConfig, labeled_counts: &[usize]) -> Result<Vec<ShotGroup>> {
    let (many_min, few_max) = match cfg.groups {
        Some(g) => (g.many_min, g.few_max),
        None => metrics::tertile_thresholds(labeled_counts),
    };
    metrics::shot_groups(labeled_counts, many_min, few_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub config_hash: String,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub mode: Mode,
    pub config_hash: String,
    pub dataset_hash: String,
    pub epochs: usize,
    pub groups: Vec<ShotGroup>,
    /// EMA evaluation after the last epoch.
    pub final_eval: Option<EvalReport>,
    pub final_bank_entropy: Option<f64>,
    pub final_bank_counts: Vec<usize>,
    pub final_estimated_counts: Vec<usize>,
    pub last_epochs: usize,
    pub mean_top1: Option<f64>,
    pub mean_avg_class_recall: Option<f64>,
    pub mean_few_acc: Option<f64>,
    pub mean_many_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub mode: Mode,
    pub params: ModelParams,
    pub ema_params: ModelParams,
}

fn tail_mean(log: &[EpochLog], f: impl Fn(&EpochLog) -> Option<f64>) -> Option<f64> {
    let tail = &log[log.len().saturating_sub(LAST_EPOCHS)..];
    let vals: Vec<f64> = tail.iter().filter_map(f).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn run_dir(out: &Path, cfg: &RunConfig, seed: u64) -> PathBuf {
    out.join(&cfg.name).join(format!("seed_{seed}"))
}

/// Trains every seed of `cfg`; the first error aborts.
pub fn train_all(cfg: &RunConfig, out: &Path) -> Result<Vec<RunReport>> {
    let data = load_run_data(cfg)?;
    cfg.seeds
        .iter()
        .map(|&s| {
            let c = cfg.for_seed(s);
            train_one(&c, &data, &run_dir(out, cfg, s))
        })
        .collect()
}

/// Trains a single-seed config into `dir`.
pub fn train_one(cfg: &RunConfig, data: &RunData, dir: &Path) -> Result<RunReport> {
    fs::create_dir_all(dir)?;
    let record = RunRecord {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        dataset_hash: cfg.dataset_hash(),
    };
    write_json(&dir.join("config.json"), &record)?;

    let s = &data.splits;
    let labeled_counts = data::class_counts(&s.labeled, data.num_classes);
    let groups = resolve_groups(cfg, &labeled_counts)?;

    let mut epochs = BufWriter::new(File::create(dir.join("epochs.jsonl"))?);
    let mut bank = BufWriter::new(File::create(dir.join("bank_counts.csv"))?);
    let mut est = BufWriter::new(File::create(dir.join("estimated_counts.csv"))?);
    writeln!(bank, "epoch,class,count")?;
    writeln!(est, "epoch,class,estimated_count,true_count")?;
    let truth = data.true_unlabeled_counts.as_deref();
    let mut on_epoch = |log: &EpochLog, state: &trainer::TrainState| -> Result<()> {
        serde_json::to_writer(&mut epochs, log)?;
        epochs.write_all(b"\n")?;
        write_counts_snapshot(&mut bank, log.epoch, &log.bank_counts, false)?;
        write_estimate_snapshot(&mut est, log.epoch, state.ledger.counts(), truth, false)?;
        Ok(())
    };
    let fit = trainer::fit(
        FitData {
            labeled: &s.labeled,
            unlabeled: &s.unlabeled,
            test: &s.test,
            num_classes: data.num_classes,
            true_unlabeled_counts: truth,
        },
        &cfg.train,
        &cfg.augment,
        &groups,
        &mut on_epoch,
    )?;
    epochs.flush()?;
    bank.flush()?;
    est.flush()?;

    let log = &fit.log;
    let report = RunReport {
        name: cfg.name.clone(),
        seed: cfg.train.seed,
        mode: cfg.train.mode,
        config_hash: record.config_hash,
        dataset_hash: record.dataset_hash,
        epochs: log.len(),
        groups,
        final_eval: fit.final_report.clone(),
        final_bank_entropy: fit.state.bank.balance_entropy().ok(),
        final_bank_counts: fit.state.bank.counts(),
        final_estimated_counts: fit.state.ledger.counts().to_vec(),
        last_epochs: log.len().min(LAST_EPOCHS),
        mean_top1: tail_mean(log, |l| Some(l.acc)),
        mean_avg_class_recall: tail_mean(log, |l| Some(l.avg_class_recall)),
        mean_few_acc: tail_mean(log, |l| l.group_acc.few),
        mean_many_acc: tail_mean(log, |l| l.group_acc.many),
    };
    write_json(&dir.join("report.json"), &report)?;
    let snapshot = ModelSnapshot {
        mode: fit.state.mode,
        params: fit.state.params.clone(),
        ema_params: fit.state.ema.shadow.clone(),
    };
    write_json(&dir.join("model.json"), &snapshot)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub param_value: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub parameter: String,
    pub completed: usize,
    pub failed: Vec<FailedCell>,
}

/// Runs every value × seed cell in parallel, then writes `sweep.csv` and,
/// when some cells failed, `failed_cells.json`.
pub fn sweep(spec: &config::SweepSpec, out: &Path) -> Result<SweepSummary> {
    let cells = spec.cells()?;
    let data = load_run_data(&spec.base)?;
    let jobs: Vec<(&config::SweepCell, u64)> = cells
        .iter()
        .flat_map(|c| spec.base.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<Result<RunReport>> = jobs
        .par_iter()
        .map(|(cell, seed)| {
            let cfg = cell.config.for_seed(*seed);
            train_one(&cfg, &data, &run_dir(out, &cell.config, *seed))
        })
        .collect();

    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record([
        "param_value",
        "seed",
        "top1",
        "avg_class_recall",
        "few_acc",
        "bank_entropy",
    ])?;
    let mut failed = Vec::new();
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for ((cell, seed), res) in jobs.iter().zip(results) {
        match res {
            Ok(r) => w.write_record([
                cell.label.clone(),
                seed.to_string(),
                opt(r.mean_top1),
                opt(r.mean_avg_class_recall),
                opt(r.mean_few_acc),
                opt(r.final_bank_entropy),
            ])?,
            Err(e) => failed.push(FailedCell {
                param_value: cell.label.clone(),
                seed: *seed,
                error: e.to_string(),
            }),
        }
    }
    w.flush()?;
    let summary = SweepSummary {
        parameter: spec.parameter.name().to_string(),
        completed: jobs.len() - failed.len(),
        failed,
    };
    let manifest = out.join("failed_cells.json");
    if summary.failed.is_empty() {
        if manifest.exists() {
            fs::remove_file(&manifest)?;
        }
    } else {
        write_json(&manifest, &summary)?;
    }
    Ok(summary)
}

/// A finished run directory as read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub report: RunReport,
    pub epochs: Vec<EpochLog>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let record: RunRecord = read_json(&dir.join("config.json"))?;
    let report: RunReport = read_json(&dir.join("report.json"))?;
    let path = dir.join("epochs.jsonl");
    let file = File::open(&path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let epochs = BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect::<Result<Vec<EpochLog>>>()?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        record,
        report,
        epochs,
    })
}

fn run_label(r: &LoadedRun) -> String {
    format!("{}/seed_{}", r.report.name, r.report.seed)
}

/// Writes `per_class_recall.csv`, `memory_distribution.csv` and
/// `beta_table.csv`. Runs must share a dataset hash.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<LoadedRun>> {
    let runs = run_dirs
        .iter()
        .map(|d| load_run(d))
        .collect::<Result<Vec<_>>>()?;
    let first = runs.first().ok_or(Error::Empty("run list"))?;
    if let Some(bad) = runs
        .iter()
        .find(|r| r.record.dataset_hash != first.record.dataset_hash)
    {
        return Err(Error::invalid(format!(
            "dataset hash of {} differs from {}",
            bad.dir.display(),
            first.dir.display()
        )));
    }
    fs::create_dir_all(out)?;

    let mut w = csv::Writer::from_path(out.join("per_class_recall.csv"))?;
    w.write_record(["run", "class", "group", "correct", "total", "recall"])?;
    for r in &runs {
        let Some(eval) = &r.report.final_eval else {
            continue;
        };
        for (k, row) in eval.confusion.iter().enumerate() {
            let total: usize = row.iter().sum();
            let group = r
                .report
                .groups
                .get(k)
                .map(|g| serde_json::to_value(g).expect("enum serializes"));
            w.write_record([
                run_label(r),
                k.to_string(),
                group
                    .and_then(|g| g.as_str().map(str::to_string))
                    .unwrap_or_default(),
                row[k].to_string(),
                total.to_string(),
                eval.per_class_recall[k]
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("memory_distribution.csv"))?;
    w.write_record(["run", "epoch", "class", "count", "fraction"])?;
    for r in &runs {
        for e in &r.epochs {
            let total: usize = e.bank_counts.iter().sum();
            for (k, &c) in e.bank_counts.iter().enumerate() {
                let frac = if total == 0 {
                    0.0
                } else {
                    c as f64 / total as f64
                };
                w.write_record([
                    run_label(r),
                    e.epoch.to_string(),
                    k.to_string(),
                    c.to_string(),
                    frac.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("beta_table.csv"))?;
    w.write_record([
        "run",
        "mode",
        "beta",
        "seed",
        "top1",
        "avg_class_recall",
        "few_acc",
        "bank_entropy",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &runs {
        let mode = serde_json::to_value(r.report.mode).expect("enum serializes");
        w.write_record([
            run_label(r),
            mode.as_str().unwrap_or_default().to_string(),
            r.record.config.train.beta.to_string(),
            r.report.seed.to_string(),
            opt(r.report.mean_top1),
            opt(r.report.mean_avg_class_recall),
            opt(r.report.mean_few_acc),
            opt(r.report.final_bank_entropy),
        ])?;
    }
    w.flush()?;
    Ok(runs)
}

/// Writes `id,split,label,e_0..` for every sample using a run's saved model.
pub fn export_embeddings(cfg: &RunConfig, run: &Path, out: &Path, use_ema: bool) -> Result<()> {
    let snapshot: ModelSnapshot = read_json(&run.join("model.json"))?;
    let params = if use_ema {
        &snapshot.ema_params
    } else {
        &snapshot.params
    };
    let data = load_run_data(cfg)?;
    let s = &data.splits;
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["id".to_string(), "split".into(), "label".into()];
    header.extend((0..params.feature_dim()).map(|j| format!("e_{j}")));
    w.write_record(&header)?;
    let parts: [(&str, &[Sample]); 3] = [
        ("labeled", &s.labeled),
        ("unlabeled", &s.unlabeled),
        ("test", &s.test),
    ];
    for (split, samples) in parts {
        if samples.is_empty() {
            continue;
        }
        let feats = trainer::encode_with(params, samples)?;
        for (sample, row) in samples.iter().zip(feats.iter_rows()) {
            let mut rec = vec![
                sample.id.to_string(),
                split.to_string(),
                sample.label.map_or("-1".to_string(), |l| l.to_string()),
            ];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

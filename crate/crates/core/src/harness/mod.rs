//! Sweeps over pruning ratios, methods, weight policies and seeds.
//!
//! For each seed a baseline is trained from scratch; every pruned point is
//! scored on that seed's trained baseline, cut, fine-tuned with the same
//! hyperparameters and evaluated on the held-out split. Training points run
//! in parallel; step times are measured afterwards, one point at a time.

mod config;
mod report;
mod timing;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use config::{DatasetKind, ExperimentConfig, StepTimeConfig, SyntheticConfig};
pub use report::{emit_csv, emit_svg, read_csv, render_svg, series, Metric, RunRecord, BASELINE, CSV_HEADER, FAILED};
pub use timing::{measure_step_time, median, StepTiming};

use crate::costmodel::{estimate_step_time, padded_bytes};
use crate::data::{load_cifar10, synth_dataset, Dataset, CIFAR_MEAN, CIFAR_STD};
use crate::engine::{evaluate_with_loss, train, TrainLog};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, BN_EPS};
use crate::importance::{make_plan, score, Method};
use crate::io;
use crate::surgery::{apply_plan, WeightPolicy};

/// Files written to `out_dir` by [`run_experiment`].
pub const RESULTS_CSV: &str = "results.csv";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const CONFIG_JSON: &str = "config.json";
pub const MODELS_DIR: &str = "models";
pub const PLOTS: [(&str, Metric); 4] = [
    ("accuracy.svg", Metric::Accuracy),
    ("memory.svg", Metric::PaddedTotalBytes),
    ("params.svg", Metric::ParamCount),
    ("step_time.svg", Metric::MeasuredStepMs),
];

/// Loads the training and held-out splits named by `config`.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train_set, test_set) = match config.dataset {
        DatasetKind::Cifar10 => {
            let dir = config
                .data_dir
                .as_ref()
                .ok_or_else(|| Error::Config("dataset cifar10 needs data_dir".into()))?;
            load_cifar10(dir)?
        }
        DatasetKind::Synthetic => {
            let s = &config.synthetic;
            let shape = config.preset.input_shape();
            (
                synth_dataset(s.seed, s.train_samples, s.classes, shape)?,
                synth_dataset(s.seed.wrapping_add(1), s.test_samples, s.classes, shape)?,
            )
        }
    };
    let (train_set, test_set) = match &config.class_subset {
        Some(classes) => (train_set.filter_classes(classes)?, test_set.filter_classes(classes)?),
        None => (train_set, test_set),
    };
    if config.train_fraction < 1.0 {
        Ok((
            train_set.take_fraction(config.train_fraction)?,
            test_set.take_fraction(config.train_fraction)?,
        ))
    } else {
        Ok((train_set, test_set))
    }
}

#[derive(Clone, Copy, Debug)]
struct Point {
    seed: u64,
    method: Option<Method>,
    ratio: f64,
    reload: bool,
}

impl Point {
    fn run_id(&self) -> String {
        match self.method {
            None => format!("s{}-baseline", self.seed),
            Some(m) => format!(
                "s{}-{m}-r{:.3}-{}",
                self.seed,
                self.ratio,
                if self.reload { "reload" } else { "reinit" }
            ),
        }
    }
}

struct Trained {
    model: ModelGraph,
    log: TrainLog,
    accuracy: f64,
    loss: f64,
}

fn reinit_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed
}

fn fine_tune(config: &ExperimentConfig, point: &Point, baseline: &ModelGraph, train_set: &Dataset, test_set: &Dataset) -> Result<Trained> {
    let method = point.method.expect("pruned point");
    let report = score(baseline, method)?;
    let plan = make_plan(&report, point.ratio, config.scope)?;
    for w in &plan.warnings {
        log::warn!("{}: {w}", point.run_id());
    }
    let policy = if point.reload {
        WeightPolicy::Reload
    } else {
        WeightPolicy::Reinit {
            seed: reinit_seed(point.seed),
        }
    };
    let pruned = apply_plan(baseline, &plan, policy)?;
    fit(config, point.seed, &pruned, train_set, test_set)
}

fn fit(config: &ExperimentConfig, seed: u64, start: &ModelGraph, train_set: &Dataset, test_set: &Dataset) -> Result<Trained> {
    let hp = crate::engine::Hyperparams {
        seed,
        ..config.hyperparams.clone()
    };
    let (model, log) = train(start, train_set, test_set, &hp)?;
    let (accuracy, loss) = evaluate_with_loss(&model, test_set)?;
    Ok(Trained {
        model,
        log,
        accuracy,
        loss,
    })
}

fn failed_record(config: &ExperimentConfig, point: &Point, err: &Error) -> RunRecord {
    log::error!("{} failed: {err}", point.run_id());
    RunRecord {
        run_id: point.run_id(),
        method: point.method.map_or(BASELINE.to_string(), |m| m.to_string()),
        scope: config.scope.to_string(),
        ratio: point.ratio,
        reload: point.reload,
        seed: point.seed,
        epoch: 0,
        split: FAILED.into(),
        accuracy: 0.0,
        loss: 0.0,
        param_count: 0,
        padded_weight_bytes: 0,
        padded_total_bytes: 0,
        est_step_ms: 0.0,
        measured_step_ms_median: 0.0,
    }
}

fn with_pool<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs the sweep in `config`, writes CSV, SVG, model and config artifacts
/// to `config.out_dir`, and returns the final-epoch rows.
///
/// A point that fails (for example diverges) becomes a row with split
/// `failed`; other points are unaffected. Dataset, config and I/O problems
/// abort the sweep.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let (train_set, test_set) = load_datasets(config)?;
    let num_classes = train_set.num_classes;
    let out_dir = &config.out_dir;
    let models_dir = out_dir.join(MODELS_DIR);
    fs::create_dir_all(&models_dir)?;
    write_config(config, &train_set, &test_set, &out_dir.join(CONFIG_JSON))?;

    let baselines: Vec<Point> = config
        .seeds
        .iter()
        .map(|&seed| Point {
            seed,
            method: None,
            ratio: 0.0,
            reload: true,
        })
        .collect();
    let mut pruned = Vec::new();
    for &seed in &config.seeds {
        for &ratio in config.ratios.iter().filter(|&&r| r > 0.0) {
            for &method in &config.methods {
                for &reload in &config.reload {
                    pruned.push(Point {
                        seed,
                        method: Some(method),
                        ratio,
                        reload,
                    });
                }
            }
        }
    }

    let base_results: Vec<Result<Trained>> = with_pool(config.jobs, || {
        baselines
            .par_iter()
            .map(|p| {
                let start = ModelGraph::preset(config.preset, num_classes, p.seed)?;
                fit(config, p.seed, &start, &train_set, &test_set)
            })
            .collect()
    })?;
    let by_seed: HashMap<u64, &Result<Trained>> = config.seeds.iter().copied().zip(&base_results).collect();
    let pruned_results: Vec<Result<Trained>> = with_pool(config.jobs, || {
        pruned
            .par_iter()
            .map(|p| match by_seed[&p.seed] {
                Ok(base) => fine_tune(config, p, &base.model, &train_set, &test_set),
                Err(e) => Err(Error::invalid(format!("baseline for seed {} failed: {e}", p.seed))),
            })
            .collect()
    })?;

    let batch = config.hyperparams.batch_size;
    let timing_batch = config.step_time.batch.unwrap_or(batch);
    let mut timings: HashMap<String, f64> = HashMap::new();
    let mut records = Vec::new();
    let mut epoch_rows = Vec::new();
    for (point, result) in baselines.iter().zip(&base_results).chain(pruned.iter().zip(&pruned_results)) {
        let trained = match result {
            Ok(t) => t,
            Err(e) => {
                let row = failed_record(config, point, e);
                epoch_rows.push(row.clone());
                records.push(row);
                continue;
            }
        };
        let model = &trained.model;
        let fingerprint = model.fingerprint();
        let measured = match timings.get(&fingerprint) {
            Some(&ms) => ms,
            None => {
                let t = measure_step_time(model, timing_batch, config.step_time.warmup, config.step_time.reps)?;
                timings.insert(fingerprint, t.median_ms);
                t.median_ms
            }
        };
        let bytes = padded_bytes(model, &config.layout, batch)?;
        let est = estimate_step_time(model, &config.layout, &config.profile, batch)?;
        let run_id = point.run_id();
        let path = models_dir.join(format!("{run_id}.spmg"));
        io::save(model, &path)?;
        let record = RunRecord {
            run_id,
            method: point.method.map_or(BASELINE.to_string(), |m| m.to_string()),
            scope: config.scope.to_string(),
            ratio: point.ratio,
            reload: point.reload,
            seed: point.seed,
            epoch: config.hyperparams.max_epochs,
            split: "test".into(),
            accuracy: trained.accuracy,
            loss: trained.loss,
            param_count: model.param_count() as u64,
            padded_weight_bytes: bytes.weight_bytes,
            padded_total_bytes: bytes.total,
            est_step_ms: est * 1e3,
            measured_step_ms_median: measured,
        };
        check_saved(&record, &path)?;
        for e in &trained.log.epochs {
            for (split, accuracy, loss) in [("train", e.train_accuracy, e.train_loss), ("val", e.val_accuracy, e.val_loss)] {
                epoch_rows.push(RunRecord {
                    epoch: e.epoch,
                    split: split.into(),
                    accuracy,
                    loss,
                    ..record.clone()
                });
            }
        }
        records.push(record);
    }

    emit_csv(&records, out_dir.join(RESULTS_CSV))?;
    emit_csv(&epoch_rows, out_dir.join(EPOCHS_CSV))?;
    for (file, metric) in PLOTS {
        emit_svg(&records, metric, out_dir.join(file))?;
    }
    Ok(records)
}

fn check_saved(record: &RunRecord, path: &Path) -> Result<()> {
    let reloaded = io::load(path)?;
    if reloaded.param_count() as u64 != record.param_count {
        return Err(Error::invalid(format!(
            "{}: row says {} parameters, saved model has {}",
            path.display(),
            record.param_count,
            reloaded.param_count()
        )));
    }
    Ok(())
}

fn write_config(config: &ExperimentConfig, train_set: &Dataset, test_set: &Dataset, path: &PathBuf) -> Result<()> {
    let mut value = serde_json::to_value(config)?;
    value["resolved"] = serde_json::json!({
        "train_samples": train_set.len(),
        "test_samples": test_set.len(),
        "num_classes": train_set.num_classes,
        "train_class_counts": train_set.class_counts(),
        "input_mean": CIFAR_MEAN,
        "input_std": CIFAR_STD,
        "bn_eps": BN_EPS,
        "bn_stat_momentum": config.hyperparams.bn_stat_momentum,
    });
    fs::write(path, serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

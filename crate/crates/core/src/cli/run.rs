use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::config::{DatasetSource, ExperimentConfig};
use crate::checkpoint;
use crate::data::{
    load_cifar_binary, load_idx, minibatches, neighboring_dataset, synthetic_blobs, Dataset, Replacement,
};
use crate::diagnostics::{
    effective_stepsize_delta, read_metrics_csv, summarize_activation_variance, write_metrics_csv,
    MetricsRecord, VarianceSummary, VhatBoundMonitor,
};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Hyperparams, VhatSnapshot};
use crate::train::{evaluate, PairedRun, StepStats, TrainRun};

/// Result of [`run_train`].
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    /// Held-out accuracy after the last epoch, when a held-out split exists.
    pub final_eval_acc: Option<f64>,
    pub final_train_acc: f64,
    /// Running `(min, max)` over every v̂ entry, for optimizers that keep v̂.
    pub vhat_bounds: Option<(f64, f64)>,
    pub run: TrainRun,
}

/// Loads the configured dataset and splits it into `(train, held_out)`.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (mut ds, channels) = match &cfg.dataset.source {
        DatasetSource::Blobs(p) => (synthetic_blobs(*p)?, 1),
        DatasetSource::Idx { images, labels, limit } => {
            let ds = load_idx(images, labels)?;
            (truncate(ds, *limit), 1)
        }
        DatasetSource::Cifar { path, limit } => (truncate(load_cifar_binary(path)?, *limit), 3),
    };
    if cfg.dataset.standardize {
        ds.standardize(channels)?;
    }
    let per_sample: usize = cfg.model.input.iter().product();
    if per_sample != ds.dims() {
        return Err(Error::config(
            "model.input",
            format!("describes {per_sample} values per example but the data has {}", ds.dims()),
        ));
    }
    let outputs = crate::nn::init_network(&cfg.model, 0)?.output_units();
    if outputs < ds.class_count {
        return Err(Error::config(
            "model.layers",
            format!("{outputs} outputs for {} classes", ds.class_count),
        ));
    }
    let (train, eval) = ds.split(cfg.eval_fraction, cfg.seed)?;
    if cfg.batch_size > train.len() {
        return Err(Error::config(
            "run.batch_size",
            format!("{} exceeds the {} training examples", cfg.batch_size, train.len()),
        ));
    }
    Ok((train, eval))
}

fn truncate(ds: Dataset, limit: Option<usize>) -> Dataset {
    match limit {
        Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
        _ => ds,
    }
}

fn schedule(cfg: &ExperimentConfig, train_len: usize) -> Hyperparams {
    let per_epoch = train_len.div_ceil(cfg.batch_size) as u64;
    Hyperparams { total_steps: per_epoch * cfg.epochs as u64, ..cfg.hyperparams.clone() }
}

/// Tracks v̂ across steps to produce the effective step-size columns.
struct StepsizeTracker {
    prev: Option<(VhatSnapshot, f64)>,
    monitor: VhatBoundMonitor,
}

impl StepsizeTracker {
    fn new() -> Self {
        Self { prev: None, monitor: VhatBoundMonitor::new() }
    }

    fn observe(&mut self, run: &TrainRun, eta: f64, hp: &Hyperparams) -> Result<Option<(f64, f64)>> {
        let Some(snap) = run.optimizer.v_hat() else {
            return Ok(None);
        };
        self.monitor.observe(&snap);
        let delta = match &self.prev {
            Some((prev, prev_eta)) => Some(effective_stepsize_delta(&snap, Some(prev), eta, *prev_eta, hp)?),
            None => None,
        };
        self.prev = Some((snap, eta));
        Ok(delta)
    }
}

fn record(stats: StepStats, epoch: usize, eff: Option<(f64, f64)>) -> MetricsRecord {
    MetricsRecord {
        step: stats.step,
        epoch: epoch as u64,
        loss: stats.loss,
        acc: None,
        actvar: stats.actvar,
        eff_delta_l1: eff.map(|e| e.0),
        eff_delta_linf: eff.map(|e| e.1),
        delta_t: None,
        term_a: None,
    }
}

fn layer_count(cfg: &ExperimentConfig) -> Result<usize> {
    Ok(crate::nn::init_network(&cfg.model, 0)?.param_layer_indices().len())
}

fn write_csv(path: &Path, records: &[MetricsRecord], layers: usize) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(BufWriter::new(f), records, layers)
}

/// Trains one model as configured. Writes the metrics CSV to `cfg.output` and
/// a final checkpoint to `cfg.checkpoint` (defaulting to the CSV path with a
/// `.ckpt` extension) when an output path is set.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let (train, eval) = load_datasets(cfg)?;
    let hp = schedule(cfg, train.len());
    let mut run = TrainRun::new(&cfg.model, cfg.optimizer, hp.clone(), cfg.seed)?;
    let mut tracker = StepsizeTracker::new();
    let mut records = Vec::new();
    let mut final_eval_acc = None;

    for epoch in 0..cfg.epochs {
        for batch in minibatches(train.len(), cfg.batch_size, cfg.seed, epoch as u64)? {
            let eta = cosine_lr(run.step_count(), &hp)?;
            let stats = run.train_step(&train, &batch, eta)?;
            let eff = tracker.observe(&run, eta, &hp)?;
            records.push(record(stats, epoch, eff));
        }
        if !eval.is_empty() {
            let acc = evaluate(&run.net, &eval, 256)?;
            final_eval_acc = Some(acc);
            if let Some(last) = records.last_mut() {
                last.acc = Some(acc);
            }
        }
    }
    let final_train_acc = evaluate(&run.net, &train, 256)?;

    if let Some(out) = &cfg.output {
        write_csv(out, &records, layer_count(cfg)?)?;
        let ckpt = checkpoint_path(cfg, out);
        let f = File::create(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        checkpoint::save(BufWriter::new(f), &run.net, Some(run.optimizer.as_ref()))?;
    }

    Ok(TrainOutcome { records, final_eval_acc, final_train_acc, vhat_bounds: tracker.monitor.extrema(), run })
}

fn checkpoint_path(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| out.with_extension("ckpt"))
}

/// Result of [`run_stability_pair`].
pub struct StabilityOutcome {
    pub records: Vec<MetricsRecord>,
    pub pair: PairedRun,
}

/// Builds the neighboring training set used by the second run.
pub fn neighbor_for(cfg: &ExperimentConfig, train: &Dataset) -> Result<Dataset> {
    match cfg.replace_index {
        None => Ok(train.clone()),
        Some(i) => {
            let replacement = match &cfg.dataset.source {
                DatasetSource::Blobs(p) => Replacement::FreshBlob(*p),
                _ => Replacement::Duplicate,
            };
            neighboring_dataset(train, i, cfg.seed, replacement)
                .map_err(|e| Error::config("run.replace_index", e.to_string()))
        }
    }
}

/// Trains two coupled runs, one on the training split and one on its
/// neighbor, with identical initialization and batch order, logging the
/// parameter distance and inverse-preconditioner distance every step.
pub fn run_stability_pair(cfg: &ExperimentConfig) -> Result<StabilityOutcome> {
    let (train, _) = load_datasets(cfg)?;
    let neighbor = neighbor_for(cfg, &train)?;
    let hp = schedule(cfg, train.len());
    let mut pair = PairedRun::new(&cfg.model, cfg.optimizer, hp.clone(), cfg.seed)?;
    let mut tracker = StepsizeTracker::new();
    let mut records = Vec::new();

    for epoch in 0..cfg.epochs {
        for batch in minibatches(train.len(), cfg.batch_size, cfg.seed, epoch as u64)? {
            let eta = cosine_lr(pair.a.step_count(), &hp)?;
            let step = pair.step(&train, &neighbor, &batch, eta)?;
            let eff = tracker.observe(&pair.a, eta, &hp)?;
            let mut rec = record(step.stats_a, epoch, eff);
            rec.delta_t = Some(step.delta);
            rec.term_a = step.term_a;
            records.push(rec);
        }
    }

    if let Some(out) = &cfg.output {
        write_csv(out, &records, layer_count(cfg)?)?;
    }
    Ok(StabilityOutcome { records, pair })
}

/// Averaged activation variance of a metrics CSV.
pub fn variance_report(path: &Path) -> Result<VarianceSummary> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    summarize_activation_variance(&read_metrics_csv(f)?)
}

pub fn format_report(summary: &VarianceSummary) -> String {
    let mut s = format!("steps: {}\n", summary.steps);
    for (i, v) in summary.per_layer.iter().enumerate() {
        s.push_str(&format!("actvar_L{i}: {v:.6e}\n"));
    }
    s.push_str(&format!("mean: {:.6e}\n", summary.overall));
    s
}

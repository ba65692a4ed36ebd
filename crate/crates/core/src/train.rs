//! A network paired with its optimizer, and the per-minibatch training step
//! shared by the experiment runner and the paired stability harness.

use crate::data::Dataset;
use crate::diagnostics::{record_activation_variance, stability_pair_step};
use crate::error::{Error, Result};
use crate::nn::{init_network, Network, NetworkSpec};
use crate::optim::{build_optimizer, Hyperparams, Optimizer, OptimizerKind};

pub struct TrainRun {
    pub net: Network,
    pub optimizer: Box<dyn Optimizer>,
}

/// What one training step reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub loss: f64,
    /// Mean centered activation variance per parametric layer, measured on
    /// this step's forward pass.
    pub actvar: Vec<f64>,
}

impl TrainRun {
    pub fn new(spec: &NetworkSpec, kind: OptimizerKind, hp: Hyperparams, seed: u64) -> Result<Self> {
        let net = init_network(spec, seed)?;
        let optimizer = build_optimizer(kind, &net, hp);
        Ok(Self { net, optimizer })
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// Forward, backward and one optimizer update on the given rows of `ds`.
    pub fn train_step(&mut self, ds: &Dataset, batch: &[usize], eta: f64) -> Result<StepStats> {
        let (x, labels) = ds.batch(batch);
        let step = self.step_count() + 1;
        let (loss, grads) = self.net.loss_and_grads(&x, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let actvar = if batch.len() >= 2 {
            record_activation_variance(&self.net)?
        } else {
            // One sample has zero spread, which `activation_variance` refuses
            // to report.
            vec![0.0; self.net.param_layer_indices().len()]
        };
        self.optimizer.step(&mut self.net, &grads, eta)?;
        if !self.net.flat_params().iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        Ok(StepStats { step, loss, actvar })
    }
}

/// Top-1 accuracy of `net` on `ds`, evaluated in chunks of `batch_size`.
pub fn evaluate(net: &Network, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyReduction("evaluate"));
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch(chunk);
        let logits = net.predict(&x)?;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Two runs trained in lockstep on neighboring datasets with the same batch
/// index sequence.
pub struct PairedRun {
    pub a: TrainRun,
    pub b: TrainRun,
}

/// Per-step output of [`PairedRun::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairStep {
    pub stats_a: StepStats,
    pub delta: f64,
    pub term_a: Option<f64>,
}

impl PairedRun {
    pub fn new(spec: &NetworkSpec, kind: OptimizerKind, hp: Hyperparams, seed: u64) -> Result<Self> {
        Ok(Self { a: TrainRun::new(spec, kind, hp.clone(), seed)?, b: TrainRun::new(spec, kind, hp, seed)? })
    }

    /// Advances both runs by one step (run `b` on a worker thread) and
    /// measures the pair distance afterwards.
    pub fn step(&mut self, ds_a: &Dataset, ds_b: &Dataset, batch: &[usize], eta: f64) -> Result<PairStep> {
        let (a, b) = (&mut self.a, &mut self.b);
        let (ra, rb) = std::thread::scope(|s| {
            let hb = s.spawn(move || b.train_step(ds_b, batch, eta));
            let ra = a.train_step(ds_a, batch, eta);
            (ra, hb.join().expect("paired worker panicked"))
        });
        let stats_a = ra?;
        rb?;
        let (delta, term_a) = stability_pair_step(&self.a, &self.b)?;
        Ok(PairStep { stats_a, delta, term_a })
    }
}

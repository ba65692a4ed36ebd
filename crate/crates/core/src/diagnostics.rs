//! Measurable training diagnostics: per-layer activation variance,
//! effective step-size drift between iterations, paired-run stability
//! distances, and a running bound monitor for the activation second moments.
//! Everything here is a pure function of logged state.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::{column_variance, Network};
use crate::optim::{column_divisors, effective_stepsizes, Hyperparams, VhatSnapshot};
use crate::train::TrainRun;

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub acc: Option<f64>,
    pub actvar: Vec<f64>,
    pub eff_delta_l1: Option<f64>,
    pub eff_delta_linf: Option<f64>,
    pub delta_t: Option<f64>,
    pub term_a: Option<f64>,
}

/// Mean over units of the centered activation variance of each parametric
/// layer's input, computed across the batch with every sample's activations
/// flattened. For dense layers this is the cached `ã` without its bias
/// column; for conv layers it is the feature map, not the patch rows.
pub fn record_activation_variance(net: &Network) -> Result<Vec<f64>> {
    net.param_layer_indices()
        .into_iter()
        .map(|i| {
            let input = net
                .layer_input(i)
                .ok_or_else(|| Error::Cache(format!("layer {i} has no cached activations")))?;
            let var = column_variance(&input)?;
            if var.is_empty() {
                return Err(Error::Cache(format!("layer {i} has no input units")));
            }
            Ok(var.iter().sum::<f64>() / var.len() as f64)
        })
        .collect()
}

/// L1 and L∞ norms of the change in per-column effective step sizes
/// `η/(v̂^p + ε)` between two consecutive snapshots.
pub fn effective_stepsize_delta(
    current: &VhatSnapshot,
    previous: Option<&VhatSnapshot>,
    eta_t: f64,
    eta_prev: f64,
    hp: &Hyperparams,
) -> Result<(f64, f64)> {
    let previous = previous.ok_or_else(|| Error::State("no previous v̂ snapshot to compare with".into()))?;
    if current.layers.len() != previous.layers.len() {
        return Err(Error::State("snapshots cover different layers".into()));
    }
    let (mut l1, mut linf) = (0.0f64, 0.0f64);
    for (cur, prev) in current.layers.iter().zip(&previous.layers) {
        if cur.len() != prev.len() {
            return Err(Error::State("snapshot layer widths differ".into()));
        }
        let a = effective_stepsizes(cur, eta_t, hp);
        let b = effective_stepsizes(prev, eta_prev, hp);
        for (x, y) in a.iter().zip(&b) {
            let d = (x - y).abs();
            l1 += d;
            linf = linf.max(d);
        }
    }
    Ok((l1, linf))
}

/// `(Δ_t, termA_t)` for two runs advanced to the same step: the L2 distance
/// between their parameter vectors and the L2 norm of the difference of their
/// inverse preconditioners `1/(v̂^p + ε)`. `termA_t` is `None` when the
/// optimizers keep no activation statistics.
pub fn stability_pair_step(a: &TrainRun, b: &TrainRun) -> Result<(f64, Option<f64>)> {
    let (ta, tb) = (a.step_count(), b.step_count());
    if ta != tb {
        return Err(Error::Sync { a: ta, b: tb });
    }
    let delta = l2_distance(&a.net.flat_params(), &b.net.flat_params())?;
    let term_a = match (a.optimizer.v_hat(), b.optimizer.v_hat()) {
        (Some(va), Some(vb)) => Some(inverse_preconditioner_distance(&va, &vb, a.optimizer.hyperparams())?),
        _ => None,
    };
    Ok((delta, term_a))
}

pub fn l2_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension { op: "l2_distance", lhs: vec![x.len()], rhs: vec![y.len()] });
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

pub fn inverse_preconditioner_distance(a: &VhatSnapshot, b: &VhatSnapshot, hp: &Hyperparams) -> Result<f64> {
    let inv = |s: &VhatSnapshot| -> Vec<f64> {
        s.layers.iter().flat_map(|l| column_divisors(l, hp)).map(|d| 1.0 / d).collect()
    };
    l2_distance(&inv(a), &inv(b))
}

/// Running extrema of every v̂ entry seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VhatBoundMonitor {
    bounds: Option<(f64, f64)>,
}

impl VhatBoundMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, snapshot: &VhatSnapshot) {
        for v in snapshot.entries() {
            self.bounds = Some(match self.bounds {
                None => (v, v),
                Some((lo, hi)) => (lo.min(v), hi.max(v)),
            });
        }
    }

    /// `(min, max)` over everything observed, or `None` before the first
    /// observation.
    pub fn extrema(&self) -> Option<(f64, f64)> {
        self.bounds
    }
}

fn header(layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "epoch", "loss", "acc"].map(String::from).to_vec();
    h.extend((0..layers).map(|i| format!("actvar_L{i}")));
    h.extend(["eff_delta_l1", "eff_delta_linf", "delta_t", "term_a"].map(String::from));
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes records as CSV with the fixed metrics header.
pub fn write_metrics_csv<W: Write>(out: W, records: &[MetricsRecord], layers: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(layers))?;
    for r in records {
        if r.actvar.len() != layers {
            return Err(Error::Dimension {
                op: "write_metrics_csv",
                lhs: vec![layers],
                rhs: vec![r.actvar.len()],
            });
        }
        let mut row = vec![r.step.to_string(), r.epoch.to_string(), r.loss.to_string(), opt(r.acc)];
        row.extend(r.actvar.iter().map(f64::to_string));
        row.extend([r.eff_delta_l1, r.eff_delta_linf, r.delta_t, r.term_a].map(opt));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

fn parse_field(s: &str, name: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Format {
        offset: line,
        msg: format!("column {name}: cannot parse `{s}` on row {line}"),
    })
}

/// Reads a metrics CSV written by [`write_metrics_csv`].
pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let layers = names.iter().filter(|n| n.starts_with("actvar_L")).count();
    if names != header(layers) {
        return Err(Error::Format { offset: 0, msg: format!("unexpected metrics header {names:?}") });
    }
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let f = |i: usize| parse_field(&rec[i], names[i], line + 2);
        let req = |i: usize| {
            f(i)?.ok_or_else(|| Error::Format {
                offset: line + 2,
                msg: format!("column {} is empty", names[i]),
            })
        };
        let actvar = (0..layers).map(|i| req(4 + i)).collect::<Result<Vec<_>>>()?;
        let base = 4 + layers;
        out.push(MetricsRecord {
            step: req(0)? as u64,
            epoch: req(1)? as u64,
            loss: req(2)?,
            acc: f(3)?,
            actvar,
            eff_delta_l1: f(base)?,
            eff_delta_linf: f(base + 1)?,
            delta_t: f(base + 2)?,
            term_a: f(base + 3)?,
        });
    }
    Ok(out)
}

/// Activation variance averaged over all logged steps.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSummary {
    pub steps: usize,
    pub per_layer: Vec<f64>,
    pub overall: f64,
}

pub fn summarize_activation_variance(records: &[MetricsRecord]) -> Result<VarianceSummary> {
    let first = records.first().ok_or(Error::EmptyReduction("activation variance summary"))?;
    let layers = first.actvar.len();
    let mut per_layer = vec![0.0; layers];
    for r in records {
        for (acc, v) in per_layer.iter_mut().zip(&r.actvar) {
            *acc += v;
        }
    }
    per_layer.iter_mut().for_each(|v| *v /= records.len() as f64);
    let overall = if layers == 0 { 0.0 } else { per_layer.iter().sum::<f64>() / layers as f64 };
    Ok(VarianceSummary { steps: records.len(), per_layer, overall })
}

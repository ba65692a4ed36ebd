//! Experiment configuration: a flat TOML document with the sections
//! `[dataset]`, `[model]`, `[optim]` and `[run]`.
//!
//! ```toml
//! [dataset]
//! kind = "blobs"          # blobs | idx | cifar
//! classes = 4
//! per_class = 500
//! dims = 20
//! spread = 0.5
//!
//! [model]
//! input = [20]
//! layers = ["dense:64", "relu", "dense:64", "relu", "dense:4"]
//!
//! [optim]
//! kind = "adaact"         # adaact | sgd | adam | adamw
//!
//! [run]
//! seed = 7
//! epochs = 30
//! ```
//!
//! Optimizer fields left out take the CIFAR-recipe defaults of the chosen
//! optimizer.

use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::data::BlobParams;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, NetworkSpec};
use crate::optim::{Hyperparams, OptimizerKind};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Blobs(BlobParams),
    Idx { images: PathBuf, labels: PathBuf, limit: Option<usize> },
    Cifar { path: PathBuf, limit: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Per-channel standardization after scaling to `[0, 1]`.
    pub standardize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    StabilityPair,
    VarianceReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: NetworkSpec,
    pub optimizer: OptimizerKind,
    /// `total_steps` is recomputed from the data size when a run starts.
    pub hyperparams: Hyperparams,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_fraction: f64,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub mode: Mode,
    /// Training-set row replaced in the neighboring dataset of a stability
    /// run; `None` trains both runs on identical data.
    pub replace_index: Option<usize>,
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "dataset",
        &[
            "kind",
            "classes",
            "per_class",
            "dims",
            "spread",
            "seed",
            "images",
            "labels",
            "path",
            "limit",
            "standardize",
        ],
    ),
    ("model", &["input", "layers"]),
    ("optim", &["kind", "lr", "lr_min", "beta1", "beta2", "weight_decay", "eps", "p", "clip"]),
    (
        "run",
        &["mode", "epochs", "batch_size", "seed", "eval_fraction", "output", "checkpoint", "replace_index"],
    ),
];

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

struct Section<'a> {
    name: &'static str,
    table: Option<&'a Table>,
}

impl<'a> Section<'a> {
    fn field(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn require<T>(&self, key: &str, v: Option<T>) -> Result<T> {
        v.ok_or_else(|| Error::config(self.field(key), "required"))
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(other) => {
                Err(Error::config(self.field(key), format!("expected a number, found {}", other.type_str())))
            }
        }
    }

    fn uint(&self, key: &str) -> Result<Option<u64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(other) => {
                Err(Error::config(self.field(key), format!("expected a non-negative integer, found {other}")))
            }
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        Ok(self.uint(key)?.map(|v| v as usize))
    }

    fn str(&self, key: &str) -> Result<Option<&'a str>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(other) => {
                Err(Error::config(self.field(key), format!("expected a string, found {}", other.type_str())))
            }
        }
    }

    fn bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(*b)),
            Some(other) => {
                Err(Error::config(self.field(key), format!("expected a boolean, found {}", other.type_str())))
            }
        }
    }

    fn array(&self, key: &str) -> Result<Option<&'a Vec<Value>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) => Ok(Some(a)),
            Some(other) => {
                Err(Error::config(self.field(key), format!("expected an array, found {}", other.type_str())))
            }
        }
    }

    fn path(&self, key: &str, base: &Path, must_exist: bool) -> Result<Option<PathBuf>> {
        let Some(s) = self.str(key)? else {
            return Ok(None);
        };
        let p = base.join(s);
        if must_exist && !p.exists() {
            return Err(Error::config(self.field(key), format!("file {} does not exist", p.display())));
        }
        Ok(Some(p))
    }
}

/// Parses a layer token: `dense:<units>`, `conv:<channels>:<kernel>[:<stride>[:<padding>]]`,
/// `relu` or `flatten`.
pub fn parse_layer(token: &str) -> Option<LayerSpec> {
    let parts: Vec<&str> = token.trim().split(':').collect();
    let num = |i: usize| parts.get(i).and_then(|s| s.trim().parse::<usize>().ok());
    match parts.first()?.trim().to_ascii_lowercase().as_str() {
        "dense" if parts.len() == 2 => Some(LayerSpec::Dense { units: num(1)? }),
        "conv" if (3..=5).contains(&parts.len()) => Some(LayerSpec::Conv {
            channels: num(1)?,
            kernel: num(2)?,
            stride: if parts.len() > 3 { num(3)? } else { 1 },
            padding: if parts.len() > 4 { num(4)? } else { 0 },
        }),
        "relu" if parts.len() == 1 => Some(LayerSpec::Relu),
        "flatten" if parts.len() == 1 => Some(LayerSpec::Flatten),
        _ => None,
    }
}

/// Parses and validates a config, resolving relative paths against the
/// current directory.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_in(text, Path::new("."))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_in(&text, base)
}

/// Parses and validates a config, resolving relative paths against `base`.
pub fn parse_config_in(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let doc: Table = text.parse().map_err(|e: toml::de::Error| Error::ConfigParse {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        msg: e.message().to_string(),
    })?;

    for (name, value) in &doc {
        let Some((_, keys)) = SECTIONS.iter().find(|(s, _)| s == name) else {
            return Err(Error::UnknownKey(name.clone()));
        };
        let Value::Table(t) = value else {
            return Err(Error::config(name.clone(), "expected a [section]"));
        };
        if let Some(k) = t.keys().find(|k| !keys.contains(&k.as_str())) {
            return Err(Error::UnknownKey(format!("{name}.{k}")));
        }
    }
    let section = |name: &'static str| Section { name, table: doc.get(name).and_then(Value::as_table) };
    let (ds, model, optim, run) = (section("dataset"), section("model"), section("optim"), section("run"));

    let seed = run.require("seed", run.uint("seed")?)?;

    let kind = ds.require("kind", ds.str("kind")?)?;
    let source = match kind {
        "blobs" => {
            let params = BlobParams {
                classes: ds.usize("classes")?.unwrap_or(4),
                per_class: ds.usize("per_class")?.unwrap_or(100),
                dims: ds.usize("dims")?.unwrap_or(20),
                spread: ds.f64("spread")?.unwrap_or(0.5),
                seed: ds.uint("seed")?.unwrap_or(seed),
            };
            if params.classes == 0 || params.per_class == 0 || params.dims == 0 {
                return Err(Error::config("dataset", "classes, per_class and dims must be >= 1"));
            }
            if !(params.spread > 0.0 && params.spread.is_finite()) {
                return Err(Error::config("dataset.spread", "must be > 0"));
            }
            DatasetSource::Blobs(params)
        }
        "idx" => DatasetSource::Idx {
            images: ds.require("images", ds.path("images", base, true)?)?,
            labels: ds.require("labels", ds.path("labels", base, true)?)?,
            limit: ds.usize("limit")?,
        },
        "cifar" => DatasetSource::Cifar {
            path: ds.require("path", ds.path("path", base, true)?)?,
            limit: ds.usize("limit")?,
        },
        other => {
            return Err(Error::config(
                "dataset.kind",
                format!("unknown dataset kind `{other}` (expected blobs, idx or cifar)"),
            ))
        }
    };
    if let DatasetSource::Idx { limit: Some(0), .. } | DatasetSource::Cifar { limit: Some(0), .. } = source {
        return Err(Error::config("dataset.limit", "must be >= 1"));
    }
    let dataset = DatasetConfig { source, standardize: ds.bool("standardize")?.unwrap_or(false) };

    let input = model
        .require("input", model.array("input")?)?
        .iter()
        .map(|v| match v {
            Value::Integer(i) if *i > 0 => Ok(*i as usize),
            _ => Err(Error::config("model.input", "expected positive integers")),
        })
        .collect::<Result<Vec<_>>>()?;
    let layers = model
        .require("layers", model.array("layers")?)?
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_str().and_then(parse_layer).ok_or_else(|| {
                Error::config(format!("model.layers[{i}]"), format!("invalid layer token {v}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if layers.is_empty() {
        return Err(Error::config("model.layers", "at least one layer is required"));
    }
    let model_spec = NetworkSpec { input, layers };
    crate::nn::init_network(&model_spec, 0).map_err(|e| Error::config("model.layers", e.to_string()))?;

    let opt_name = optim.require("kind", optim.str("kind")?)?;
    let optimizer = OptimizerKind::parse(opt_name).ok_or_else(|| {
        Error::config(
            "optim.kind",
            format!("unknown optimizer `{opt_name}` (expected adaact, sgd, adam or adamw)"),
        )
    })?;
    let d = Hyperparams::defaults(optimizer);
    let clip = match optim.array("clip")? {
        None => None,
        Some(a) => match a.as_slice() {
            [lo, hi] => {
                let num = |v: &Value| match v {
                    Value::Float(f) => Some(*f),
                    Value::Integer(i) => Some(*i as f64),
                    _ => None,
                };
                Some((
                    num(lo).ok_or_else(|| Error::config("optim.clip", "expected numbers"))?,
                    num(hi).ok_or_else(|| Error::config("optim.clip", "expected numbers"))?,
                ))
            }
            _ => return Err(Error::config("optim.clip", "expected [c_L, c_U]")),
        },
    };
    let hyperparams = Hyperparams {
        eta_max: optim.f64("lr")?.unwrap_or(d.eta_max),
        eta_min: optim.f64("lr_min")?.unwrap_or(d.eta_min),
        beta1: optim.f64("beta1")?.unwrap_or(d.beta1),
        beta2: optim.f64("beta2")?.unwrap_or(d.beta2),
        weight_decay: optim.f64("weight_decay")?.unwrap_or(d.weight_decay),
        epsilon: optim.f64("eps")?.unwrap_or(d.epsilon),
        p: optim.f64("p")?.unwrap_or(d.p),
        clip,
        total_steps: 1,
    };
    hyperparams.validate()?;

    let mode = match run.str("mode")?.unwrap_or("train") {
        "train" => Mode::Train,
        "stability-pair" => Mode::StabilityPair,
        "variance-report" => Mode::VarianceReport,
        other => {
            return Err(Error::config(
                "run.mode",
                format!("unknown mode `{other}` (expected train, stability-pair or variance-report)"),
            ))
        }
    };
    let epochs = run.usize("epochs")?.unwrap_or(10);
    if epochs == 0 {
        return Err(Error::config("run.epochs", "must be >= 1"));
    }
    let batch_size = run.usize("batch_size")?.unwrap_or(128);
    if batch_size == 0 {
        return Err(Error::config("run.batch_size", "must be >= 1"));
    }
    let eval_fraction = run.f64("eval_fraction")?.unwrap_or(0.2);
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::config("run.eval_fraction", "must lie in [0, 1)"));
    }

    Ok(ExperimentConfig {
        dataset,
        model: model_spec,
        optimizer,
        hyperparams,
        epochs,
        batch_size,
        seed,
        eval_fraction,
        output: run.path("output", base, false)?,
        checkpoint: run.path("checkpoint", base, false)?,
        mode,
        replace_index: run.usize("replace_index")?,
    })
}

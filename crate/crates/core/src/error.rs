use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("dimension mismatch at layer {layer}: expected {expected:?}, got {got:?}")]
    LayerDimension { layer: usize, expected: Vec<usize>, got: Vec<usize> },

    #[error("numeric domain violation in {op} at index {index} (value {value})")]
    NumericDomain { op: &'static str, index: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty reduction in {0}")]
    EmptyReduction(&'static str),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("variance needs at least 2 rows, got {rows}")]
    DegenerateVariance { rows: usize },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("schedule step {step} outside [0, {total}]")]
    ScheduleRange { step: u64, total: u64 },

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("paired runs out of sync: step {a} vs {b}")]
    Sync { a: u64, b: u64 },

    #[error("config error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), msg: msg.into() }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigParse { .. } | Error::UnknownKey(_) | Error::Config { .. } => 2,
            Error::Divergence { .. } => 4,
            Error::Format { .. } | Error::Io { .. } | Error::Csv(_) | Error::Label { .. } => 3,
            _ => 1,
        }
    }
}

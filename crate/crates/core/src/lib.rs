//! Activation-variance adaptive optimization (AdaAct) on a small dense/conv
//! training stack, with momentum-SGD, Adam and AdamW baselines and the
//! diagnostics used to study activation variance, effective step sizes and
//! algorithmic stability.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

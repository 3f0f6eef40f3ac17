//! Mixture-of-task-adapters transformer lab.
//!
//! A from-scratch encoder-decoder transformer whose chosen encoder FFN blocks
//! are replaced by a mixture of task adapters, trained in two stages: full
//! fine-tuning with biased, temperature-sharpened task weights, then a frozen
//! backbone with a shared adapter and a `[START]`-conditioned gate over the
//! top-K task adapters.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mta;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;

// `!(x > 0.0)` is how NaN gets rejected throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod federation;
mod gemm;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod replay;
pub mod runner;
pub mod sampler;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

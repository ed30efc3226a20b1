//! Sharpness-aware ensemble training with a diversity-aware perturbation,
//! over a small self-contained MLP core.
//!
//! The crate provides:
//! - dense `f64` tensors and a pinned deterministic RNG ([`tensor`], [`rng`]);
//! - MLP ensemble members with exact manual backprop ([`model`]);
//! - the training losses: smoothed cross-entropy, the ensemble-coupled
//!   loss, the non-target KL diversity loss, and their combination
//!   ([`losses`]);
//! - SGD / SAM / ASAM / DASH update rules and the training loop
//!   ([`optimizer`]);
//! - evaluation metrics including calibrated variants and the two
//!   ensemble-diversity scores ([`metrics`]);
//! - a numeric evaluator of the ensemble PAC-Bayes sharpness bound
//!   ([`bound`]);
//! - PGD attack and robust-accuracy curves ([`adversarial`]);
//! - synthetic dataset generators and delimited-file ingestion ([`data`]).

pub mod adversarial;
pub mod bound;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Activation, Batch, Ensemble, MlpModel, ParamVector};
pub use rng::Rng;
pub use tensor::Tensor;

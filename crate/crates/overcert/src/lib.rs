//! Test-time unsupervised domain adaptation with calibration
//! instrumentation at desk scale.
//!
//! Entropy-minimizing adapters tend to leave a shifted model more confident
//! than it is accurate. This crate implements certainty distillation — a
//! teacher/student update whose per-sample temperature grows with entropy
//! relative to the source domain and shrinks with relative logit norm —
//! alongside the TENT, ETA, and T3A baselines, all on a small dense
//! backbone with reverse-mode gradients built from scratch.
//!
//! Layout:
//! - [`nn`]: dense/batch-norm/ReLU network, tempered softmax, gradients,
//!   SGD, layer freezing, checkpoints.
//! - [`metrics`]: entropy, certainty, ECE, logit norms, reliability bins.
//! - [`cd`]: source statistics, the tau regularizer, the distillation update.
//! - [`baselines`]: TENT, ETA, and T3A.
//! - [`data`]: synthetic Gaussian domains with 5-tier corruptions and a
//!   binary dataset container.
//! - [`harness`]: experiment configs, sweep driver, CSV/JSON reports.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod baselines;
pub mod cd;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};

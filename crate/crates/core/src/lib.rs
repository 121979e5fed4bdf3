//! Debiased model-based interactive recommendation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`params`], [`layers`], [`optim`]: a small
//!   dense `f64` engine with reverse-mode differentiation.
//! - [`data`]: interaction/trust ingestion, time bucketing, popularity and
//!   social-graph snapshots, and the logged dataset.
//! - [`env`]: the matrix-factorisation ground-truth simulator with interest
//!   decay used for evaluation.
//! - [`world_model`]: the causal world model (user-state recursion, context
//!   posterior, feedback predictor, ELBO, debiased feedback estimate).
//! - [`policy`]: the contrastive Q-policy over positive/negative histories.
//! - [`trainer`]: pretrain / collect / policy / finetune orchestration.
//! - [`eval`]: interaction metrics, ablation runners and reports.
//! - [`ident`]: synthetic latent-recovery bench.

pub mod autodiff;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod ident;
pub mod layers;
pub mod optim;
pub mod params;
pub mod policy;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod world_model;

pub use error::{Error, Result};
pub use tensor::Tensor;

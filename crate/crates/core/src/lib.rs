//! Desk-scale rate-distortion laboratory.
//!
//! The crate has three layers:
//!
//! * exact information theory over finite joint tables ([`info`]) and the
//!   coding-model identity verifiers built on it ([`coding`]);
//! * a minimal float64 reverse-mode tape ([`autodiff`]), parameter store and
//!   Adam ([`params`]), and the toy transform codec with its factorized
//!   Gaussian latent prior ([`codec`]) plus the conditional source entropy
//!   model used as a training regularizer ([`source_model`]);
//! * the deterministic experiment driver ([`trainer`]) and the evaluation
//!   harness ([`eval`]): BD-Rate, identity probes on trained codecs, alpha
//!   sweeps and domain-shift tables.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod coding;
pub mod error;
pub mod eval;
pub mod info;
pub mod params;
pub mod rng;
pub mod source_model;
pub mod sources;
pub mod special;
pub mod trainer;

pub use error::{Error, Result};

//! Dynamic relevance learning for few-shot classification of region features.
//!
//! The crate is organised bottom-up:
//!
//! * [`numkernel`]: dense matrices, seeded RNG, a reverse-mode tape and
//!   finite-difference gradient checks.
//! * [`episodes`]: synthetic full-way K-shot episodes with a base/novel split.
//! * [`metanet`]: shared extractor, class-attentive aggregation, the
//!   classification head and the support (meta) classifier.
//! * [`relevance`]: relation matrices, the dynamic GCN in normal and
//!   residual form, the group-loss baseline and the relevance loss.
//!   Similarity metrics and propagators are registered by name.
//! * [`training`]: loss composition, SGD with momentum, the two-stage
//!   protocol and evaluation.

pub mod checkpoint;
pub mod episodes;
pub mod error;
pub mod metanet;
pub mod numkernel;
pub mod relevance;
pub mod training;

pub use error::{DrlError, Result};

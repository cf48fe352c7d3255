//! Completion of sparse 3-mode tensors with neural Tucker factorization.
//!
//! Observed cells of a `users × services × time` tensor are embedded per mode,
//! combined into a rank-one interaction tensor and scored either by a learned
//! core tensor ([`model::ModelKind::Neutucf`]) or by stacked multi-head self-attending
//! blocks followed by a sigmoid head ([`model::ModelKind::Msntucf`]).

pub mod cli;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod sparse_tensor;
pub mod synthetic;
pub mod training;

pub use error::{Error, ErrorClass, Result};

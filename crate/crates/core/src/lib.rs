//! Semi-supervised metric learning with proxy-level and prototype-level
//! alignment of proposal embeddings, on hand-derived gradients.
//!
//! Proposal features pass through a two-layer [`projection`] head into a metric
//! space. Labeled embeddings are pulled toward learnable class [`proxy`]
//! vectors; unlabeled embeddings are pulled toward the proxy of their
//! confidence-thresholded pseudo label from the surrogate [`scorer`]. Per-batch
//! class [`prototype`]s are aligned against the means of a memory bank of past
//! labeled prototypes. The [`trainer`] assembles the weighted objective and
//! runs SGD with momentum.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod numerics;
pub mod objective;
pub mod projection;
pub mod prototype;
pub mod proxy;
pub mod scorer;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};

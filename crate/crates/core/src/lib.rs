//! Graph-less collaborative filtering.
//!
//! Trains a lightweight GCN teacher on a user-item interaction graph, then
//! distills it into a residual-MLP student via prediction-level KD,
//! embedding-level contrastive KD, and gradient-adaptive contrastive
//! regularization. Includes an all-rank evaluation harness, an over-smoothing
//! (MAD) metric, and teacher-vs-student inference timing.

pub mod dataset;
pub mod distill;
pub mod error;
pub mod eval;
pub mod numkit;
pub mod student;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
pub use numkit::{AdamState, DenseMatrix, Rng, SparseAdjacency};

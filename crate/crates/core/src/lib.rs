//! Cluster-aware dense-to-MoE upcycling on a toy residual network.
//!
//! The crate covers the full pipeline: dense pretraining, calibration
//! capture, four expert initializers, MoE training with load balancing and
//! ensemble self-distillation, and specialization diagnostics.

pub mod analysis;
pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod distill;
pub mod error;
pub mod linalg;
pub mod moe;
pub mod pipeline;
pub mod rng;
pub mod train;
pub mod upcycle;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;

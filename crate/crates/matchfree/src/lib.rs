//! Differentiable label assignment for set-prediction detectors.
//!
//! Classic DETR-style training assigns ground truths to object queries with
//! Hungarian bipartite matching on a pairwise cost matrix. This crate
//! implements a matching-free alternative: encoded ground truths probe the
//! query bank through cross-attention, producing a dense correspondence
//! matrix `A` that is sparsified by dynamic thresholding into a supervision
//! topology `Â`. Two Hadamard-product losses couple these correspondences to
//! the broadcast cost matrix `C`:
//!
//! - `L_w = Σ A ⊗ C` trains the probe to put weight on low-cost pairs;
//! - `L_q = Σ Â ⊗ C` gates the cost to supervise the selected queries.
//!
//! Everything is built on a small f64 kernel with analytic gradients that are
//! verified against central finite differences. The Hungarian baseline the
//! scheme replaces is included, together with a brute-force matching oracle,
//! a synthetic-scene toy trainer that runs both objectives end to end, and a
//! latency benchmark comparing the two assignment paths across (M, N) sizes.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod geometry;
pub mod gtprobe;
pub mod hungarian;
pub mod losses;
pub mod numkernel;
pub mod scg;
pub mod toytrainer;

pub use error::{Error, Result};

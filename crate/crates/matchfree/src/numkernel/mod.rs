//! Minimal dense numeric substrate.
//!
//! Row-major f64 matrices, ReLU MLPs with hand-derived backward passes, a
//! numerically stabilized row softmax, an Adam optimizer, and a central
//! finite-difference gradient checker. Everything upstream (probe, costs,
//! losses, toy trainer) is built on these pieces; there is no external
//! numerics dependency, and all arithmetic is 64-bit.

mod gradcheck;
mod matrix;
mod mlp;
mod optim;

pub use gradcheck::{gradcheck, rel_error, GradCheckReport};
pub use matrix::{matmul, softmax_rows, Matrix};
pub use mlp::{Activation, Mlp, MlpCache, MlpGrads};
pub use optim::{adam_step, AdamHyper, AdamState};

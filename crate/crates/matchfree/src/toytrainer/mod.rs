//! Desk-scale end-to-end training harness.
//!
//! Synthetic detection scenes are drawn from a small pool of jittered object
//! prototypes, a minimal learnable prediction head (per-query MLP over
//! learned query embeddings, no image features) stands in for the detector
//! decoder, and training runs under either the match-free objective or the
//! classical Hungarian baseline. Both objectives consume the identical
//! broadcast-cost implementation; only the gating differs: the match-free
//! path gates `C` by the learned `Â`, the baseline gates it by the one-hot
//! matching mask.
//!
//! The prototype pool is what makes the harness meaningful: a scene-
//! independent prediction head can only converge if the scene distribution
//! is itself learnable, so scenes sample a fixed, seeded set of (label, box)
//! prototypes with small jitter rather than fully random boxes.

mod ablate;
mod eval;
mod model;
mod scene;
mod train;

pub use ablate::{ablation_csv, run_ablation, AblateParam, AblationRow};
pub use eval::{evaluate, Assigner, EvalMetrics};
pub use model::{ToyCache, ToyGrads, ToyModel};
pub use scene::{generate_scene, PrototypePool, Scene, SceneMode};
pub use train::{
    load_train_checkpoint, save_train_checkpoint, train, train_with_state, Objective, StepRecord,
    TrainOutcome, TrainState,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Toy trainer configuration. The defaults are sized for sub-minute CPU
/// runs: 25 queries over 4 classes, 1–5 ground truths per scene drawn from 6
/// prototypes, 2000 Adam steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub num_queries: usize,
    pub num_classes: usize,
    pub gt_count_min: usize,
    pub gt_count_max: usize,
    /// Size of the prototype pool scenes sample from.
    pub num_prototypes: usize,
    /// Uniform jitter applied to prototype centers per scene.
    pub center_jitter: f64,
    /// Uniform jitter applied to prototype extents per scene.
    pub size_jitter: f64,
    /// Post-jitter pairwise center separation the generator guarantees.
    pub min_separation: f64,
    pub proto_size_min: f64,
    pub proto_size_max: f64,
    pub scene_mode: SceneMode,
    /// Seed the prototype pool derives from (scenes add their own seeds).
    pub pool_seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Width of the learned query embeddings.
    pub query_dim: usize,
    /// Hidden width of the prediction head.
    pub head_hidden: usize,
    /// Log purity on a small probe set every this many steps (0 disables).
    pub eval_every: usize,
    /// Scenes in the periodic probe set.
    pub probe_scenes: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            num_queries: 25,
            num_classes: 4,
            gt_count_min: 1,
            gt_count_max: 5,
            num_prototypes: 6,
            center_jitter: 0.015,
            size_jitter: 0.01,
            min_separation: 0.2,
            proto_size_min: 0.15,
            proto_size_max: 0.35,
            scene_mode: SceneMode::Prototype,
            pool_seed: 1234,
            steps: 2000,
            lr: 1e-3,
            weight_decay: 0.0,
            query_dim: 32,
            head_hidden: 64,
            eval_every: 200,
            probe_scenes: 20,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.num_classes == 0 {
            return Err(Error::validation("toy config needs queries and classes"));
        }
        if self.gt_count_min == 0 || self.gt_count_min > self.gt_count_max {
            return Err(Error::validation(format!(
                "bad gt count range [{}, {}]",
                self.gt_count_min, self.gt_count_max
            )));
        }
        if self.scene_mode == SceneMode::Prototype && self.gt_count_max > self.num_prototypes {
            return Err(Error::validation(format!(
                "gt_count_max {} exceeds the {} prototypes",
                self.gt_count_max, self.num_prototypes
            )));
        }
        if !(self.proto_size_min > 0.0 && self.proto_size_min <= self.proto_size_max) {
            return Err(Error::validation("bad prototype size range"));
        }
        if self.proto_size_max + 2.0 * self.size_jitter >= 1.0 {
            return Err(Error::validation("prototype boxes would not fit in the unit square"));
        }
        if self.min_separation < 0.0 || self.center_jitter < 0.0 || self.size_jitter < 0.0 {
            return Err(Error::validation("jitters and separation must be non-negative"));
        }
        if self.query_dim == 0 || self.head_hidden == 0 {
            return Err(Error::validation("model dims must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(Error::validation("learning rate must be positive"));
        }
        Ok(())
    }
}

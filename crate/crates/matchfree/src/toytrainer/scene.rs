//! Synthetic scene generation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ToyConfig;
use crate::cost::GroundTruthSet;
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneMode {
    /// Scenes sample jittered entries from a fixed prototype pool
    /// (learnable by a scene-independent head).
    Prototype,
    /// Fully random labels and boxes; used by the benchmark and for
    /// exercising the pipeline on arbitrary data.
    Uniform,
}

/// Fixed set of (label, box) prototypes, deterministic given the pool seed.
#[derive(Debug, Clone)]
pub struct PrototypePool {
    pub entries: Vec<(usize, BBox)>,
}

impl PrototypePool {
    /// Place `num_prototypes` boxes with pairwise center separation of at
    /// least `min_separation` plus jitter headroom. Placement is rejection
    /// sampling with a bounded retry budget.
    pub fn generate(cfg: &ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.pool_seed);
        // keep separation after the per-scene center jitter
        let needed = cfg.min_separation + 2.0 * cfg.center_jitter;
        let mut entries: Vec<(usize, BBox)> = Vec::with_capacity(cfg.num_prototypes);
        let mut attempts = 0usize;
        while entries.len() < cfg.num_prototypes {
            attempts += 1;
            if attempts > 20_000 {
                return Err(Error::Generation(format!(
                    "could not place {} prototypes with separation {}",
                    cfg.num_prototypes, cfg.min_separation
                )));
            }
            let w = rng.gen_range(cfg.proto_size_min..=cfg.proto_size_max);
            let h = rng.gen_range(cfg.proto_size_min..=cfg.proto_size_max);
            let margin_x = w / 2.0 + cfg.center_jitter;
            let margin_y = h / 2.0 + cfg.center_jitter;
            let cx = rng.gen_range(margin_x..1.0 - margin_x);
            let cy = rng.gen_range(margin_y..1.0 - margin_y);
            let ok = entries
                .iter()
                .all(|(_, b)| ((b.cx - cx).powi(2) + (b.cy - cy).powi(2)).sqrt() >= needed);
            if ok {
                let label = entries.len() % cfg.num_classes;
                entries.push((label, BBox::new(cx, cy, w, h)?));
            }
        }
        Ok(PrototypePool { entries })
    }
}

/// One synthetic detection scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub gts: GroundTruthSet,
    pub seed: u64,
}

/// Deterministic scene from a seed. Prototype mode samples distinct pool
/// entries and jitters them; uniform mode rejection-samples separated random
/// boxes.
pub fn generate_scene(cfg: &ToyConfig, pool: &PrototypePool, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(cfg.gt_count_min..=cfg.gt_count_max);
    match cfg.scene_mode {
        SceneMode::Prototype => {
            let mut idx: Vec<usize> = (0..pool.entries.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(m);
            idx.sort_unstable();
            let mut labels = Vec::with_capacity(m);
            let mut boxes = Vec::with_capacity(m);
            for &pi in &idx {
                let (label, proto) = pool.entries[pi];
                let w = (proto.w + rng.gen_range(-cfg.size_jitter..=cfg.size_jitter))
                    .max(cfg.proto_size_min / 2.0);
                let h = (proto.h + rng.gen_range(-cfg.size_jitter..=cfg.size_jitter))
                    .max(cfg.proto_size_min / 2.0);
                let cx = (proto.cx + rng.gen_range(-cfg.center_jitter..=cfg.center_jitter))
                    .clamp(w / 2.0, 1.0 - w / 2.0);
                let cy = (proto.cy + rng.gen_range(-cfg.center_jitter..=cfg.center_jitter))
                    .clamp(h / 2.0, 1.0 - h / 2.0);
                labels.push(label);
                boxes.push(BBox::new(cx, cy, w, h)?);
            }
            Ok(Scene { gts: GroundTruthSet::new(labels, boxes)?, seed })
        }
        SceneMode::Uniform => {
            let mut boxes: Vec<BBox> = Vec::with_capacity(m);
            let mut labels = Vec::with_capacity(m);
            let mut attempts = 0usize;
            while boxes.len() < m {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Generation(format!(
                        "could not place {m} boxes with separation {}",
                        cfg.min_separation
                    )));
                }
                let w = rng.gen_range(cfg.proto_size_min..=cfg.proto_size_max);
                let h = rng.gen_range(cfg.proto_size_min..=cfg.proto_size_max);
                let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
                let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
                if boxes
                    .iter()
                    .all(|b| ((b.cx - cx).powi(2) + (b.cy - cy).powi(2)).sqrt() >= cfg.min_separation)
                {
                    boxes.push(BBox::new(cx, cy, w, h)?);
                    labels.push(rng.gen_range(0..cfg.num_classes));
                }
            }
            Ok(Scene { gts: GroundTruthSet::new(labels, boxes)?, seed })
        }
    }
}

/// Seed for the training scene at `step`.
pub(crate) fn train_scene_seed(base: u64, step: u64) -> u64 {
    splitmix(base ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Seed for held-out evaluation scene `i` (disjoint stream from training).
pub fn eval_scene_seed(base: u64, i: u64) -> u64 {
    splitmix(base ^ 0xE0A1_55C3_0000_0001 ^ i.wrapping_mul(0xD134_2543_DE82_EF95))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

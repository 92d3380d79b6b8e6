//! Evaluation metrics for trained (or untrained) toy models.
//!
//! Purity is the fraction of ground truths whose selected query localizes
//! them with IoU ≥ 0.5. The selector depends on how the model was trained:
//! the match-free path selects each ground truth's argmax-A query, the
//! Hungarian control selects its matched query. A scale-stratified purity is
//! emitted alongside (no acceptance bound is attached to it).

use serde::{Deserialize, Serialize};

use crate::cost::{broadcast_cost_mode, ClassificationMode, CostWeights};
use crate::error::Result;
use crate::geometry::iou;
use crate::gtprobe::GtProbeParams;
use crate::scg::{sparse_pipeline, ScgConfig};
use crate::toytrainer::{Scene, ToyModel};

/// IoU threshold for a "pure" assignment, the conventional detection
/// positive threshold.
pub const PURITY_IOU: f64 = 0.5;

/// How ground truths pick their representative query at evaluation time.
pub enum Assigner<'a> {
    /// argmax over each row of the dense correspondence matrix.
    Probe { params: &'a GtProbeParams, scg: &'a ScgConfig },
    /// Hungarian matching on the broadcast cost.
    Hungarian { weights: &'a CostWeights, mode: ClassificationMode },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Fraction of GTs whose selected query reaches IoU ≥ 0.5.
    pub purity: f64,
    pub mean_matched_iou: f64,
    /// Fraction of GTs whose selected query predicts the right class.
    pub class_accuracy: f64,
    /// Mean size of each GT's surviving-query set under the sparse topology
    /// (1.0 by definition for the Hungarian assigner).
    pub mean_surviving_per_gt: f64,
    /// Purity stratified by GT box area (small < 0.05 ≤ medium < 0.09 ≤
    /// large); `None` when a bucket is empty.
    pub purity_small: Option<f64>,
    pub purity_medium: Option<f64>,
    pub purity_large: Option<f64>,
    pub num_scenes: usize,
    pub num_gts: usize,
}

/// Evaluate over a scene set. Deterministic given the scenes.
pub fn evaluate(model: &ToyModel, scenes: &[Scene], assigner: &Assigner) -> Result<EvalMetrics> {
    let (preds, _) = model.forward()?;
    let mut pure = 0usize;
    let mut iou_sum = 0.0;
    let mut class_hits = 0usize;
    let mut surviving_sum = 0.0;
    let mut total_gts = 0usize;
    let mut bucket_pure = [0usize; 3];
    let mut bucket_total = [0usize; 3];

    for scene in scenes {
        let m = scene.gts.len();
        if m == 0 {
            continue;
        }
        let selections: Vec<Option<usize>> = match assigner {
            Assigner::Probe { params, .. } => {
                let fwd = params.forward(&scene.gts, &preds)?;
                fwd.a.row_argmax().into_iter().map(Some).collect()
            }
            Assigner::Hungarian { weights, mode } => {
                let c = broadcast_cost_mode(&scene.gts, &preds, weights, *mode)?;
                let assignment = crate::hungarian::hungarian_match(&c.values)?;
                let mut sel = vec![None; m];
                for &(i, j) in &assignment.pairs {
                    sel[i] = Some(j);
                }
                sel
            }
        };
        let surviving: Vec<usize> = match assigner {
            Assigner::Probe { params, scg } => {
                let fwd = params.forward(&scene.gts, &preds)?;
                let out = sparse_pipeline(&fwd.a.values, scg)?;
                (0..m).map(|i| out.sparse.row_support(i)).collect()
            }
            Assigner::Hungarian { .. } => vec![1; m],
        };

        for i in 0..m {
            total_gts += 1;
            surviving_sum += surviving[i] as f64;
            let gt_box = &scene.gts.boxes()[i];
            let bucket = area_bucket(gt_box.area());
            bucket_total[bucket] += 1;
            let Some(j) = selections[i] else { continue };
            let overlap = iou(&preds.boxes()[j], gt_box);
            iou_sum += overlap;
            if overlap >= PURITY_IOU {
                pure += 1;
                bucket_pure[bucket] += 1;
            }
            let row = preds.logits().row(j);
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(c, _)| c)
                .unwrap();
            if arg == scene.gts.labels()[i] {
                class_hits += 1;
            }
        }
    }

    let frac = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let bucket_metric = |b: usize| {
        (bucket_total[b] > 0).then(|| bucket_pure[b] as f64 / bucket_total[b] as f64)
    };
    Ok(EvalMetrics {
        purity: frac(pure, total_gts),
        mean_matched_iou: if total_gts == 0 { 0.0 } else { iou_sum / total_gts as f64 },
        class_accuracy: frac(class_hits, total_gts),
        mean_surviving_per_gt: if total_gts == 0 {
            0.0
        } else {
            surviving_sum / total_gts as f64
        },
        purity_small: bucket_metric(0),
        purity_medium: bucket_metric(1),
        purity_large: bucket_metric(2),
        num_scenes: scenes.len(),
        num_gts: total_gts,
    })
}

fn area_bucket(area: f64) -> usize {
    if area < 0.05 {
        0
    } else if area < 0.09 {
        1
    } else {
        2
    }
}

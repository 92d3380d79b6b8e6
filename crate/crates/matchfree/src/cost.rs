//! Broadcast cost matrix over all (ground truth, query) pairs.
//!
//! Every pair gets a weighted sum of a classification term, an L1 box term,
//! and a GIoU term:
//!
//! `C[i][j] = λ_cls·cls(p_j, c_i) + λ_L1·‖b_j − ĝ_i‖₁ + λ_iou·(1 − giou(b_j, ĝ_i))`
//!
//! The backward pass carries an arbitrary upstream `dC` into gradients on the
//! prediction logits and boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou_grad, giou_loss, l1_cost, l1_grad, BBox};
use crate::numkernel::Matrix;

/// Probabilities are clamped to this range before taking logs, so every cost
/// entry stays finite. Gradients are zeroed while the clamp is active.
pub const PROB_CLAMP: f64 = 1e-8;

/// M labeled boxes acting as assignment targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthSet {
    labels: Vec<usize>,
    boxes: Vec<BBox>,
}

impl GroundTruthSet {
    pub fn new(labels: Vec<usize>, boxes: Vec<BBox>) -> Result<Self> {
        if labels.len() != boxes.len() {
            return Err(Error::validation(format!(
                "{} labels but {} boxes",
                labels.len(),
                boxes.len()
            )));
        }
        Ok(GroundTruthSet { labels, boxes })
    }

    pub fn empty() -> Self {
        GroundTruthSet { labels: vec![], boxes: vec![] }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn max_label(&self) -> Option<usize> {
        self.labels.iter().copied().max()
    }
}

/// N predictions: one row of class logits plus one box per query.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    logits: Matrix,
    boxes: Vec<BBox>,
}

impl PredictionSet {
    pub fn new(logits: Matrix, boxes: Vec<BBox>) -> Result<Self> {
        if logits.rows() != boxes.len() {
            return Err(Error::validation(format!(
                "{} logit rows but {} boxes",
                logits.rows(),
                boxes.len()
            )));
        }
        if logits.cols() == 0 {
            return Err(Error::validation("prediction set needs at least one class"));
        }
        Ok(PredictionSet { logits, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }
}

/// Non-negative weights for the three cost terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_iou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { lambda_cls: 2.0, lambda_l1: 5.0, lambda_iou: 2.0 }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cls < 0.0 || self.lambda_l1 < 0.0 || self.lambda_iou < 0.0 {
            return Err(Error::validation("cost weights must be non-negative"));
        }
        Ok(())
    }

    pub fn combine(&self, cls: f64, l1: f64, giou_term: f64) -> f64 {
        self.lambda_cls * cls + self.lambda_l1 * l1 + self.lambda_iou * giou_term
    }
}

/// How the classification term is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassificationMode {
    /// `−log softmax(logits)[class]`, hand-verifiable.
    Nll,
    /// Binary focal cost on sigmoid probabilities with α=0.25, γ=2,
    /// mirroring the Deformable-DETR matcher convention.
    Focal,
}

const FOCAL_ALPHA: f64 = 0.25;
const FOCAL_GAMMA: f64 = 2.0;

/// Per-term matrices kept for diagnostics and CSV export.
#[derive(Debug, Clone)]
pub struct CostComponents {
    pub cls: Matrix,
    pub l1: Matrix,
    pub giou: Matrix,
}

/// M×N broadcast cost. `components` is populated by
/// [`broadcast_cost_detailed`] only.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub values: Matrix,
    pub components: Option<CostComponents>,
}

/// Classification cost of assigning `class_id` to the query with the given
/// logit row.
pub fn classification_cost(
    logits_row: &[f64],
    class_id: usize,
    mode: ClassificationMode,
) -> Result<f64> {
    if class_id >= logits_row.len() {
        return Err(Error::validation(format!(
            "class id {} out of range for {} classes",
            class_id,
            logits_row.len()
        )));
    }
    Ok(match mode {
        ClassificationMode::Nll => {
            let p = softmax_prob(logits_row, class_id).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -p.ln()
        }
        ClassificationMode::Focal => {
            let p = sigmoid(logits_row[class_id]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            focal_cost(p)
        }
    })
}

/// d(classification_cost)/d(logits_row). Zero whenever the probability clamp
/// is active.
pub fn classification_grad(
    logits_row: &[f64],
    class_id: usize,
    mode: ClassificationMode,
) -> Result<Vec<f64>> {
    if class_id >= logits_row.len() {
        return Err(Error::validation(format!(
            "class id {} out of range for {} classes",
            class_id,
            logits_row.len()
        )));
    }
    let k = logits_row.len();
    Ok(match mode {
        ClassificationMode::Nll => {
            let probs = softmax_row(logits_row);
            if probs[class_id] <= PROB_CLAMP || probs[class_id] >= 1.0 - PROB_CLAMP {
                vec![0.0; k]
            } else {
                // d(−ln p_c)/dz_k = p_k − [k == c]
                let mut g = probs;
                g[class_id] -= 1.0;
                g
            }
        }
        ClassificationMode::Focal => {
            let mut g = vec![0.0; k];
            let p = sigmoid(logits_row[class_id]);
            if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                g[class_id] = focal_cost_dp(p) * p * (1.0 - p);
            }
            g
        }
    })
}

fn focal_cost(p: f64) -> f64 {
    let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * (-p.ln());
    let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * (-(1.0 - p).ln());
    pos - neg
}

fn focal_cost_dp(p: f64) -> f64 {
    let d_pos = FOCAL_ALPHA
        * (FOCAL_GAMMA * (1.0 - p).powf(FOCAL_GAMMA - 1.0) * p.ln()
            - (1.0 - p).powf(FOCAL_GAMMA) / p);
    let d_neg = (1.0 - FOCAL_ALPHA)
        * (FOCAL_GAMMA * p.powf(FOCAL_GAMMA - 1.0) * (-(1.0 - p).ln())
            + p.powf(FOCAL_GAMMA) / (1.0 - p));
    d_pos - d_neg
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax_prob(logits: &[f64], idx: usize) -> f64 {
    softmax_row(logits)[idx]
}

/// Broadcast cost with the NLL classification term and no component
/// matrices.
pub fn broadcast_cost(
    gts: &GroundTruthSet,
    preds: &PredictionSet,
    w: &CostWeights,
) -> Result<CostMatrix> {
    build_cost_mode(gts, preds, w, ClassificationMode::Nll, false)
}

/// Broadcast cost retaining the per-term matrices.
pub fn broadcast_cost_detailed(
    gts: &GroundTruthSet,
    preds: &PredictionSet,
    w: &CostWeights,
) -> Result<CostMatrix> {
    build_cost_mode(gts, preds, w, ClassificationMode::Nll, true)
}

/// Broadcast cost with an explicit classification mode.
pub fn broadcast_cost_mode(
    gts: &GroundTruthSet,
    preds: &PredictionSet,
    w: &CostWeights,
    mode: ClassificationMode,
) -> Result<CostMatrix> {
    build_cost_mode(gts, preds, w, mode, false)
}

fn build_cost_mode(
    gts: &GroundTruthSet,
    preds: &PredictionSet,
    w: &CostWeights,
    mode: ClassificationMode,
    keep_components: bool,
) -> Result<CostMatrix> {
    w.validate()?;
    if preds.is_empty() {
        return Err(Error::validation("broadcast cost needs at least one prediction"));
    }
    if let Some(max) = gts.max_label() {
        if max >= preds.num_classes() {
            return Err(Error::validation(format!(
                "ground-truth label {} out of range for {} classes",
                max,
                preds.num_classes()
            )));
        }
    }
    let (m, n) = (gts.len(), preds.len());
    let mut values = Matrix::zeros(m, n);
    let mut cls_m = keep_components.then(|| Matrix::zeros(m, n));
    let mut l1_m = keep_components.then(|| Matrix::zeros(m, n));
    let mut giou_m = keep_components.then(|| Matrix::zeros(m, n));

    for i in 0..m {
        let label = gts.labels[i];
        let gt_box = &gts.boxes[i];
        for j in 0..n {
            let cls = classification_cost(preds.logits.row(j), label, mode)?;
            let l1 = l1_cost(&preds.boxes[j], gt_box);
            let gl = giou_loss(&preds.boxes[j], gt_box);
            values.set(i, j, w.combine(cls, l1, gl));
            if let Some(mm) = &mut cls_m {
                mm.set(i, j, cls);
            }
            if let Some(mm) = &mut l1_m {
                mm.set(i, j, l1);
            }
            if let Some(mm) = &mut giou_m {
                mm.set(i, j, gl);
            }
        }
    }
    let components = keep_components.then(|| CostComponents {
        cls: cls_m.unwrap(),
        l1: l1_m.unwrap(),
        giou: giou_m.unwrap(),
    });
    Ok(CostMatrix { values, components })
}

/// Gradients of some scalar loss with respect to the prediction set, given
/// the upstream `dLoss/dC`.
#[derive(Debug, Clone)]
pub struct PredGrads {
    /// N×K
    pub logits: Matrix,
    /// N×4, ordered (cx, cy, w, h)
    pub boxes: Matrix,
}

impl PredGrads {
    pub fn zeros(n: usize, k: usize) -> Self {
        PredGrads { logits: Matrix::zeros(n, k), boxes: Matrix::zeros(n, 4) }
    }

    pub fn add(&mut self, other: &PredGrads) -> Result<()> {
        self.logits.add_scaled(&other.logits, 1.0)?;
        self.boxes.add_scaled(&other.boxes, 1.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.logits.max_abs().max(self.boxes.max_abs())
    }
}

/// Backward pass of [`broadcast_cost`]: accumulates
/// `Σ_i dC[i][j] · ∂C[i][j]/∂pred_j` for every query `j`.
pub fn broadcast_cost_backward(
    gts: &GroundTruthSet,
    preds: &PredictionSet,
    w: &CostWeights,
    mode: ClassificationMode,
    d_cost: &Matrix,
) -> Result<PredGrads> {
    if d_cost.rows() != gts.len() || d_cost.cols() != preds.len() {
        return Err(Error::shape(format!(
            "dC is {:?}, cost is {}x{}",
            d_cost.shape(),
            gts.len(),
            preds.len()
        )));
    }
    let mut grads = PredGrads::zeros(preds.len(), preds.num_classes());
    for i in 0..gts.len() {
        let label = gts.labels[i];
        let gt_box = &gts.boxes[i];
        for j in 0..preds.len() {
            let up = d_cost.get(i, j);
            if up == 0.0 {
                continue;
            }
            let cls_g = classification_grad(preds.logits.row(j), label, mode)?;
            for (k, g) in cls_g.iter().enumerate() {
                let v = grads.logits.get(j, k) + up * w.lambda_cls * g;
                grads.logits.set(j, k, v);
            }
            let l1g = l1_grad(&preds.boxes[j], gt_box);
            let gg = giou_grad(&preds.boxes[j], gt_box)?;
            for k in 0..4 {
                let v = grads.boxes.get(j, k) + up * (w.lambda_l1 * l1g[k] + w.lambda_iou * gg[k]);
                grads.boxes.set(j, k, v);
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::rel_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
        BBox::new(
            rng.gen_range(0.25..0.75),
            rng.gen_range(0.25..0.75),
            rng.gen_range(0.1..0.4),
            rng.gen_range(0.1..0.4),
        )
        .unwrap()
    }

    fn rand_sets(
        rng: &mut ChaCha8Rng,
        m: usize,
        n: usize,
        k: usize,
    ) -> (GroundTruthSet, PredictionSet) {
        let labels = (0..m).map(|_| rng.gen_range(0..k)).collect();
        let gt_boxes = (0..m).map(|_| rand_box(rng)).collect();
        let gts = GroundTruthSet::new(labels, gt_boxes).unwrap();
        let logits =
            Matrix::from_vec(n, k, (0..n * k).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let boxes = (0..n).map(|_| rand_box(rng)).collect();
        let preds = PredictionSet::new(logits, boxes).unwrap();
        (gts, preds)
    }

    #[test]
    fn nll_uniform_logits_is_ln_k() {
        let c = classification_cost(&[0.0; 4], 2, ClassificationMode::Nll).unwrap();
        assert!((c - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_is_bounded_by_clamp() {
        // true-class probability driven to ~0: cost saturates at −ln(1e-8)
        let c = classification_cost(&[-100.0, 100.0], 0, ClassificationMode::Nll).unwrap();
        assert!(c <= -(PROB_CLAMP.ln()) + 1e-9);
        assert!(c.is_finite());
    }

    #[test]
    fn focal_matches_hand_formula_at_half() {
        let p: f64 = 0.5; // logit 0 → sigmoid 0.5
        let expect = 0.25 * (1.0 - p).powi(2) * (-p.ln()) - 0.75 * p.powi(2) * (-(1.0 - p).ln());
        let c = classification_cost(&[0.0, 3.0], 0, ClassificationMode::Focal).unwrap();
        assert!((c - expect).abs() < 1e-12);
    }

    #[test]
    fn class_id_out_of_range() {
        assert!(classification_cost(&[0.0, 0.0], 2, ClassificationMode::Nll).is_err());
    }

    #[test]
    fn weights_combine_paper_defaults() {
        let w = CostWeights::default();
        assert_eq!(w.lambda_cls, 2.0);
        assert_eq!(w.lambda_l1, 5.0);
        assert_eq!(w.lambda_iou, 2.0);
        assert!((w.combine(1.0, 0.1, 0.5) - 3.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_costs_almost_nothing() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let gts = GroundTruthSet::new(vec![1], vec![b]).unwrap();
        let logits = Matrix::from_rows(&[vec![-30.0, 30.0, -30.0]]).unwrap();
        let preds = PredictionSet::new(logits, vec![b]).unwrap();
        let c = broadcast_cost(&gts, &preds, &CostWeights::default()).unwrap();
        // box terms vanish exactly; classification cost is the clamped ~0
        assert!(c.values.get(0, 0) < 2.0 * 1e-7);
    }

    #[test]
    fn empty_gt_set_gives_zero_row_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, preds) = rand_sets(&mut rng, 3, 4, 3);
        let c = broadcast_cost(&GroundTruthSet::empty(), &preds, &CostWeights::default()).unwrap();
        assert_eq!(c.values.shape(), (0, 4));
    }

    #[test]
    fn matrix_matches_per_pair_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (gts, preds) = rand_sets(&mut rng, 4, 6, 3);
        let w = CostWeights::default();
        let c = broadcast_cost_detailed(&gts, &preds, &w).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let cls = classification_cost(
                    preds.logits().row(j),
                    gts.labels()[i],
                    ClassificationMode::Nll,
                )
                .unwrap();
                let l1 = l1_cost(&preds.boxes()[j], &gts.boxes()[i]);
                let gl = giou_loss(&preds.boxes()[j], &gts.boxes()[i]);
                assert!((c.values.get(i, j) - w.combine(cls, l1, gl)).abs() < 1e-12);
                let comp = c.components.as_ref().unwrap();
                let recomposed =
                    w.combine(comp.cls.get(i, j), comp.l1.get(i, j), comp.giou.get(i, j));
                assert!((c.values.get(i, j) - recomposed).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cost_entries_stay_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = CostWeights::default();
        let bound = w.lambda_cls * -(PROB_CLAMP.ln()) + w.lambda_l1 * 4.0 + w.lambda_iou * 2.0;
        for _ in 0..20 {
            let (gts, preds) = rand_sets(&mut rng, 3, 5, 4);
            let c = broadcast_cost(&gts, &preds, &w).unwrap();
            assert!(c.values.is_finite());
            for &v in c.values.data() {
                assert!(v.abs() <= bound);
            }
        }
    }

    #[test]
    fn gt_permutation_permutes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (gts, preds) = rand_sets(&mut rng, 4, 5, 3);
        let w = CostWeights::default();
        let c = broadcast_cost(&gts, &preds, &w).unwrap();
        let perm = [2usize, 0, 3, 1];
        let gts_p = GroundTruthSet::new(
            perm.iter().map(|&i| gts.labels()[i]).collect(),
            perm.iter().map(|&i| gts.boxes()[i]).collect(),
        )
        .unwrap();
        let c_p = broadcast_cost(&gts_p, &preds, &w).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            assert_eq!(c_p.values.row(r), c.values.row(src));
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (gts, preds) = rand_sets(&mut rng, 2, 3, 3);
        let d = Matrix::zeros(2, 3);
        let g = broadcast_cost_backward(
            &gts,
            &preds,
            &CostWeights::default(),
            ClassificationMode::Nll,
            &d,
        )
        .unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn backward_has_column_structure() {
        // gradient for box j only collects from column j of dC
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (gts, preds) = rand_sets(&mut rng, 3, 4, 3);
        let mut d = Matrix::zeros(3, 4);
        for i in 0..3 {
            d.set(i, 1, 1.0);
        }
        let g = broadcast_cost_backward(
            &gts,
            &preds,
            &CostWeights::default(),
            ClassificationMode::Nll,
            &d,
        )
        .unwrap();
        for j in [0usize, 2, 3] {
            assert!(g.boxes.row(j).iter().all(|v| *v == 0.0));
            assert!(g.logits.row(j).iter().all(|v| *v == 0.0));
        }
        assert!(g.boxes.row(1).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let h = 1e-6;
        for mode in [ClassificationMode::Nll, ClassificationMode::Focal] {
            for seed in 0..5u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (gts, preds) = rand_sets(&mut rng, 3, 4, 3);
                let w = CostWeights::default();
                let d_cost =
                    Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .unwrap();
                let analytic = broadcast_cost_backward(&gts, &preds, &w, mode, &d_cost).unwrap();

                let loss = |p: &PredictionSet| -> f64 {
                    broadcast_cost_mode(&gts, p, &w, mode)
                        .unwrap()
                        .values
                        .hadamard_sum(&d_cost)
                        .unwrap()
                };

                let mut max_err: f64 = 0.0;
                for j in 0..4 {
                    for k in 0..3 {
                        let mut lp = preds.logits().clone();
                        lp.set(j, k, lp.get(j, k) + h);
                        let pp = PredictionSet::new(lp, preds.boxes().to_vec()).unwrap();
                        let mut lm = preds.logits().clone();
                        lm.set(j, k, lm.get(j, k) - h);
                        let pm = PredictionSet::new(lm, preds.boxes().to_vec()).unwrap();
                        let num = (loss(&pp) - loss(&pm)) / (2.0 * h);
                        max_err = max_err.max(rel_error(analytic.logits.get(j, k), num));
                    }
                    for f in 0..4 {
                        let perturb = |delta: f64| {
                            let mut bs = preds.boxes().to_vec();
                            let mut arr = bs[j].as_array();
                            arr[f] += delta;
                            bs[j] = BBox::new(arr[0], arr[1], arr[2], arr[3]).unwrap();
                            PredictionSet::new(preds.logits().clone(), bs).unwrap()
                        };
                        let num = (loss(&perturb(h)) - loss(&perturb(-h))) / (2.0 * h);
                        max_err = max_err.max(rel_error(analytic.boxes.get(j, f), num));
                    }
                }
                assert!(max_err <= 1e-4, "mode {:?} seed {} err {}", mode, seed, max_err);
            }
        }
    }
}

//! Loss assembly: `L_w`, `L_q`, and `L_total` with dual-path gradient
//! routing.
//!
//! `L_w = Σ A ⊗ C` supervises the probe: minimizing it concentrates
//! attention weight on low-cost pairs. `L_q = Σ Â ⊗ C` gates the cost by the
//! sparse topology and supervises the predictions. By default the two paths
//! are separated: inside `L_w` the cost matrix is treated as a constant
//! (no gradient to the predictions), and inside `L_q` the topology is
//! treated as a constant (no gradient to the probe). Flags open either path
//! for the fully coupled variant.

use serde::{Deserialize, Serialize};

use crate::cost::{
    broadcast_cost_backward, broadcast_cost_mode, ClassificationMode, CostMatrix, CostWeights,
    GroundTruthSet, PredGrads, PredictionSet,
};
use crate::error::{Error, Result};
use crate::gtprobe::{CorrMatrix, GtProbeParams, GtProbeTape};
use crate::scg::{pipeline_backward, sparse_pipeline, ScgConfig, ScgOutput, SparseCorr};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the correspondence loss `L_w`.
    pub alpha: f64,
    /// Weight of the sparse query loss `L_q`.
    pub beta: f64,
    /// Treat `C` as constant inside `L_w` (no `L_w` gradient to predictions).
    pub detach_cost_in_lw: bool,
    /// Treat `Â` as constant inside `L_q` (no `L_q` gradient to the probe).
    pub detach_corr_in_lq: bool,
    /// Block the probe's encoder-input gradient from reaching the
    /// predictions (the probe supervises itself only).
    pub detach_preds_in_probe: bool,
    /// Divide both losses by M instead of using the raw sums.
    pub per_gt_mean: bool,
    pub weights: CostWeights,
    pub classification: ClassificationMode,
    pub scg: ScgConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            detach_cost_in_lw: true,
            detach_corr_in_lq: true,
            detach_preds_in_probe: true,
            per_gt_mean: false,
            weights: CostWeights::default(),
            classification: ClassificationMode::Nll,
            scg: ScgConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::validation("alpha and beta must be non-negative"));
        }
        self.weights.validate()?;
        self.scg.validate()
    }
}

/// Per-ground-truth diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtContribution {
    pub lw: f64,
    pub lq: f64,
    pub surviving_queries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub l_w: f64,
    pub l_q: f64,
    pub l_total: f64,
    pub per_gt: Vec<GtContribution>,
}

/// `Σ_ij A[i][j] · C[i][j]`. Zero for an empty ground-truth set.
pub fn loss_w(a: &CorrMatrix, c: &CostMatrix) -> Result<f64> {
    a.values.hadamard_sum(&c.values)
}

/// `Σ_ij Â[i][j] · C[i][j]`.
pub fn loss_q(a_hat: &SparseCorr, c: &CostMatrix) -> Result<f64> {
    a_hat.values.hadamard_sum(&c.values)
}

/// Forward + backward result of one loss evaluation.
pub struct LossOutput {
    pub report: LossReport,
    /// Gradients on the prediction logits and boxes.
    pub pred_grads: PredGrads,
    /// The cost matrix the losses gated.
    pub cost: CostMatrix,
    /// Dense correspondence matrix A.
    pub corr: CorrMatrix,
    /// Sparse pipeline output (Â plus intermediates).
    pub scg: ScgOutput,
}

/// Compute `C`, `A`, `Â`, the losses, and all gradients. Probe parameter
/// gradients accumulate into `tape`.
pub fn total_loss_forward_backward(
    gts: &GroundTruthSet,
    preds: &PredictionSet,
    probe: &GtProbeParams,
    cfg: &LossConfig,
    tape: &mut GtProbeTape,
) -> Result<LossOutput> {
    let cost = broadcast_cost_mode(gts, preds, &cfg.weights, cfg.classification)?;
    forward_backward_with_cost(gts, preds, probe, cfg, cost, tape)
}

/// Same as [`total_loss_forward_backward`] but gating a precomputed cost
/// matrix; the benchmark uses this to keep `C` construction out of the timed
/// region.
pub fn forward_backward_with_cost(
    gts: &GroundTruthSet,
    preds: &PredictionSet,
    probe: &GtProbeParams,
    cfg: &LossConfig,
    cost: CostMatrix,
    tape: &mut GtProbeTape,
) -> Result<LossOutput> {
    cfg.validate()?;
    let m = gts.len();
    let fwd = probe.forward(gts, preds)?;
    let scg_out = sparse_pipeline(&fwd.a.values, &cfg.scg)?;

    let scale = if cfg.per_gt_mean && m > 0 { 1.0 / m as f64 } else { 1.0 };
    let l_w = loss_w(&fwd.a, &cost)? * scale;
    let l_q = loss_q(&scg_out.sparse, &cost)? * scale;
    let l_total = cfg.alpha * l_w + cfg.beta * l_q;
    if !l_total.is_finite() {
        return Err(Error::Eval(format!("non-finite loss: l_w={l_w} l_q={l_q}")));
    }

    let per_gt = (0..m)
        .map(|i| GtContribution {
            lw: fwd.a.values.row(i).iter().zip(cost.values.row(i)).map(|(a, c)| a * c).sum::<f64>()
                * scale,
            lq: scg_out
                .sparse
                .values
                .row(i)
                .iter()
                .zip(cost.values.row(i))
                .map(|(a, c)| a * c)
                .sum::<f64>()
                * scale,
            surviving_queries: scg_out.sparse.row_support(i),
        })
        .collect();

    // --- backward ---

    // Gradient reaching A: always the L_w path; optionally the L_q path
    // through the sparse topology.
    let mut d_a = cost.values.scaled(cfg.alpha * scale);
    if !cfg.detach_corr_in_lq {
        let d_hat = cost.values.scaled(cfg.beta * scale);
        let through_scg = pipeline_backward(&scg_out, &cfg.scg, &d_hat)?;
        d_a.add_scaled(&through_scg, 1.0)?;
    }
    let probe_pred_grads =
        probe.backward(&fwd, &d_a, tape, !cfg.detach_preds_in_probe)?;

    // Gradient reaching C: always the L_q path; optionally the L_w path.
    let mut d_cost = scg_out.sparse.values.scaled(cfg.beta * scale);
    if !cfg.detach_cost_in_lw {
        d_cost.add_scaled(&fwd.a.values, cfg.alpha * scale)?;
    }
    let mut pred_grads =
        broadcast_cost_backward(gts, preds, &cfg.weights, cfg.classification, &d_cost)?;
    if let Some(extra) = probe_pred_grads {
        pred_grads.add(&extra)?;
    }

    Ok(LossOutput {
        report: LossReport { l_w, l_q, l_total, per_gt },
        pred_grads,
        cost,
        corr: fwd.a,
        scg: scg_out,
    })
}

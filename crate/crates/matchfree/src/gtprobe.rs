//! GT-Probe module: ground truths probe the query bank via cross-attention.
//!
//! Ground truths and predictions are embedded by two independent MLPs,
//! projected to queries and keys, and combined by scaled dot-product softmax
//! into the dense correspondence matrix `A` (M×N, row-stochastic): entry
//! `A[i][j]` is the soft confidence of assigning query `j` to ground truth
//! `i`. The full backward pass is hand-derived and validated against finite
//! differences.
//!
//! A value projection `W_V` is allocated and can be applied (`compute_v`),
//! but the attended output is not consumed by any loss; only `A` is.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cost::{GroundTruthSet, PredGrads, PredictionSet};
use crate::error::{Error, Result};
use crate::numkernel::{matmul, softmax_rows, Matrix, Mlp, MlpCache, MlpGrads};

/// Dense correspondence matrix. Rows are softmax outputs: non-negative,
/// entries in [0, 1], each row summing to 1.
#[derive(Debug, Clone)]
pub struct CorrMatrix {
    pub values: Matrix,
}

impl CorrMatrix {
    /// Largest deviation of any row sum from 1 (0 for an empty matrix).
    pub fn row_sum_deviation(&self) -> f64 {
        (0..self.values.rows())
            .map(|i| (self.values.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Column index of the maximum entry of each row.
    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.values.rows())
            .map(|i| {
                let row = self.values.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Structural configuration of the probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Shared hidden dimension D of both MLPs and the projections.
    pub hidden_dim: usize,
    /// Number of MLP layers (1 = a single linear map).
    pub mlp_depth: usize,
    /// Attention heads. 1 reproduces the single-softmax formulation; more
    /// heads average their attention maps, which keeps rows stochastic.
    pub num_heads: usize,
    /// Feed softmaxed probabilities instead of raw logits into the query
    /// encoder.
    pub softmax_pred_inputs: bool,
    /// Apply the value projection and materialize `A·V` (audit only).
    pub compute_v: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden_dim: 64,
            mlp_depth: 2,
            num_heads: 1,
            softmax_pred_inputs: false,
            compute_v: false,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.mlp_depth == 0 || self.num_heads == 0 {
            return Err(Error::validation("probe dims, depth, and heads must be positive"));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::validation(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Learnable parameters: the two encoder MLPs and the Q/K/V projections.
#[derive(Debug, Clone)]
pub struct GtProbeParams {
    pub mlp_gt: Mlp,
    pub mlp_q: Mlp,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    num_classes: usize,
    cfg: ProbeConfig,
}

/// Gradient buffers mirroring [`GtProbeParams`].
#[derive(Debug, Clone)]
pub struct GtProbeTape {
    pub mlp_gt: MlpGrads,
    pub mlp_q: MlpGrads,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl GtProbeTape {
    pub fn zeros_like(p: &GtProbeParams) -> Self {
        let d = p.cfg.hidden_dim;
        GtProbeTape {
            mlp_gt: MlpGrads::zeros_like(&p.mlp_gt),
            mlp_q: MlpGrads::zeros_like(&p.mlp_q),
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
        }
    }

    pub fn zero(&mut self) {
        self.mlp_gt.zero();
        self.mlp_q.zero();
        self.w_q.fill(0.0);
        self.w_k.fill(0.0);
        self.w_v.fill(0.0);
    }

    /// Gradient views in the same order as [`GtProbeParams::params_mut`].
    pub fn views(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        out.extend(self.mlp_gt.views());
        out.extend(self.mlp_q.views());
        out.push(&self.w_q);
        out.push(&self.w_k);
        out.push(&self.w_v);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.views().iter().fold(0.0, |acc, m| acc.max(m.max_abs()))
    }
}

/// Everything the backward pass needs from a forward run.
pub struct ProbeCache {
    pred_inputs: Matrix,
    mlp_gt_cache: MlpCache,
    mlp_q_cache: MlpCache,
    e_gt: Matrix,
    e_q: Matrix,
    q: Matrix,
    k: Matrix,
    /// Per-head softmax outputs.
    a_heads: Vec<Matrix>,
    /// Softmaxed prediction logits, kept when `softmax_pred_inputs` is on.
    pred_probs: Option<Matrix>,
}

/// Forward result: the dense correspondence matrix plus its cache.
pub struct ProbeForward {
    pub a: CorrMatrix,
    /// `A·V`, only when `compute_v` is set.
    pub attended: Option<Matrix>,
    pub cache: ProbeCache,
}

impl GtProbeParams {
    pub fn new(cfg: &ProbeConfig, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::validation("probe needs at least one class"));
        }
        let d = cfg.hidden_dim;
        let in_dim = num_classes + 4;
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(d).take(cfg.mlp_depth));
        let mlp_gt = Mlp::new(&dims, rng)?;
        let mlp_q = Mlp::new(&dims, rng)?;
        let s = (6.0 / (2 * d) as f64).sqrt();
        let mut proj = || {
            let data = (0..d * d).map(|_| rng.gen_range(-s..s)).collect();
            Matrix::from_vec(d, d, data).unwrap()
        };
        let w_q = proj();
        let w_k = proj();
        let w_v = proj();
        Ok(GtProbeParams { mlp_gt, mlp_q, w_q, w_k, w_v, num_classes, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    /// Encode ground truths (one-hot label ++ box) and predictions
    /// (logits ++ box) into the shared D-dimensional space.
    pub fn encode(&self, gts: &GroundTruthSet, preds: &PredictionSet) -> Result<EncodeOut> {
        if preds.num_classes() != self.num_classes {
            return Err(Error::validation(format!(
                "probe built for {} classes, predictions have {}",
                self.num_classes,
                preds.num_classes()
            )));
        }
        if let Some(max) = gts.max_label() {
            if max >= self.num_classes {
                return Err(Error::validation(format!(
                    "ground-truth label {} out of range for {} classes",
                    max, self.num_classes
                )));
            }
        }
        let k = self.num_classes;
        let m = gts.len();
        let n = preds.len();

        let mut gt_inputs = Matrix::zeros(m, k + 4);
        for i in 0..m {
            let row = gt_inputs.row_mut(i);
            row[gts.labels()[i]] = 1.0;
            row[k..k + 4].copy_from_slice(&gts.boxes()[i].as_array());
        }

        let pred_probs = self.cfg.softmax_pred_inputs.then(|| softmax_rows(preds.logits()));
        let pred_probs = match pred_probs {
            Some(r) => Some(r?),
            None => None,
        };
        let class_part = pred_probs.as_ref().unwrap_or_else(|| preds.logits());
        let mut pred_inputs = Matrix::zeros(n, k + 4);
        for j in 0..n {
            let row = pred_inputs.row_mut(j);
            row[..k].copy_from_slice(class_part.row(j));
            row[k..k + 4].copy_from_slice(&preds.boxes()[j].as_array());
        }

        let (e_gt, mlp_gt_cache) = self.mlp_gt.forward(&gt_inputs)?;
        let (e_q, mlp_q_cache) = self.mlp_q.forward(&pred_inputs)?;
        Ok(EncodeOut { gt_inputs, pred_inputs, mlp_gt_cache, mlp_q_cache, e_gt, e_q, pred_probs })
    }

    /// Scaled dot-product attention over precomputed embeddings. Softmax runs
    /// over the query axis, one row per ground truth. `N = 0` is rejected
    /// (softmax over an empty axis is undefined); `M = 0` yields a 0×N map.
    pub fn attention(&self, e_gt: &Matrix, e_q: &Matrix) -> Result<(Matrix, Matrix, Matrix, Vec<Matrix>)> {
        if e_q.rows() == 0 {
            return Err(Error::validation("attention needs at least one query"));
        }
        let d = self.cfg.hidden_dim;
        if e_gt.cols() != d || e_q.cols() != d {
            return Err(Error::shape(format!(
                "embeddings have widths {} and {}, expected {}",
                e_gt.cols(),
                e_q.cols(),
                d
            )));
        }
        let q = matmul(e_gt, &self.w_q)?;
        let k = matmul(e_q, &self.w_k)?;
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut a_heads = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = slice_cols(&q, hd * dh, dh);
            let kh = slice_cols(&k, hd * dh, dh);
            let logits = matmul(&qh, &kh.transpose())?.scaled(scale);
            a_heads.push(softmax_rows(&logits)?);
        }
        Ok((q, k, mean_heads(&a_heads), a_heads))
    }

    /// Full forward pass: encode, project, attend.
    pub fn forward(&self, gts: &GroundTruthSet, preds: &PredictionSet) -> Result<ProbeForward> {
        let enc = self.encode(gts, preds)?;
        let (q, k, a, a_heads) = self.attention(&enc.e_gt, &enc.e_q)?;
        let attended = if self.cfg.compute_v {
            let v = matmul(&enc.e_q, &self.w_v)?;
            Some(matmul(&a, &v)?)
        } else {
            None
        };
        Ok(ProbeForward {
            a: CorrMatrix { values: a },
            attended,
            cache: ProbeCache {
                pred_inputs: enc.pred_inputs,
                mlp_gt_cache: enc.mlp_gt_cache,
                mlp_q_cache: enc.mlp_q_cache,
                e_gt: enc.e_gt,
                e_q: enc.e_q,
                q,
                k,
                a_heads,
                pred_probs: enc.pred_probs,
            },
        })
    }

    /// Backward pass from `dLoss/dA`. Accumulates all parameter gradients
    /// into `tape`; when `want_pred_grads` is set, also returns the gradient
    /// flowing back into the prediction logits and boxes through the query
    /// encoder's input.
    pub fn backward(
        &self,
        fwd: &ProbeForward,
        d_a: &Matrix,
        tape: &mut GtProbeTape,
        want_pred_grads: bool,
    ) -> Result<Option<PredGrads>> {
        let cache = &fwd.cache;
        if !d_a.same_shape(&fwd.a.values) {
            return Err(Error::shape(format!(
                "dA is {:?}, A is {:?}",
                d_a.shape(),
                fwd.a.values.shape()
            )));
        }
        let d = self.cfg.hidden_dim;
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let head_weight = 1.0 / heads as f64;

        let mut d_q = Matrix::zeros(cache.q.rows(), d);
        let mut d_k = Matrix::zeros(cache.k.rows(), d);
        for hd in 0..heads {
            // softmax Jacobian per row: dz_j = a_j (du_j − Σ_k du_k a_k)
            let a_h = &cache.a_heads[hd];
            let mut d_logits = Matrix::zeros(a_h.rows(), a_h.cols());
            for i in 0..a_h.rows() {
                let arow = a_h.row(i);
                let urow = d_a.row(i);
                let dot: f64 = arow.iter().zip(urow).map(|(a, u)| a * u * head_weight).sum();
                let drow = d_logits.row_mut(i);
                for j in 0..arow.len() {
                    drow[j] = arow[j] * (urow[j] * head_weight - dot);
                }
            }
            let qh = slice_cols(&cache.q, hd * dh, dh);
            let kh = slice_cols(&cache.k, hd * dh, dh);
            let d_qh = matmul(&d_logits, &kh)?.scaled(scale);
            let d_kh = matmul(&d_logits.transpose(), &qh)?.scaled(scale);
            write_cols(&mut d_q, hd * dh, &d_qh);
            write_cols(&mut d_k, hd * dh, &d_kh);
        }

        tape.w_q.add_scaled(&matmul(&cache.e_gt.transpose(), &d_q)?, 1.0)?;
        tape.w_k.add_scaled(&matmul(&cache.e_q.transpose(), &d_k)?, 1.0)?;
        let d_e_gt = matmul(&d_q, &self.w_q.transpose())?;
        let d_e_q = matmul(&d_k, &self.w_k.transpose())?;

        self.mlp_gt.backward(&cache.mlp_gt_cache, &d_e_gt, &mut tape.mlp_gt)?;
        let d_pred_inputs = self.mlp_q.backward(&cache.mlp_q_cache, &d_e_q, &mut tape.mlp_q)?;

        if !want_pred_grads {
            return Ok(None);
        }
        let k_cls = self.num_classes;
        let n = cache.pred_inputs.rows();
        let mut grads = PredGrads::zeros(n, k_cls);
        for j in 0..n {
            let din = d_pred_inputs.row(j);
            match &cache.pred_probs {
                None => {
                    grads.logits.row_mut(j).copy_from_slice(&din[..k_cls]);
                }
                Some(probs) => {
                    // chain through the input softmax
                    let p = probs.row(j);
                    let dot: f64 = p.iter().zip(&din[..k_cls]).map(|(a, u)| a * u).sum();
                    let out = grads.logits.row_mut(j);
                    for c in 0..k_cls {
                        out[c] = p[c] * (din[c] - dot);
                    }
                }
            }
            grads.boxes.row_mut(j).copy_from_slice(&din[k_cls..k_cls + 4]);
        }
        Ok(Some(grads))
    }

    /// Parameter views in a stable order (matching [`GtProbeTape::views`]).
    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (name, m) in self.mlp_gt.params_mut() {
            out.push((format!("mlp_gt.{name}"), m));
        }
        for (name, m) in self.mlp_q.params_mut() {
            out.push((format!("mlp_q.{name}"), m));
        }
        out.push(("w_q".to_string(), &mut self.w_q));
        out.push(("w_k".to_string(), &mut self.w_k));
        out.push(("w_v".to_string(), &mut self.w_v));
        out
    }

    /// Export as named arrays under the given prefix.
    pub fn export_arrays(&self, prefix: &str, ck: &mut Checkpoint) {
        let mut me = self.clone();
        for (name, m) in me.params_mut() {
            ck.insert(format!("{prefix}{name}"), m.clone());
        }
    }

    /// Load parameters from named arrays written by [`export_arrays`].
    pub fn import_arrays(&mut self, prefix: &str, ck: &Checkpoint) -> Result<()> {
        for (name, m) in self.params_mut() {
            let stored = ck.get(&format!("{prefix}{name}"))?;
            if stored.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "checkpoint array {prefix}{name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    m.shape()
                )));
            }
            *m = stored.clone();
        }
        Ok(())
    }
}

pub struct EncodeOut {
    pub gt_inputs: Matrix,
    pub pred_inputs: Matrix,
    pub mlp_gt_cache: MlpCache,
    pub mlp_q_cache: MlpCache,
    pub e_gt: Matrix,
    pub e_q: Matrix,
    pub pred_probs: Option<Matrix>,
}

fn slice_cols(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&m.row(i)[start..start + width]);
    }
    out
}

fn write_cols(dst: &mut Matrix, start: usize, src: &Matrix) {
    for i in 0..src.rows() {
        dst.row_mut(i)[start..start + src.cols()].copy_from_slice(src.row(i));
    }
}

fn mean_heads(heads: &[Matrix]) -> Matrix {
    let mut out = heads[0].clone();
    for h in &heads[1..] {
        out.add_scaled(h, 1.0).unwrap();
    }
    out.scaled(1.0 / heads.len() as f64)
}

//! Minimal learnable prediction head.
//!
//! Each of the N queries owns a learned embedding; a shared MLP maps the
//! embedding to K class logits and 4 raw box parameters, which are squashed
//! through a sigmoid into (0, 1) center-format coordinates. There is no
//! scene conditioning: the queries themselves learn to cover the prototype
//! distribution.

use rand::Rng;

use super::ToyConfig;
use crate::checkpoint::Checkpoint;
use crate::cost::{PredGrads, PredictionSet};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numkernel::{Matrix, Mlp, MlpCache, MlpGrads};

#[derive(Debug, Clone)]
pub struct ToyModel {
    /// N × query_dim learned embeddings.
    pub query_embed: Matrix,
    /// query_dim → head_hidden → (K + 4)
    pub head: Mlp,
    num_classes: usize,
}

pub struct ToyCache {
    head_cache: MlpCache,
    /// Raw head output, N × (K + 4).
    raw: Matrix,
}

#[derive(Debug, Clone)]
pub struct ToyGrads {
    pub query_embed: Matrix,
    pub head: MlpGrads,
}

impl ToyGrads {
    pub fn zeros_like(model: &ToyModel) -> Self {
        ToyGrads {
            query_embed: Matrix::zeros(model.query_embed.rows(), model.query_embed.cols()),
            head: MlpGrads::zeros_like(&model.head),
        }
    }

    pub fn zero(&mut self) {
        self.query_embed.fill(0.0);
        self.head.zero();
    }

    pub fn views(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.query_embed];
        out.extend(self.head.views());
        out
    }
}

impl ToyModel {
    pub fn new(cfg: &ToyConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let embed_data =
            (0..cfg.num_queries * cfg.query_dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let query_embed = Matrix::from_vec(cfg.num_queries, cfg.query_dim, embed_data)?;
        let head = Mlp::new(&[cfg.query_dim, cfg.head_hidden, cfg.num_classes + 4], rng)?;
        Ok(ToyModel { query_embed, head, num_classes: cfg.num_classes })
    }

    pub fn num_queries(&self) -> usize {
        self.query_embed.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Predictions for the (scene-independent) query bank.
    pub fn forward(&self) -> Result<(PredictionSet, ToyCache)> {
        let (raw, head_cache) = self.head.forward(&self.query_embed)?;
        let k = self.num_classes;
        let n = raw.rows();
        let mut logits = Matrix::zeros(n, k);
        let mut boxes = Vec::with_capacity(n);
        for j in 0..n {
            let row = raw.row(j);
            logits.row_mut(j).copy_from_slice(&row[..k]);
            boxes.push(BBox::new(
                sigmoid(row[k]),
                sigmoid(row[k + 1]),
                sigmoid(row[k + 2]),
                sigmoid(row[k + 3]),
            )?);
        }
        Ok((PredictionSet::new(logits, boxes)?, ToyCache { head_cache, raw }))
    }

    /// Backward from prediction-space gradients into the embeddings and the
    /// head parameters.
    pub fn backward(
        &self,
        cache: &ToyCache,
        pred_grads: &PredGrads,
        grads: &mut ToyGrads,
    ) -> Result<()> {
        let k = self.num_classes;
        let n = cache.raw.rows();
        if pred_grads.logits.rows() != n || pred_grads.boxes.rows() != n {
            return Err(Error::shape(format!(
                "pred grads for {} queries, model has {}",
                pred_grads.logits.rows(),
                n
            )));
        }
        let mut d_raw = Matrix::zeros(n, k + 4);
        for j in 0..n {
            let out = d_raw.row_mut(j);
            out[..k].copy_from_slice(pred_grads.logits.row(j));
            for f in 0..4 {
                let s = sigmoid(cache.raw.get(j, k + f));
                out[k + f] = pred_grads.boxes.get(j, f) * s * (1.0 - s);
            }
        }
        let d_embed = self.head.backward(&cache.head_cache, &d_raw, &mut grads.head)?;
        grads.query_embed.add_scaled(&d_embed, 1.0)
    }

    /// Parameter views in a stable order (matching [`ToyGrads::views`]).
    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![("query_embed".to_string(), &mut self.query_embed)];
        for (name, m) in self.head.params_mut() {
            out.push((format!("head.{name}"), m));
        }
        out
    }

    pub fn export_arrays(&self, prefix: &str, ck: &mut Checkpoint) {
        let mut me = self.clone();
        for (name, m) in me.params_mut() {
            ck.insert(format!("{prefix}{name}"), m.clone());
        }
    }

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

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

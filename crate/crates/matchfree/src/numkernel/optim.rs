//! Adam optimizer over flat lists of parameter matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::matrix::Matrix;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second-moment buffers plus the step counter. Buffer shapes mirror
/// the parameter list they were built for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn for_params(params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> =
            params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One Adam update. `params` and `grads` must be in the same order the state
/// was built for.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam_step: {} params, {} grads, state holds {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hyper.beta1.powf(t);
    let bc2 = 1.0 - hyper.beta2.powf(t);
    for ((p, g), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if !p.same_shape(g) || !p.same_shape(m) {
            return Err(Error::shape(format!(
                "adam_step: param {:?} vs grad {:?} vs state {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            let mi = hyper.beta1 * m.data()[i] + (1.0 - hyper.beta1) * gi;
            let vi = hyper.beta2 * v.data()[i] + (1.0 - hyper.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            if hyper.weight_decay != 0.0 {
                pd[i] -= hyper.lr * hyper.weight_decay * pd[i];
            }
            pd[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

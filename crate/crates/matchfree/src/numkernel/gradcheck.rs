//! Central finite-difference gradient checking.
//!
//! The checker perturbs every parameter entry by ±h, recomputes the scalar
//! loss, and compares `(f(θ+h) − f(θ−h)) / 2h` against the analytic gradient.
//! This is the crate's primary verification instrument: every backward pass
//! is validated through it.

use crate::error::{Error, Result};
use crate::numkernel::matrix::Matrix;

/// Error normalized by `max(1, |analytic|, |numeric|)`. The floor of 1 keeps
/// exactly-zero and saturated gradients (where the central difference
/// evaluates to a denormal or to 0) from registering as spurious failures,
/// while any real Jacobian bug still shows up orders of magnitude above the
/// pass thresholds used in the tests.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter name, flat entry index) of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Check `analytic` against central finite differences of `loss`.
///
/// `access` must return mutable views over the parameter matrices in the same
/// order as `analytic`; a plain `fn(&mut S) -> Vec<(String, &mut Matrix)>`
/// satisfies the bound. `h` is the perturbation step (1e-5 is the usual
/// choice for f64).
pub fn gradcheck<S, L, A>(
    state: &mut S,
    loss: L,
    access: A,
    analytic: &[Matrix],
    h: f64,
) -> Result<GradCheckReport>
where
    L: Fn(&S) -> Result<f64>,
    A: for<'a> Fn(&'a mut S) -> Vec<(String, &'a mut Matrix)>,
{
    if h <= 0.0 {
        return Err(Error::validation(format!("gradcheck step must be positive, got {h}")));
    }
    let names: Vec<String> = access(state).into_iter().map(|(n, _)| n).collect();
    if names.len() != analytic.len() {
        return Err(Error::shape(format!(
            "gradcheck: {} parameter matrices but {} analytic gradients",
            names.len(),
            analytic.len()
        )));
    }

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, entries_checked: 0 };
    for pi in 0..analytic.len() {
        let n_entries = analytic[pi].data().len();
        {
            let shapes = access(state);
            if shapes[pi].1.shape() != analytic[pi].shape() {
                return Err(Error::shape(format!(
                    "gradcheck: analytic gradient for {} has shape {:?}, parameter has {:?}",
                    shapes[pi].0,
                    analytic[pi].shape(),
                    shapes[pi].1.shape()
                )));
            }
        }
        for e in 0..n_entries {
            let orig = access(state)[pi].1.data()[e];

            access(state)[pi].1.data_mut()[e] = orig + h;
            let lp = loss(state)?;
            access(state)[pi].1.data_mut()[e] = orig - h;
            let lm = loss(state)?;
            access(state)[pi].1.data_mut()[e] = orig;

            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Eval(format!(
                    "non-finite loss while perturbing {} entry {}",
                    names[pi], e
                )));
            }
            let numeric = (lp - lm) / (2.0 * h);
            let err = rel_error(analytic[pi].data()[e], numeric);
            report.entries_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((names[pi].clone(), e));
            }
        }
    }
    Ok(report)
}

//! Central finite-difference gradient verification (64-bit).
//!
//! The checker only ever evaluates the forward function; it is independent
//! of the reverse-mode path it validates.

use crate::error::Result;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Compare analytic gradients of `f` against central finite differences for
/// every element of every input. Returns the maximum relative error, where
/// relative error uses an absolute floor of 1e-3 in the denominator so that
/// near-zero gradient pairs do not blow up the ratio.
pub fn finite_diff_max_rel_err<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[VarId]) -> Result<VarId>,
{
    // Analytic pass.
    let tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.var(t.clone(), true)).collect();
    let loss = f(&tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| tape.grad(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let ids: Vec<VarId> = perturbed.iter().map(|t| tape.var(t.clone(), false)).collect();
        let loss = f(&tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let mut max_rel = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus: Vec<Tensor<f64>> = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus: Vec<Tensor<f64>> = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

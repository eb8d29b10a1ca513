//! Central finite-difference checking of tape gradients.
//!
//! The numerical side only ever evaluates the forward function, so it is
//! independent of every backward rule it checks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per input tensor (see [`relative_error`]).
    pub errors: Vec<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|)` in the L2 norm; the absolute difference when
/// both gradients vanish (below `1e-10`).
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let diff = analytic.zip_map(numeric, |a, b| a - b).l2_norm();
    let scale = analytic.l2_norm().max(numeric.l2_norm());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Compare backward gradients of the scalar `f(inputs)` to central differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.var(x.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.var(x.clone())).collect();
        let out = f(&tape, &vars)?;
        tape.backward(out, &vars)?
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for k in 0..inputs[i].numel() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * eps);
        }
        numeric.push(g);
    }
    let errors = analytic.iter().zip(&numeric).map(|(a, n)| relative_error(a, n)).collect();
    Ok(GradCheckReport { errors, analytic, numeric })
}

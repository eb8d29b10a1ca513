use std::sync::Arc;

use crate::error::{arg_err, Result};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

fn softmax_rows<T: Real>(x: &Tensor<T>, log: bool) -> Tensor<T> {
    let n = *x.shape().last().expect("rank checked");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if log {
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        } else {
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = T::one() / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

impl<'t, T: Real> Var<'t, T> {
    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(arg_err("softmax", "scalar input"));
        }
        let n = *x.shape().last().unwrap();
        let y = Arc::new(softmax_rows(&x, false));
        let yc = Arc::clone(&y);
        Ok(self.tape().op_arc(y, &[*self], move |g, _| {
            let mut dx = Vec::with_capacity(g.numel());
            for (grow, yrow) in g.data().chunks(n).zip(yc.data().chunks(n)) {
                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                dx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
            }
            vec![Some(Tensor::from_parts(yc.shape().to_vec(), dx))]
        }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(arg_err("log_softmax", "scalar input"));
        }
        let n = *x.shape().last().unwrap();
        let y = Arc::new(softmax_rows(&x, true));
        let yc = Arc::clone(&y);
        Ok(self.tape().op_arc(y, &[*self], move |g, _| {
            let mut dx = Vec::with_capacity(g.numel());
            for (grow, yrow) in g.data().chunks(n).zip(yc.data().chunks(n)) {
                let total: T = grow.iter().copied().sum();
                dx.extend(grow.iter().zip(yrow).map(|(&gv, &lv)| gv - lv.exp() * total));
            }
            vec![Some(Tensor::from_parts(yc.shape().to_vec(), dx))]
        }))
    }
}

/// Plain softmax of a slice (no tape).
pub fn softmax_slice<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

use crate::error::{arg_err, Result};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Real> Var<'t, T> {
    /// Sum of all elements as a rank-0 scalar.
    pub fn sum_all(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().op(Tensor::scalar(x.sum()), &[*self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean_all(&self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum_all().mul_scalar(T::one() / T::from_usize(n).expect("count fits"))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(arg_err("sum_axis", format!("axis {axis} for rank {}", x.rank())));
        }
        let shape = x.shape().to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.tape().op(Tensor::from_parts(out_shape, out), &[*self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    dx[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let n = self.value().shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis)?.mul_scalar(T::one() / T::from_usize(n).expect("count fits")))
    }
}

//! Batch normalization without the affine part; callers apply gains and biases.

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Per-channel statistics of the batch a training-mode normalization saw.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Real> {
    pub mean: Tensor<T>,
    /// Unbiased variance (what running estimates track).
    pub var: Tensor<T>,
}

fn layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(op, format!("expected [B, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<'t, T: Real> Var<'t, T> {
    /// Normalize each channel with the statistics of the current batch.
    pub fn batch_norm_train(&self, eps: T) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let x = self.value();
        let (b, c, s) = layout("batch_norm_train", x.shape())?;
        let n = b * s;
        if n < 2 {
            return Err(shape_err("batch_norm_train", format!("need >1 value per channel, got {:?}", x.shape())));
        }
        let nf = T::from_usize(n).unwrap();
        let xd = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for bi in 0..b {
                sum += xd[(bi * c + ch) * s..(bi * c + ch + 1) * s].iter().copied().sum::<T>();
            }
            let mu = sum / nf;
            let mut sq = T::zero();
            for bi in 0..b {
                for &v in &xd[(bi * c + ch) * s..(bi * c + ch + 1) * s] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / nf;
        }
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
                for (o, &v) in out[r.clone()].iter_mut().zip(&xd[r]) {
                    *o = (v - mean[ch]) * inv[ch];
                }
            }
        }
        let stats = BatchStats {
            mean: Tensor::from_parts(vec![c], mean),
            var: Tensor::from_parts(vec![c], var.iter().map(|&v| v * nf / (nf - T::one())).collect()),
        };
        let xhat = Arc::new(Tensor::from_parts(x.shape().to_vec(), out));
        let xh = Arc::clone(&xhat);
        let y = self.tape().op_arc(xhat, &[*self], move |g, _| {
            let gd = g.data();
            let hd = xh.data();
            let mut dx = vec![T::zero(); gd.len()];
            for ch in 0..c {
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for bi in 0..b {
                    let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
                    for (&gv, &hv) in gd[r.clone()].iter().zip(&hd[r]) {
                        sg += gv;
                        sgx += gv * hv;
                    }
                }
                let k = inv[ch] / nf;
                for bi in 0..b {
                    let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
                    for ((d, &gv), &hv) in dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&hd[r]) {
                        *d = k * (nf * gv - sg - hv * sgx);
                    }
                }
            }
            vec![Some(Tensor::from_parts(xh.shape().to_vec(), dx))]
        });
        Ok((y, stats))
    }

    /// Normalize with fixed (running) statistics.
    pub fn batch_norm_eval(&self, mean: &Tensor<T>, var: &Tensor<T>, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, s) = layout("batch_norm_eval", x.shape())?;
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(shape_err("batch_norm_eval", format!("stats {:?}/{:?} for {c} channels", mean.shape(), var.shape())));
        }
        let inv: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = x.data().to_vec();
        for bi in 0..b {
            for ch in 0..c {
                for v in &mut out[(bi * c + ch) * s..(bi * c + ch + 1) * s] {
                    *v = (*v - mean.data()[ch]) * inv[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape().op(Tensor::from_parts(shape.clone(), out), &[*self], move |g, _| {
            let mut dx = g.data().to_vec();
            for bi in 0..b {
                for ch in 0..c {
                    for v in &mut dx[(bi * c + ch) * s..(bi * c + ch + 1) * s] {
                        *v *= inv[ch];
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn normalized_channels_have_zero_mean_unit_variance() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 1.3).sin() * 4.0 + 2.0).collect();
        let x = tape.var(Tensor::from_f64(&[2, 3, 2, 2], &data).unwrap());
        let (y, stats) = x.batch_norm_train(0.0).unwrap();
        let yv = y.value();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| (0..4).map(move |k| (b, k)))
                .map(|(b, k)| yv.data()[(b * 3 + ch) * 4 + k])
                .collect();
            let m = vals.iter().sum::<f64>() / 8.0;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-9);
        }
        assert_eq!(stats.mean.shape(), &[3]);
        let ev = x.batch_norm_eval(&stats.mean, &stats.var.map(|v| v * 7.0 / 8.0), 0.0).unwrap();
        for (a, b) in ev.value().data().iter().zip(yv.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

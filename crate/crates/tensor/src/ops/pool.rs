//! 2x2 pooling and nearest-neighbour upsampling on `[B, C, H, W]`.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

fn check4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(shape_err(op, format!("expected [B, C, H, W], got {shape:?}")));
    }
    Ok((shape[0] * shape[1], shape[2], shape[3]))
}

impl<'t, T: Real> Var<'t, T> {
    /// 2x2 average pooling with stride 2; odd trailing rows/cols are dropped.
    pub fn avg_pool2(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (planes, h, w) = check4("avg_pool2", x.shape())?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(shape_err("avg_pool2", format!("input {:?} too small", x.shape())));
        }
        let quarter = T::from_f64_lossy(0.25);
        let xd = x.data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        for pl in 0..planes {
            let base = pl * h * w;
            for i in 0..ho {
                let r0 = base + 2 * i * w;
                let r1 = r0 + w;
                for j in 0..wo {
                    let s = xd[r0 + 2 * j] + xd[r0 + 2 * j + 1] + xd[r1 + 2 * j] + xd[r1 + 2 * j + 1];
                    out.push(s * quarter);
                }
            }
        }
        let shape = x.shape().to_vec();
        let mut out_shape = shape.clone();
        out_shape[2] = ho;
        out_shape[3] = wo;
        Ok(self.tape().op(Tensor::from_parts(out_shape, out), &[*self], move |g, _| {
            let mut dx = vec![T::zero(); planes * h * w];
            let gd = g.data();
            for pl in 0..planes {
                for i in 0..ho {
                    for j in 0..wo {
                        let v = gd[(pl * ho + i) * wo + j] * quarter;
                        let r0 = pl * h * w + 2 * i * w + 2 * j;
                        dx[r0] = v;
                        dx[r0 + 1] = v;
                        dx[r0 + w] = v;
                        dx[r0 + w + 1] = v;
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }

    /// 2x2 max pooling with stride 2; ties go to the first element in row-major order.
    pub fn max_pool2(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (planes, h, w) = check4("max_pool2", x.shape())?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(shape_err("max_pool2", format!("input {:?} too small", x.shape())));
        }
        let xd = x.data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut arg = Vec::with_capacity(planes * ho * wo);
        for pl in 0..planes {
            for i in 0..ho {
                for j in 0..wo {
                    let r0 = pl * h * w + 2 * i * w + 2 * j;
                    let mut best = r0;
                    for cand in [r0 + 1, r0 + w, r0 + w + 1] {
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        let shape = x.shape().to_vec();
        let mut out_shape = shape.clone();
        out_shape[2] = ho;
        out_shape[3] = wo;
        Ok(self.tape().op(Tensor::from_parts(out_shape, out), &[*self], move |g, _| {
            let mut dx = vec![T::zero(); planes * h * w];
            for (&src, &gv) in arg.iter().zip(g.data()) {
                dx[src] += gv;
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }

    /// Nearest-neighbour upsampling by a factor of two in both spatial axes.
    pub fn upsample2(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (planes, h, w) = check4("upsample2", x.shape())?;
        let (ho, wo) = (2 * h, 2 * w);
        let xd = x.data();
        let mut out = vec![T::zero(); planes * ho * wo];
        for pl in 0..planes {
            for i in 0..ho {
                let src = &xd[pl * h * w + (i / 2) * w..pl * h * w + (i / 2 + 1) * w];
                let dst = &mut out[(pl * ho + i) * wo..(pl * ho + i + 1) * wo];
                for (j, v) in dst.iter_mut().enumerate() {
                    *v = src[j / 2];
                }
            }
        }
        let shape = x.shape().to_vec();
        let mut out_shape = shape.clone();
        out_shape[2] = ho;
        out_shape[3] = wo;
        Ok(self.tape().op(Tensor::from_parts(out_shape, out), &[*self], move |g, _| {
            let mut dx = vec![T::zero(); planes * h * w];
            let gd = g.data();
            for pl in 0..planes {
                for i in 0..ho {
                    for j in 0..wo {
                        dx[pl * h * w + (i / 2) * w + j / 2] += gd[(pl * ho + i) * wo + j];
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }
}

use crate::error::{shape_err, Result};
use crate::real::{gemm, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Batched `op(a) * op(b)` on `[B, r, c]` tensors.
fn bmm_kernel<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    if a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) {
        return Err(shape_err("bmm", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let batch = a.dim(0);
    let (m, ka) = if ta { (a.dim(2), a.dim(1)) } else { (a.dim(1), a.dim(2)) };
    let (kb, n) = if tb { (b.dim(2), b.dim(1)) } else { (b.dim(1), b.dim(2)) };
    if ka != kb {
        return Err(shape_err(
            "bmm",
            format!("inner dims {ka} vs {kb} ({:?}{} x {:?}{})", a.shape(), if ta { "^T" } else { "" }, b.shape(), if tb { "^T" } else { "" }),
        ));
    }
    let k = ka;
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            ta,
            tb,
            m,
            n,
            k,
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    Ok(Tensor::from_parts(vec![batch, m, n], out))
}

impl<'t, T: Real> Var<'t, T> {
    /// Batched matrix product of rank-3 inputs, optionally transposing either side.
    pub fn bmm(&self, other: &Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = bmm_kernel(&a, &b, ta, tb)?;
        Ok(self.tape().op(out, &[*self, *other], move |g, needs| {
            let ga = needs[0].then(|| {
                let r = match (ta, tb) {
                    (false, false) => bmm_kernel(g, &b, false, true),
                    (false, true) => bmm_kernel(g, &b, false, false),
                    (true, false) => bmm_kernel(&b, g, false, true),
                    (true, true) => bmm_kernel(&b, g, true, true),
                };
                r.expect("shapes checked in forward")
            });
            let gb = needs[1].then(|| {
                let r = match (ta, tb) {
                    (false, false) => bmm_kernel(&a, g, true, false),
                    (true, false) => bmm_kernel(&a, g, false, false),
                    (false, true) => bmm_kernel(g, &a, true, false),
                    (true, true) => bmm_kernel(g, &a, true, true),
                };
                r.expect("shapes checked in forward")
            });
            vec![ga, gb]
        }))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 {
            return Err(shape_err("matmul", format!("{a:?} x {b:?}")));
        }
        let r = self.reshape(&[1, a[0], a[1]])?.bmm(&other.reshape(&[1, b[0], b[1]])?, false, false)?;
        r.reshape(&[a[0], b[1]])
    }

    /// `x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let (x, w) = (self.shape(), weight.shape());
        if x.len() != 2 || w.len() != 2 || x[1] != w[1] {
            return Err(shape_err("linear", format!("input {x:?}, weight {w:?}")));
        }
        let y = self
            .reshape(&[1, x[0], x[1]])?
            .bmm(&weight.reshape(&[1, w[0], w[1]])?, false, true)?
            .reshape(&[x[0], w[0]])?;
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

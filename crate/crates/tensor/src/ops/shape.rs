//! Shape manipulation, concatenation and indexing ops.

use crate::error::{arg_err, shape_err, Result};
use crate::ops::reduce::split_axis;
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::{strides, Tensor};

fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.numel();
    let mut data = Vec::with_capacity(total);
    if total > 0 {
        let xd = x.data();
        let rank = out_shape.len();
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            data.push(xd[off]);
            for axis in (0..rank).rev() {
                idx[axis] += 1;
                off += src_strides[axis];
                if idx[axis] < out_shape[axis] {
                    break;
                }
                off -= src_strides[axis] * idx[axis];
                idx[axis] = 0;
            }
        }
    }
    Tensor::from_parts(out_shape, data)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.tape().op(out, &[*self], move |g, _| {
            vec![Some(g.reshape(&orig).expect("same element count"))]
        }))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(arg_err("permute", format!("{perm:?} for rank {}", x.rank())));
        }
        let out = permute_tensor(&x, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.tape().op(out, &[*self], move |g, _| vec![Some(permute_tensor(g, &inverse))]))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() || start + len > x.dim(axis) {
            return Err(arg_err("narrow", format!("axis {axis} [{start}, +{len}) of {:?}", x.shape())));
        }
        let shape = x.shape().to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        let xd = x.data();
        for o in 0..outer {
            data.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.tape().op(Tensor::from_parts(out_shape, data), &[*self], move |g, _| {
            let mut dx = vec![T::zero(); outer * n * inner];
            let gd = g.data();
            for o in 0..outer {
                dx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }

    /// Rows of a `[V, ...]` table selected by `ids` (embedding lookup).
    pub fn index_rows(&self, ids: &[usize]) -> Result<Var<'t, T>> {
        let table = self.value();
        if table.rank() == 0 {
            return Err(arg_err("index_rows", "table must have rank >= 1"));
        }
        let rows = table.dim(0);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(arg_err("index_rows", format!("id {bad} >= {rows} rows")));
        }
        let row = table.numel() / rows.max(1);
        let mut data = Vec::with_capacity(ids.len() * row);
        for &i in ids {
            data.extend_from_slice(&table.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = table.shape().to_vec();
        out_shape[0] = ids.len();
        let ids = ids.to_vec();
        let shape = table.shape().to_vec();
        Ok(self.tape().op(Tensor::from_parts(out_shape, data), &[*self], move |g, _| {
            let mut dt = Tensor::zeros(&shape);
            let gd = g.data();
            let dd = dt.data_mut();
            for (k, &i) in ids.iter().enumerate() {
                for (acc, &v) in dd[i * row..(i + 1) * row].iter_mut().zip(&gd[k * row..(k + 1) * row]) {
                    *acc += v;
                }
            }
            vec![Some(dt)]
        }))
    }

    /// For a `[N, V]` input, picks element `idx[n]` from each row, giving `[N]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || x.dim(0) != idx.len() {
            return Err(shape_err("gather_rows", format!("{:?} with {} indices", x.shape(), idx.len())));
        }
        let v = x.dim(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(arg_err("gather_rows", format!("index {bad} >= {v}")));
        }
        let data: Vec<T> = idx.iter().enumerate().map(|(n, &i)| x.data()[n * v + i]).collect();
        let idx = idx.to_vec();
        let shape = x.shape().to_vec();
        Ok(self.tape().op(Tensor::from_parts(vec![idx.len()], data), &[*self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            for (n, &i) in idx.iter().enumerate() {
                dx.data_mut()[n * v + i] = g.data()[n];
            }
            vec![Some(dx)]
        }))
    }
}

/// Concatenate along `axis`; all other dims must agree.
pub fn concat<'t, T: Real>(vars: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = vars.first().ok_or_else(|| arg_err("concat", "no inputs"))?;
    let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(arg_err("concat", format!("axis {axis} for rank {}", base.len())));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
        }
    }
    let sizes: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
    let total: usize = sizes.iter().sum();
    let (outer, _, inner) = split_axis(&base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &n) in values.iter().zip(&sizes) {
            data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.tape().op(Tensor::from_parts(out_shape, data), vars, move |g, needs| {
        let gd = g.data();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(sizes.len());
        for (k, &n) in sizes.iter().enumerate() {
            if needs[k] {
                let mut d = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    d.extend_from_slice(&gd[start..start + n * inner]);
                }
                grads.push(Some(Tensor::from_parts(shapes[k].clone(), d)));
            } else {
                grads.push(None);
            }
            offset += n;
        }
        grads
    }))
}

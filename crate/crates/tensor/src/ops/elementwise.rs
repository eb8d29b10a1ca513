//! Elementwise unary ops and broadcasting binary ops.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::{strides, Tensor};

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err("broadcast", format!("{a:?} vs {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < pad || shape[i - pad] == 1 { 0 } else { own[i - pad] })
        .collect()
}

/// Visit every output index together with the matching input offsets.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let last = out.len() - 1;
    let inner = out[last];
    let (ia_step, ib_step) = (sa[last], sb[last]);
    let mut idx = vec![0usize; out.len()];
    let mut o = 0;
    loop {
        let mut ia: usize = idx.iter().zip(sa).map(|(i, s)| i * s).sum();
        let mut ib: usize = idx.iter().zip(sb).map(|(i, s)| i * s).sum();
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // advance odometer over all but the last axis
        let mut axis = last;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

fn broadcast_binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = aligned_strides(a.shape(), &out);
    let sb = aligned_strides(b.shape(), &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_pair(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(out, data))
}

/// Sum `g` down to `shape`, undoing a broadcast.
pub(crate) fn reduce_to<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape().to_vec();
    let st = aligned_strides(shape, &out);
    let zeros = vec![0; out.len()];
    let mut acc = vec![T::zero(); shape.iter().product()];
    let gd = g.data();
    for_each_pair(&out, &st, &zeros, |o, it, _| acc[it] += gd[o]);
    Tensor::from_parts(shape.to_vec(), acc)
}

/// Expand `t` to `shape` by broadcasting.
#[allow(dead_code)]
pub(crate) fn expand_to<T: Real>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let st = aligned_strides(t.shape(), shape);
    let zeros = vec![0; shape.len()];
    let mut data = vec![T::zero(); shape.iter().product()];
    let td = t.data();
    for_each_pair(shape, &st, &zeros, |o, it, _| data[o] = td[it]);
    Tensor::from_parts(shape.to_vec(), data)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_binary(&a, &b, |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().op(out, &[*self, *other], move |g, needs| {
            vec![needs[0].then(|| reduce_to(g, &sa)), needs[1].then(|| reduce_to(g, &sb))]
        }))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_binary(&a, &b, |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().op(out, &[*self, *other], move |g, needs| {
            vec![
                needs[0].then(|| reduce_to(g, &sa)),
                needs[1].then(|| reduce_to(&g.map(|v| -v), &sb)),
            ]
        }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_binary(&a, &b, |x, y| x * y)?;
        Ok(self.tape().op(out, &[*self, *other], move |g, needs| {
            let ga = needs[0].then(|| {
                let t = broadcast_binary(g, &b, |gv, bv| gv * bv).expect("shapes checked in forward");
                reduce_to(&t, a.shape())
            });
            let gb = needs[1].then(|| {
                let t = broadcast_binary(g, &a, |gv, av| gv * av).expect("shapes checked in forward");
                reduce_to(&t, b.shape())
            });
            vec![ga, gb]
        }))
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_binary(&a, &b, |x, y| x / y)?;
        Ok(self.tape().op(out, &[*self, *other], move |g, needs| {
            let ga = needs[0].then(|| {
                let t = broadcast_binary(g, &b, |gv, bv| gv / bv).expect("shapes checked in forward");
                reduce_to(&t, a.shape())
            });
            let gb = needs[1].then(|| {
                let ga_b = broadcast_binary(g, &a, |gv, av| gv * av).expect("shapes checked in forward");
                let t = broadcast_binary(&ga_b, &b, |v, bv| -v / (bv * bv)).expect("shapes checked in forward");
                reduce_to(&t, b.shape())
            });
            vec![ga, gb]
        }))
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v + c);
        self.tape().op(out, &[*self], |g, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(&self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * c);
        self.tape().op(out, &[*self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.mul_scalar(-T::one())
    }

    pub fn relu(&self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape().op(out, &[*self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }))]
        })
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let y = std::sync::Arc::new(self.value().map(sigmoid));
        let yc = std::sync::Arc::clone(&y);
        self.tape().op_arc(y, &[*self], move |g, _| {
            vec![Some(g.zip_map(&yc, |gv, yv| gv * yv * (T::one() - yv)))]
        })
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let y = std::sync::Arc::new(self.value().map(|v| v.tanh()));
        let yc = std::sync::Arc::clone(&y);
        self.tape().op_arc(y, &[*self], move |g, _| {
            vec![Some(g.zip_map(&yc, |gv, yv| gv * (T::one() - yv * yv)))]
        })
    }

    pub fn exp(&self) -> Var<'t, T> {
        let y = std::sync::Arc::new(self.value().map(|v| v.exp()));
        let yc = std::sync::Arc::clone(&y);
        self.tape().op_arc(y, &[*self], move |g, _| vec![Some(g.zip_map(&yc, |gv, yv| gv * yv))])
    }

    pub fn ln(&self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.ln());
        self.tape().op(out, &[*self], move |g, _| vec![Some(g.zip_map(&x, |gv, xv| gv / xv))])
    }

    pub fn square(&self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v * v);
        let two = T::one() + T::one();
        self.tape().op(out, &[*self], move |g, _| vec![Some(g.zip_map(&x, |gv, xv| two * gv * xv))])
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

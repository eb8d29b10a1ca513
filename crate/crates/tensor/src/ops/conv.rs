//! 2-D convolution via im2col + gemm.

use crate::error::{arg_err, shape_err, Result};
use crate::real::{gemm, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn same(kernel: usize) -> Self {
        Self { stride: 1, padding: kernel / 2 }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.hout * self.wout
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, col: &mut [T]) {
    let (hout, wout) = (g.hout, g.wout);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * hout * wout..(row + 1) * hout * wout];
                for oh in 0..hout {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * wout..(oh + 1) * wout];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let (hout, wout) = (g.hout, g.wout);
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * hout * wout..(row + 1) * hout * wout];
                for oh in 0..hout {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, &v) in src[oh * wout..(oh + 1) * wout].iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Convolution of `[B, Cin, H, W]` with weights `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>, spec: Conv2dSpec) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1) {
            return Err(shape_err("conv2d", format!("input {:?}, weight {:?}", x.shape(), w.shape())));
        }
        if spec.stride == 0 {
            return Err(arg_err("conv2d", "stride must be positive"));
        }
        let (batch, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let (hp, wp) = (h + 2 * spec.padding, wd + 2 * spec.padding);
        if hp < kh || wp < kw {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {hp}x{wp}")));
        }
        let g = Geometry {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            hout: (hp - kh) / spec.stride + 1,
            wout: (wp - kw) / spec.stride + 1,
        };
        let (k, p) = (g.k(), g.p());
        let in_sz = cin * h * wd;
        let mut out = vec![T::zero(); batch * cout * p];
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for b in 0..batch {
            let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
            let rhs: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut col);
                &col
            };
            gemm(false, false, cout, p, k, w.data(), rhs, T::zero(), &mut out[b * cout * p..(b + 1) * cout * p]);
        }
        let bias_val = match bias {
            Some(bv) => {
                let bv = bv.value();
                if bv.shape() != [cout] {
                    return Err(shape_err("conv2d", format!("bias {:?} for {cout} outputs", bv.shape())));
                }
                for b in 0..batch {
                    for (o, &bias_o) in bv.data().iter().enumerate() {
                        for v in &mut out[(b * cout + o) * p..(b * cout + o + 1) * p] {
                            *v += bias_o;
                        }
                    }
                }
                true
            }
            None => false,
        };
        let out = Tensor::from_parts(vec![batch, cout, g.hout, g.wout], out);
        let parents: Vec<Var<'t, T>> = match bias {
            Some(bv) => vec![*self, *weight, *bv],
            None => vec![*self, *weight],
        };
        Ok(self.tape().op(out, &parents, move |gy, needs| {
            let gd = gy.data();
            let mut dx = needs[0].then(|| vec![T::zero(); batch * in_sz]);
            let mut dw = needs[1].then(|| vec![T::zero(); w.numel()]);
            let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
            let mut dcol = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
            for b in 0..batch {
                let gyb = &gd[b * cout * p..(b + 1) * cout * p];
                if let Some(dw) = dw.as_mut() {
                    let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
                    let rhs: &[T] = if g.is_pointwise() {
                        xb
                    } else {
                        im2col(xb, &g, &mut col);
                        &col
                    };
                    gemm(false, true, cout, k, p, gyb, rhs, T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
                    if g.is_pointwise() {
                        gemm(true, false, k, p, cout, w.data(), gyb, T::zero(), dxb);
                    } else {
                        gemm(true, false, k, p, cout, w.data(), gyb, T::zero(), &mut dcol);
                        col2im(&dcol, &g, dxb);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
            ];
            if bias_val {
                grads.push(needs[2].then(|| {
                    let mut db = vec![T::zero(); cout];
                    for b in 0..batch {
                        for (o, acc) in db.iter_mut().enumerate() {
                            *acc += gd[(b * cout + o) * p..(b * cout + o + 1) * p].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::from_parts(vec![cout], db)
                }));
            }
            grads
        }))
    }
}

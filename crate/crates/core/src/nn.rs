//! Layers on top of the tensor engine. Each layer knows its parameter names,
//! registers initial values in a [`ParamStore`], and runs a forward pass
//! through a [`Binder`].

use formula_tensor::{init, Binder, Conv2dSpec, ParamStore, Real, Tensor, TensorError, Var};
use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial dims {height}x{width} not divisible by {factor}")]
    NonDivisibleSpatialDims { height: usize, width: usize, factor: usize },
    #[error("image {height}x{width} is too small for the encoder")]
    ImageTooSmall { height: usize, width: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn t<T: Real>(x: f64) -> T {
    T::from_f64_lossy(x)
}

fn unit<T: Real>(v: Vec<T>) -> Vec<T> {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(t(1e-12));
    v.into_iter().map(|x| x / n).collect()
}

/// `W v` for `W: [rows, cols]` in row-major order.
fn mat_vec<T: Real>(w: &[T], rows: usize, cols: usize, v: &[T]) -> Vec<T> {
    (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum()).collect()
}

/// `Wᵀ u` for `W: [rows, cols]`.
fn mat_t_vec<T: Real>(w: &[T], rows: usize, cols: usize, u: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        for (o, &x) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += x * u[r];
        }
    }
    out
}

/// 2-D convolution with "same" padding, optional bias and optional spectral
/// normalization (one power-iteration step per training forward).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
    pub spectral: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Self { name: name.into(), cin, cout, kernel, stride: 1, bias: true, spectral: false }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn with_spectral(mut self, on: bool) -> Self {
        self.spectral = on;
        self
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let w: Tensor<T> = init::orthogonal(&[self.cout, self.cin, self.kernel, self.kernel], 1.0, rng);
        if self.spectral {
            let cols = self.cin * self.kernel * self.kernel;
            let u0 = unit(init::normal::<T, R>(&[self.cout], 1.0, rng).into_data());
            let v = unit(mat_t_vec(w.data(), self.cout, cols, &u0));
            let u = unit(mat_vec(w.data(), self.cout, cols, &v));
            store.insert_buffer(self.key("sn_u"), Tensor::new(&[self.cout], u).expect("len"));
            store.insert_buffer(self.key("sn_v"), Tensor::new(&[cols], v).expect("len"));
        }
        store.insert_param(self.key("weight"), w);
        if self.bias {
            store.insert_param(self.key("bias"), Tensor::zeros(&[self.cout]));
        }
    }

    /// The weight as used in the forward pass (divided by its spectral norm
    /// estimate when enabled).
    pub fn weight<'t, T: Real>(&self, b: &Binder<'t, '_, T>) -> Result<Var<'t, T>> {
        let w = b.param(&self.key("weight"))?;
        if !self.spectral {
            return Ok(w);
        }
        let (rows, cols) = (self.cout, self.cin * self.kernel * self.kernel);
        let wv = w.value();
        let (uk, vk) = (self.key("sn_u"), self.key("sn_v"));
        let (u, v) = if b.is_train() {
            let u = b.buffer(&uk)?;
            let v = unit(mat_t_vec(wv.data(), rows, cols, u.data()));
            let u = unit(mat_vec(wv.data(), rows, cols, &v));
            let (u, v) = (Tensor::new(&[rows], u)?, Tensor::new(&[cols], v)?);
            b.set_buffer(&uk, u.clone())?;
            b.set_buffer(&vk, v.clone())?;
            (u, v)
        } else {
            (b.buffer(&uk)?, b.buffer(&vk)?)
        };
        let tape = b.tape();
        let u = tape.constant(u.into_reshaped(&[1, rows])?);
        let v = tape.constant(v.into_reshaped(&[cols, 1])?);
        let sigma = u.matmul(&w.reshape(&[rows, cols])?)?.matmul(&v)?.reshape(&[1, 1, 1, 1])?;
        Ok(w.div(&sigma)?)
    }

    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let w = self.weight(b)?;
        let bias = if self.bias { Some(b.param(&self.key("bias"))?) } else { None };
        let spec = Conv2dSpec { stride: self.stride, padding: self.kernel / 2 };
        Ok(x.conv2d(&w, bias.as_ref(), spec)?)
    }
}

/// Dense layer, `y = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self { name: name.into(), din, dout, bias: true }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    /// Normal weights with the given std; bias filled with `bias_value`.
    pub fn init_with<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R, std: f64, bias_value: f64) {
        store.insert_param(self.key("weight"), init::normal(&[self.dout, self.din], std, rng));
        if self.bias {
            store.insert_param(self.key("bias"), Tensor::full(&[self.dout], t(bias_value)));
        }
    }

    /// Glorot-scaled normal weights, zero bias.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let std = (2.0 / (self.din + self.dout) as f64).sqrt();
        self.init_with(store, rng, std, 0.0);
    }

    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let w = b.param(&self.key("weight"))?;
        let bias = if self.bias { Some(b.param(&self.key("bias"))?) } else { None };
        Ok(x.linear(&w, bias.as_ref())?)
    }
}

/// Lookup table `[n, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub name: String,
    pub n: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, n: usize, dim: usize) -> Self {
        Self { name: name.into(), n, dim }
    }

    pub fn key(&self) -> String {
        format!("{}.table", self.name)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R, std: f64) {
        store.insert_param(self.key(), init::normal(&[self.n, self.dim], std, rng));
    }

    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        Ok(b.param(&self.key())?.index_rows(ids)?)
    }
}

/// Batch normalization over `[B, C, ...]` with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    /// Learned per-channel gain and bias.
    pub affine: bool,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels, momentum: 0.1, eps: 1e-5, affine: true }
    }

    pub fn without_affine(mut self) -> Self {
        self.affine = false;
        self
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) {
        store.insert_buffer(self.key("running_mean"), Tensor::zeros(&[self.channels]));
        store.insert_buffer(self.key("running_var"), Tensor::ones(&[self.channels]));
        if self.affine {
            store.insert_param(self.key("gain"), Tensor::ones(&[self.channels]));
            store.insert_param(self.key("bias"), Tensor::zeros(&[self.channels]));
        }
    }

    /// Zero-mean, unit-variance output (batch statistics in training mode,
    /// running statistics otherwise).
    pub fn normalize<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (mk, vk) = (self.key("running_mean"), self.key("running_var"));
        if b.is_train() {
            let (y, stats) = x.batch_norm_train(t(self.eps))?;
            let m = t::<T>(self.momentum);
            let blend = |old: Tensor<T>, new: &Tensor<T>| old.zip_map(new, |o, n| (T::one() - m) * o + m * n);
            b.set_buffer(&mk, blend(b.buffer(&mk)?, &stats.mean))?;
            b.set_buffer(&vk, blend(b.buffer(&vk)?, &stats.var))?;
            Ok(y)
        } else {
            Ok(x.batch_norm_eval(&b.buffer(&mk)?, &b.buffer(&vk)?, t(self.eps))?)
        }
    }

    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.normalize(b, x)?;
        if !self.affine {
            return Ok(y);
        }
        let shape = channel_shape(&x.shape(), 1)?;
        let g = b.param(&self.key("gain"))?.reshape(&shape)?;
        let bias = b.param(&self.key("bias"))?.reshape(&shape)?;
        Ok(y.mul(&g)?.add(&bias)?)
    }
}

/// `[batch, C, 1, 1, ...]` matching the rank of `x_shape`.
fn channel_shape(x_shape: &[usize], batch: usize) -> Result<Vec<usize>> {
    if x_shape.len() < 2 {
        return Err(ModelError::ShapeMismatch(format!("expected [B, C, ...], got {x_shape:?}")));
    }
    let mut s = vec![1; x_shape.len()];
    s[0] = batch;
    s[1] = x_shape[1];
    Ok(s)
}

/// Batch normalization whose per-sample gain and bias are affine
/// projections of a conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CondBatchNorm {
    pub bn: BatchNorm,
    pub gain: Linear,
    pub bias: Linear,
}

impl CondBatchNorm {
    pub fn new(name: &str, channels: usize, cond_dim: usize) -> Self {
        Self {
            bn: BatchNorm::new(format!("{name}.bn"), channels).without_affine(),
            gain: Linear::new(format!("{name}.gain"), cond_dim, channels),
            bias: Linear::new(format!("{name}.bias"), cond_dim, channels),
        }
    }

    /// Projection weights are small normals; the gain projection's bias
    /// starts at one and the bias projection's at zero.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.bn.init(store);
        let std = 0.1 / (self.gain.din as f64).sqrt();
        self.gain.init_with(store, rng, std, 1.0);
        self.bias.init_with(store, rng, std, 0.0);
    }

    /// `x`: `[B, C, H, W]`, `cond`: `[B, cond_dim]`.
    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>, cond: &Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if cond.shape() != [shape[0], self.gain.din] {
            return Err(ModelError::ShapeMismatch(format!("condition {:?} for input {shape:?}", cond.shape())));
        }
        let y = self.bn.normalize(b, x)?;
        let target = channel_shape(&shape, shape[0])?;
        let g = self.gain.forward(b, cond)?.reshape(&target)?;
        let beta = self.bias.forward(b, cond)?.reshape(&target)?;
        Ok(y.mul(&g)?.add(&beta)?)
    }
}

/// Self-attention over spatial positions with 1×1 projections `f`, `g`
/// (reduced to `max(1, C/8)` channels) and `h` (C channels), gated by a
/// scalar `gamma` that starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub name: String,
    pub f: Conv2d,
    pub g: Conv2d,
    pub h: Conv2d,
}

impl SelfAttention {
    pub fn new(name: &str, channels: usize, spectral: bool) -> Self {
        let r = (channels / 8).max(1);
        let proj = |p: &str, out| Conv2d::new(format!("{name}.{p}"), channels, out, 1).without_bias().with_spectral(spectral);
        Self { name: name.to_string(), f: proj("f", r), g: proj("g", r), h: proj("h", channels) }
    }

    pub fn gamma_key(&self) -> String {
        format!("{}.gamma", self.name)
    }

    pub fn reduced_channels(&self) -> usize {
        self.f.cout
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.f.init(store, rng);
        self.g.init(store, rng);
        self.h.init(store, rng);
        store.insert_param(self.gamma_key(), Tensor::zeros(&[1]));
    }

    /// Output and attention map `beta: [B, N, N]` with `beta[b, j, i]` the
    /// weight of position `i` when producing position `j`.
    pub fn forward_with_map<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        x: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.h.cin {
            return Err(ModelError::ShapeMismatch(format!("attention over {} channels got {s:?}", self.h.cin)));
        }
        let (bs, c, n) = (s[0], s[1], s[2] * s[3]);
        let r = self.reduced_channels();
        let f = self.f.forward(b, x)?.reshape(&[bs, r, n])?;
        let g = self.g.forward(b, x)?.reshape(&[bs, r, n])?;
        let h = self.h.forward(b, x)?.reshape(&[bs, c, n])?;
        // scores[b, j, i] = g_j . f_i, normalized over i
        let beta = g.bmm(&f, true, false)?.softmax()?;
        let o = h.bmm(&beta, false, true)?.reshape(&s)?;
        let gamma = b.param(&self.gamma_key())?.reshape(&[1, 1, 1, 1])?;
        Ok((x.add(&o.mul(&gamma)?)?, beta))
    }

    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_with_map(b, x)?.0)
    }
}

/// Gated recurrent unit cell: update `z`, reset `r`, candidate `n`,
/// `h' = (1 - z) * n + z * h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
    pub wx: Linear,
    pub wh: Linear,
}

impl GruCell {
    pub fn new(name: &str, input: usize, hidden: usize) -> Self {
        Self {
            name: name.to_string(),
            input,
            hidden,
            wx: Linear::new(format!("{name}.wx"), input, 3 * hidden),
            wh: Linear::new(format!("{name}.wh"), hidden, 3 * hidden),
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.wx.init(store, rng);
        let w: Tensor<T> = init::orthogonal(&[3 * self.hidden, self.hidden], 1.0, rng);
        store.insert_param(format!("{}.weight", self.wh.name), w);
        store.insert_param(format!("{}.bias", self.wh.name), Tensor::zeros(&[3 * self.hidden]));
    }

    /// `x: [B, input]`, `h: [B, hidden]` → `[B, hidden]`.
    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>, h: &Var<'t, T>) -> Result<Var<'t, T>> {
        let hd = self.hidden;
        let gx = self.wx.forward(b, x)?;
        let gh = self.wh.forward(b, h)?;
        let z = gx.narrow(1, 0, hd)?.add(&gh.narrow(1, 0, hd)?)?.sigmoid();
        let r = gx.narrow(1, hd, hd)?.add(&gh.narrow(1, hd, hd)?)?.sigmoid();
        let n = gx.narrow(1, 2 * hd, hd)?.add(&r.mul(&gh.narrow(1, 2 * hd, hd)?)?)?.tanh();
        // (1 - z) * n + z * h = n + z * (h - n)
        Ok(n.add(&z.mul(&h.sub(&n)?)?)?)
    }
}

//! Conditional generator, projection discriminator and hinge losses.

use formula_tensor::{concat, Binder, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::DomainLabel;
use crate::nn::{BatchNorm, CondBatchNorm, Conv2d, Embedding, Linear, ModelError, Result, SelfAttention};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Encoder output channels per block; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub z_dim: usize,
    /// Size of the domain embedding fed to conditional batchnorm.
    pub cond_dim: usize,
    /// Self-attention follows this decoder block (1-based).
    pub attention_after: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { channels: vec![32, 64, 128, 256], z_dim: 128, cond_dim: 16, attention_after: 2 }
    }
}

impl GeneratorConfig {
    pub fn tiny() -> Self {
        Self { channels: vec![8, 16, 16, 16], z_dim: 16, cond_dim: 8, attention_after: 2 }
    }

    /// Spatial dims must be multiples of this.
    pub fn spatial_factor(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(ModelError::Config("generator channels must be non-empty and positive".into()));
        }
        if !(1..=self.channels.len()).contains(&self.attention_after) {
            return Err(ModelError::Config(format!("attention_after {} outside 1..={}", self.attention_after, self.channels.len())));
        }
        if self.z_dim == 0 || self.cond_dim == 0 {
            return Err(ModelError::Config("z_dim and cond_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub spectral_norm: bool,
    /// Self-attention follows this block (1-based).
    pub attention_after: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { channels: vec![32, 64, 128, 256], spectral_norm: true, attention_after: 1 }
    }
}

impl DiscriminatorConfig {
    pub fn tiny() -> Self {
        Self { channels: vec![8, 16, 16, 16], spectral_norm: true, attention_after: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(ModelError::Config("discriminator channels must be non-empty and positive".into()));
        }
        if !(1..=self.channels.len()).contains(&self.attention_after) {
            return Err(ModelError::Config(format!("attention_after {} outside 1..={}", self.attention_after, self.channels.len())));
        }
        Ok(())
    }
}

/// Standard-normal latent batch `[batch, z_dim]`.
pub fn sample_latent<T: Real, R: Rng + ?Sized>(batch: usize, z_dim: usize, rng: &mut R) -> Tensor<T> {
    let data = (0..batch * z_dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(v)
        })
        .collect();
    Tensor::new(&[batch, z_dim], data).expect("sizes agree")
}

#[derive(Debug, Clone, PartialEq)]
struct EncBlock {
    pre: Option<BatchNorm>,
    conv1: Conv2d,
    bn: BatchNorm,
    conv2: Conv2d,
    shortcut: Conv2d,
}

impl EncBlock {
    fn new(name: &str, cin: usize, cout: usize, first: bool) -> Self {
        Self {
            pre: (!first).then(|| BatchNorm::new(format!("{name}.bn0"), cin)),
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3),
            bn: BatchNorm::new(format!("{name}.bn1"), cout),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3),
            shortcut: Conv2d::new(format!("{name}.sc"), cin, cout, 1),
        }
    }

    fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        if let Some(bn) = &self.pre {
            bn.init(store);
        }
        self.conv1.init(store, rng);
        self.bn.init(store);
        self.conv2.init(store, rng);
        self.shortcut.init(store, rng);
    }

    fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = *x;
        if let Some(bn) = &self.pre {
            h = bn.forward(b, &h)?.relu();
        }
        h = self.conv1.forward(b, &h)?;
        h = self.bn.forward(b, &h)?.relu().avg_pool2()?;
        h = self.conv2.forward(b, &h)?;
        let sc = self.shortcut.forward(b, &x.avg_pool2()?)?;
        Ok(h.add(&sc)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DecBlock {
    cbn1: CondBatchNorm,
    conv1: Conv2d,
    cbn2: CondBatchNorm,
    conv2: Conv2d,
    shortcut: Conv2d,
}

impl DecBlock {
    fn new(name: &str, cin: usize, cout: usize, cond: usize) -> Self {
        Self {
            cbn1: CondBatchNorm::new(&format!("{name}.cbn1"), cin, cond),
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3),
            cbn2: CondBatchNorm::new(&format!("{name}.cbn2"), cout, cond),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3),
            shortcut: Conv2d::new(format!("{name}.sc"), cin, cout, 1),
        }
    }

    fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.cbn1.init(store, rng);
        self.conv1.init(store, rng);
        self.cbn2.init(store, rng);
        self.conv2.init(store, rng);
        self.shortcut.init(store, rng);
    }

    fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>, cond: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.cbn1.forward(b, x, cond)?.relu().upsample2()?;
        let h = self.conv1.forward(b, &h)?;
        let h = self.cbn2.forward(b, &h, cond)?.relu();
        let h = self.conv2.forward(b, &h)?;
        let sc = self.shortcut.forward(b, &x.upsample2()?)?;
        Ok(h.add(&sc)?)
    }
}

/// Encoder–decoder generator: residual downsampling blocks, residual
/// upsampling blocks with conditional batchnorm on `concat(z, embed(c))`,
/// one self-attention layer in the decoder, then BN, ReLU, 3×3 conv and a
/// sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    encoder: Vec<EncBlock>,
    decoder: Vec<DecBlock>,
    pub attention: SelfAttention,
    pub embed: Embedding,
    out_bn: BatchNorm,
    out_conv: Conv2d,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let n = ch.len();
        let encoder = (0..n)
            .map(|i| EncBlock::new(&format!("g.enc{i}"), if i == 0 { 1 } else { ch[i - 1] }, ch[i], i == 0))
            .collect();
        let cond = config.z_dim + config.cond_dim;
        let decoder: Vec<DecBlock> = (0..n)
            .map(|i| {
                let cin = ch[n - 1 - i];
                let cout = if i + 1 < n { ch[n - 2 - i] } else { ch[0] };
                DecBlock::new(&format!("g.dec{i}"), cin, cout, cond)
            })
            .collect();
        let attn_ch = decoder[config.attention_after - 1].conv2.cout;
        Ok(Self {
            attention: SelfAttention::new("g.attn", attn_ch, false),
            embed: Embedding::new("g.embed", 2, config.cond_dim),
            out_bn: BatchNorm::new("g.out_bn", ch[0]),
            out_conv: Conv2d::new("g.out_conv", ch[0], 1, 3),
            encoder,
            decoder,
            config,
        })
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for blk in &self.encoder {
            blk.init(&mut store, rng);
        }
        for blk in &self.decoder {
            blk.init(&mut store, rng);
        }
        self.attention.init(&mut store, rng);
        self.embed.init(&mut store, rng, 1.0);
        self.out_bn.init(&mut store);
        self.out_conv.init(&mut store, rng);
        store
    }

    /// Names of the conditional-batchnorm projection parameters.
    pub fn cbn_projection_params(&self) -> Vec<String> {
        self.decoder
            .iter()
            .flat_map(|d| [&d.cbn1, &d.cbn2])
            .flat_map(|c| [&c.gain.name, &c.bias.name])
            .flat_map(|n| [format!("{n}.weight"), format!("{n}.bias")])
            .collect()
    }

    /// `concat(z, embed(c))`, shape `[B, z_dim + cond_dim]`.
    pub fn condition<'t, T: Real>(&self, b: &Binder<'t, '_, T>, z: &Var<'t, T>, c: &[DomainLabel]) -> Result<Var<'t, T>> {
        let zs = z.shape();
        if zs != [c.len(), self.config.z_dim] {
            return Err(ModelError::ShapeMismatch(format!("latent {zs:?} for {} labels", c.len())));
        }
        let ids: Vec<usize> = c.iter().map(|d| d.index()).collect();
        Ok(concat(&[*z, self.embed.forward(b, &ids)?], 1)?)
    }

    /// `x: [B, 1, H, W]` with H and W multiples of [`GeneratorConfig::spatial_factor`].
    pub fn forward<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        x: &Var<'t, T>,
        z: &Var<'t, T>,
        c: &[DomainLabel],
    ) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[0] != c.len() || s[0] == 0 {
            return Err(ModelError::ShapeMismatch(format!("generator input {s:?} with {} labels", c.len())));
        }
        let f = self.config.spatial_factor();
        if s[2] % f != 0 || s[3] % f != 0 {
            return Err(ModelError::NonDivisibleSpatialDims { height: s[2], width: s[3], factor: f });
        }
        let cond = self.condition(b, z, c)?;
        let mut h = *x;
        for blk in &self.encoder {
            h = blk.forward(b, &h)?;
        }
        for (i, blk) in self.decoder.iter().enumerate() {
            h = blk.forward(b, &h, &cond)?;
            if i + 1 == self.config.attention_after {
                h = self.attention.forward(b, &h)?;
            }
        }
        let h = self.out_bn.forward(b, &h)?.relu();
        Ok(self.out_conv.forward(b, &h)?.sigmoid())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DiscBlock {
    first: bool,
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Conv2d,
}

impl DiscBlock {
    fn new(name: &str, cin: usize, cout: usize, first: bool, sn: bool) -> Self {
        Self {
            first,
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3).with_spectral(sn),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3).with_spectral(sn),
            shortcut: Conv2d::new(format!("{name}.sc"), cin, cout, 1).with_spectral(sn),
        }
    }

    fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        self.shortcut.init(store, rng);
    }

    fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = if self.first { *x } else { x.relu() };
        let h = self.conv1.forward(b, &h)?.relu();
        let h = self.conv2.forward(b, &h)?.avg_pool2()?;
        let sc = if self.first {
            self.shortcut.forward(b, &x.avg_pool2()?)?
        } else {
            self.shortcut.forward(b, x)?.avg_pool2()?
        };
        Ok(h.add(&sc)?)
    }
}

/// Pieces of a discriminator evaluation.
pub struct DiscOutput<'t, T: Real> {
    /// Sum-pooled final features `[B, C]`.
    pub phi: Var<'t, T>,
    /// Unconditional term `ψ(φ)`, `[B]`.
    pub psi: Var<'t, T>,
    /// Projection term `⟨e_c, φ⟩`, `[B]`.
    pub projection: Var<'t, T>,
    /// `psi + projection`.
    pub score: Var<'t, T>,
}

/// Residual downsampling discriminator with self-attention, global sum
/// pooling and a class projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    blocks: Vec<DiscBlock>,
    pub attention: SelfAttention,
    pub psi: Linear,
    pub embed: Embedding,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let sn = config.spectral_norm;
        let blocks = (0..ch.len())
            .map(|i| DiscBlock::new(&format!("d.blk{i}"), if i == 0 { 1 } else { ch[i - 1] }, ch[i], i == 0, sn))
            .collect();
        let last = *ch.last().expect("validated");
        Ok(Self {
            attention: SelfAttention::new("d.attn", ch[config.attention_after - 1], sn),
            psi: Linear::new("d.psi", last, 1),
            embed: Embedding::new("d.embed", 2, last),
            blocks,
            config,
        })
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for blk in &self.blocks {
            blk.init(&mut store, rng);
        }
        self.attention.init(&mut store, rng);
        self.psi.init(&mut store, rng);
        let last = self.psi.din as f64;
        self.embed.init(&mut store, rng, 1.0 / last.sqrt());
        store
    }

    pub fn features<'t, T: Real>(&self, b: &Binder<'t, '_, T>, y: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = y.shape();
        if s.len() != 4 || s[1] != 1 || s[0] == 0 {
            return Err(ModelError::ShapeMismatch(format!("discriminator input {s:?}")));
        }
        let f = 1 << self.blocks.len();
        if s[2] % f != 0 || s[3] % f != 0 {
            return Err(ModelError::NonDivisibleSpatialDims { height: s[2], width: s[3], factor: f });
        }
        let mut h = *y;
        for (i, blk) in self.blocks.iter().enumerate() {
            h = blk.forward(b, &h)?;
            if i + 1 == self.config.attention_after {
                h = self.attention.forward(b, &h)?;
            }
        }
        let hs = h.shape();
        Ok(h.relu().reshape(&[hs[0], hs[1], hs[2] * hs[3]])?.sum_axis(2)?)
    }

    pub fn forward_parts<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        y: &Var<'t, T>,
        c: &[DomainLabel],
    ) -> Result<DiscOutput<'t, T>> {
        if y.shape().first() != Some(&c.len()) {
            return Err(ModelError::ShapeMismatch(format!("{:?} images with {} labels", y.shape(), c.len())));
        }
        let phi = self.features(b, y)?;
        let n = c.len();
        let psi = self.psi.forward(b, &phi)?.reshape(&[n])?;
        let ids: Vec<usize> = c.iter().map(|d| d.index()).collect();
        let projection = self.embed.forward(b, &ids)?.mul(&phi)?.sum_axis(1)?;
        let score = psi.add(&projection)?;
        Ok(DiscOutput { phi, psi, projection, score })
    }

    /// Scores `[B]`.
    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, y: &Var<'t, T>, c: &[DomainLabel]) -> Result<Var<'t, T>> {
        Ok(self.forward_parts(b, y, c)?.score)
    }
}

fn check_batch<T: Real>(v: &Var<'_, T>) -> Result<()> {
    if v.value().numel() == 0 {
        return Err(ModelError::EmptyBatch);
    }
    Ok(())
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_d<'t, T: Real>(real: &Var<'t, T>, fake: &Var<'t, T>) -> Result<Var<'t, T>> {
    check_batch(real)?;
    check_batch(fake)?;
    let r = real.neg().add_scalar(T::one()).relu().mean_all();
    let f = fake.add_scalar(T::one()).relu().mean_all();
    Ok(r.add(&f)?)
}

/// `-mean(fake)`.
pub fn hinge_g<'t, T: Real>(fake: &Var<'t, T>) -> Result<Var<'t, T>> {
    check_batch(fake)?;
    Ok(fake.mean_all().neg())
}

/// Discriminator hinge loss on plain score lists.
pub fn hinge_d_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let r = tape.constant(Tensor::from_f64(&[real.len()], real)?);
    let f = tape.constant(Tensor::from_f64(&[fake.len()], fake)?);
    Ok(hinge_d(&r, &f)?.item())
}

/// Generator hinge loss on a plain score list.
pub fn hinge_g_loss(fake: &[f64]) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let f = tape.constant(Tensor::from_f64(&[fake.len()], fake)?);
    Ok(hinge_g(&f)?.item())
}

/// Per-step loss scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub l_d: f64,
    pub l_g: f64,
    pub l_t: f64,
    pub l_dt: f64,
    pub l_gt: f64,
    pub lambda: f64,
}

impl GanLosses {
    pub fn all_finite(&self) -> bool {
        [self.l_d, self.l_g, self.l_t, self.l_dt, self.l_gt].iter().all(|v| v.is_finite())
    }
}

/// `l_dt = l_d + λ l_t`, `l_gt = l_g + λ l_t`.
pub fn combine_losses(l_d: f64, l_g: f64, l_t: f64, lambda: f64) -> Result<GanLosses> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(ModelError::NegativeLambda(lambda));
    }
    Ok(GanLosses { l_d, l_g, l_t, l_dt: l_d + lambda * l_t, l_gt: l_g + lambda * l_t, lambda })
}

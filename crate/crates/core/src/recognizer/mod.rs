//! Image-to-token recognizer: DenseNet encoder, GRU decoder with additive
//! attention, masked cross-entropy and search-based decoding.

mod search;

pub use search::{beam_search, greedy, BeamHypothesis, SearchConfig, StepModel};

use formula_tensor::{concat, Binder, Mode, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::image::GrayImage;
use crate::nn::{BatchNorm, Conv2d, Embedding, GruCell, Linear, ModelError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseNetConfig {
    pub num_blocks: usize,
    /// Layers per dense block.
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub stem_channels: usize,
    /// Also attend over the block-2 features at twice the resolution.
    pub multiscale: bool,
}

impl Default for DenseNetConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl DenseNetConfig {
    pub fn small() -> Self {
        Self { num_blocks: 3, layers_per_block: 6, growth_rate: 24, stem_channels: 48, multiscale: false }
    }

    pub fn large() -> Self {
        Self { num_blocks: 3, layers_per_block: 16, growth_rate: 24, stem_channels: 48, multiscale: true }
    }

    pub fn tiny() -> Self {
        Self { num_blocks: 3, layers_per_block: 2, growth_rate: 8, stem_channels: 16, multiscale: false }
    }

    /// Input channels of every dense layer, block by block.
    pub fn layer_plan(&self) -> Vec<Vec<usize>> {
        let mut c = self.stem_channels;
        let mut plan = Vec::new();
        for b in 0..self.num_blocks {
            plan.push((0..self.layers_per_block).map(|i| c + i * self.growth_rate).collect());
            c += self.layers_per_block * self.growth_rate;
            if b + 1 < self.num_blocks {
                c /= 2;
            }
        }
        plan
    }

    /// Channels after each dense block (before its transition).
    pub fn block_channels(&self) -> Vec<usize> {
        let mut c = self.stem_channels;
        let mut out = Vec::new();
        for b in 0..self.num_blocks {
            c += self.layers_per_block * self.growth_rate;
            out.push(c);
            if b + 1 < self.num_blocks {
                c /= 2;
            }
        }
        out
    }

    /// Total spatial reduction: stem conv and pool, then one halving per transition.
    pub fn reduction(&self) -> usize {
        4 << self.num_blocks.saturating_sub(1)
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        self.dims_after_block(self.num_blocks - 1, height, width)
    }

    /// Spatial size of the feature map leaving dense block `block`.
    pub fn dims_after_block(&self, block: usize, height: usize, width: usize) -> (usize, usize) {
        let f = |d: usize| d.div_ceil(2) / 2 >> block;
        (f(height), f(width))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.layers_per_block == 0 || self.growth_rate == 0 || self.stem_channels == 0 {
            return Err(ModelError::Config("densenet sizes must be positive".into()));
        }
        if self.multiscale && self.num_blocks < 2 {
            return Err(ModelError::Config("multiscale needs at least two blocks".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizerConfig {
    pub encoder: DenseNetConfig,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub max_len: usize,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self::small(0)
    }
}

impl RecognizerConfig {
    /// The task model used during GAN training.
    pub fn small(vocab_size: usize) -> Self {
        Self { encoder: DenseNetConfig::small(), vocab_size, embed_dim: 256, hidden: 256, attn_dim: 256, max_len: 200 }
    }

    pub fn large(vocab_size: usize) -> Self {
        Self { encoder: DenseNetConfig::large(), vocab_size, embed_dim: 256, hidden: 512, attn_dim: 256, max_len: 200 }
    }

    pub fn tiny(vocab_size: usize) -> Self {
        Self { encoder: DenseNetConfig::tiny(), vocab_size, embed_dim: 32, hidden: 64, attn_dim: 32, max_len: 200 }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.vocab_size <= Vocabulary::UNK || self.embed_dim == 0 || self.hidden == 0 || self.attn_dim == 0 {
            return Err(ModelError::Config("decoder sizes must be positive and the vocabulary non-trivial".into()));
        }
        if self.max_len == 0 {
            return Err(ModelError::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DenseLayer {
    bn: BatchNorm,
    conv: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
struct Transition {
    bn: BatchNorm,
    conv: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
struct DenseNet {
    config: DenseNetConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    out_bn: BatchNorm,
    fine_bn: Option<BatchNorm>,
}

impl DenseNet {
    fn new(name: &str, config: DenseNetConfig) -> Self {
        let k = config.growth_rate;
        let plan = config.layer_plan();
        let chans = config.block_channels();
        let blocks = plan
            .iter()
            .enumerate()
            .map(|(b, layers)| {
                layers
                    .iter()
                    .enumerate()
                    .map(|(i, &cin)| DenseLayer {
                        bn: BatchNorm::new(format!("{name}.b{b}.l{i}.bn"), cin),
                        conv: Conv2d::new(format!("{name}.b{b}.l{i}.conv"), cin, k, 3).without_bias(),
                    })
                    .collect()
            })
            .collect();
        let transitions = chans[..chans.len() - 1]
            .iter()
            .enumerate()
            .map(|(b, &c)| Transition {
                bn: BatchNorm::new(format!("{name}.t{b}.bn"), c),
                conv: Conv2d::new(format!("{name}.t{b}.conv"), c, c / 2, 1).without_bias(),
            })
            .collect();
        Self {
            stem: Conv2d::new(format!("{name}.stem"), 1, config.stem_channels, 7).with_stride(2).without_bias(),
            stem_bn: BatchNorm::new(format!("{name}.stem_bn"), config.stem_channels),
            out_bn: BatchNorm::new(format!("{name}.out_bn"), *chans.last().expect("validated")),
            fine_bn: config.multiscale.then(|| BatchNorm::new(format!("{name}.fine_bn"), chans[1])),
            blocks,
            transitions,
            config,
        }
    }

    fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.stem.init(store, rng);
        self.stem_bn.init(store);
        for layer in self.blocks.iter().flatten() {
            layer.bn.init(store);
            layer.conv.init(store, rng);
        }
        for t in &self.transitions {
            t.bn.init(store);
            t.conv.init(store, rng);
        }
        self.out_bn.init(store);
        if let Some(bn) = &self.fine_bn {
            bn.init(store);
        }
    }

    /// Coarse features, plus the finer block-2 map when multiscale.
    fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[0] == 0 {
            return Err(ModelError::ShapeMismatch(format!("encoder input {s:?}")));
        }
        let (oh, ow) = self.config.output_dims(s[2], s[3]);
        if oh == 0 || ow == 0 {
            return Err(ModelError::ImageTooSmall { height: s[2], width: s[3] });
        }
        let mut h = self.stem.forward(b, x)?;
        h = self.stem_bn.forward(b, &h)?.relu().max_pool2()?;
        let mut scales = Vec::new();
        for (bi, layers) in self.blocks.iter().enumerate() {
            for layer in layers {
                let new = layer.conv.forward(b, &layer.bn.forward(b, &h)?.relu())?;
                h = concat(&[h, new], 1)?;
            }
            if bi == 1 {
                if let Some(bn) = &self.fine_bn {
                    scales.push(bn.forward(b, &h)?.relu());
                }
            }
            if let Some(t) = self.transitions.get(bi) {
                h = t.conv.forward(b, &t.bn.forward(b, &h)?.relu())?.avg_pool2()?;
            }
        }
        scales.insert(0, self.out_bn.forward(b, &h)?.relu());
        Ok(scales)
    }
}

/// Attention inputs for one feature scale.
#[derive(Clone)]
pub struct ScaleFeatures<'t, T: Real> {
    /// `[B, C, L]`.
    pub values: Var<'t, T>,
    /// `[B, A, L]`.
    pub keys: Var<'t, T>,
    /// Additive `[B, L]` bias hiding padded positions.
    pub mask: Option<Var<'t, T>>,
}

impl<'t, T: Real> ScaleFeatures<'t, T> {
    pub fn new(values: Var<'t, T>, keys: Var<'t, T>) -> Self {
        Self { values, keys, mask: None }
    }
}

/// Encoder output prepared for decoding.
#[derive(Clone)]
pub struct Encoded<'t, T: Real> {
    pub scales: Vec<ScaleFeatures<'t, T>>,
    /// Initial decoder state `[B, hidden]`.
    pub h0: Var<'t, T>,
}

/// One decoder step's outputs.
pub struct StepOutput<'t, T: Real> {
    /// `[B, V]`.
    pub log_probs: Var<'t, T>,
    pub hidden: Var<'t, T>,
    /// Concatenated attention context `[B, ΣC]`.
    pub context: Var<'t, T>,
    /// Attention weights per scale, `[B, L]`.
    pub alphas: Vec<Var<'t, T>>,
}

/// Additive attention head: `e_i = vᵀ tanh(W h + U a_i + b)`, `α = softmax(e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveAttention {
    pub name: String,
    pub key: Conv2d,
    pub query: Linear,
}

impl AdditiveAttention {
    pub fn new(name: &str, channels: usize, hidden: usize, attn_dim: usize) -> Self {
        Self {
            name: name.to_string(),
            key: Conv2d::new(format!("{name}.key"), channels, attn_dim, 1),
            query: Linear::new(format!("{name}.query"), hidden, attn_dim).without_bias(),
        }
    }

    pub fn v_key(&self) -> String {
        format!("{}.v", self.name)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.key.init(store, rng);
        self.query.init(store, rng);
        let a = self.query.dout;
        store.insert_param(self.v_key(), formula_tensor::init::normal(&[a], (1.0 / a as f64).sqrt(), rng));
    }

    /// Keys `[B, A, L]` for a feature map `[B, C, H, W]`.
    pub fn keys<'t, T: Real>(&self, b: &Binder<'t, '_, T>, features: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = features.shape();
        Ok(self.key.forward(b, features)?.reshape(&[s[0], self.query.dout, s[2] * s[3]])?)
    }

    /// Context `[B, C]` and weights `[B, L]`.
    pub fn attend<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        feats: &ScaleFeatures<'t, T>,
        h: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let vs = feats.values.shape();
        let (bs, c) = (vs[0], vs[1]);
        let a = self.query.dout;
        let q = self.query.forward(b, h)?.reshape(&[bs, a, 1])?;
        let v = b.param(&self.v_key())?.reshape(&[1, a, 1])?;
        let mut e = feats.keys.add(&q)?.tanh().mul(&v)?.sum_axis(1)?;
        if let Some(m) = &feats.mask {
            e = e.add(m)?;
        }
        let alpha = e.softmax()?;
        let ctx = feats.values.bmm(&alpha.reshape(&[bs, vs[2], 1])?, false, false)?.reshape(&[bs, c])?;
        Ok((ctx, alpha))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Decoder {
    embed: Embedding,
    init: Linear,
    heads: Vec<AdditiveAttention>,
    gru: GruCell,
    out: Linear,
}

/// Teacher-forcing inputs and targets, time-major: `inputs[t][b]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl TargetBatch {
    /// `SOS + ids` as inputs and `ids + EOS` as targets, padded with PAD.
    pub fn new(sequences: &[Vec<usize>]) -> Result<Self> {
        if sequences.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let steps = sequences.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        let mut inputs = vec![vec![Vocabulary::PAD; sequences.len()]; steps];
        let mut targets = inputs.clone();
        for (bi, seq) in sequences.iter().enumerate() {
            for t in 0..=seq.len() {
                inputs[t][bi] = if t == 0 { Vocabulary::SOS } else { seq[t - 1] };
                targets[t][bi] = if t < seq.len() { seq[t] } else { Vocabulary::EOS };
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |r| r.len())
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// Non-PAD targets.
    pub fn num_tokens(&self) -> usize {
        self.targets.iter().flatten().filter(|&&t| t != Vocabulary::PAD).count()
    }
}

/// Encoder-decoder recognizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Recognizer {
    pub config: RecognizerConfig,
    encoder: DenseNet,
    decoder: Decoder,
}

impl Recognizer {
    pub fn new(config: RecognizerConfig) -> Result<Self> {
        config.validate()?;
        let enc = DenseNet::new("rec.enc", config.encoder.clone());
        let chans = config.encoder.block_channels();
        let mut scale_channels = vec![*chans.last().expect("validated")];
        if config.encoder.multiscale {
            scale_channels.push(chans[1]);
        }
        let ctx_dim: usize = scale_channels.iter().sum();
        let heads = scale_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| AdditiveAttention::new(&format!("rec.dec.attn{i}"), c, config.hidden, config.attn_dim))
            .collect();
        let decoder = Decoder {
            embed: Embedding::new("rec.dec.embed", config.vocab_size, config.embed_dim),
            init: Linear::new("rec.dec.init", scale_channels[0], config.hidden),
            heads,
            gru: GruCell::new("rec.dec.gru", config.embed_dim + ctx_dim, config.hidden),
            out: Linear::new("rec.dec.out", config.hidden + ctx_dim + config.embed_dim, config.vocab_size),
        };
        Ok(Self { config, encoder: enc, decoder })
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, rng);
        let d = &self.decoder;
        d.embed.init(&mut store, rng, 0.1);
        d.init.init(&mut store, rng);
        for h in &d.heads {
            h.init(&mut store, rng);
        }
        d.gru.init(&mut store, rng);
        d.out.init(&mut store, rng);
        store
    }

    pub fn attention_heads(&self) -> &[AdditiveAttention] {
        &self.decoder.heads
    }

    /// Channel count of the coarse feature map.
    pub fn feature_channels(&self) -> usize {
        *self.config.encoder.block_channels().last().expect("validated")
    }

    /// Raw DenseNet feature maps `[B, C, h, w]`, coarse first.
    pub fn features<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        self.encoder.forward(b, x)
    }

    /// Attention inputs and initial state from feature maps.
    pub fn prepare<'t, T: Real>(&self, b: &Binder<'t, '_, T>, maps: &[Var<'t, T>]) -> Result<Encoded<'t, T>> {
        self.prepare_sized(b, maps, None)
    }

    /// Like [`Recognizer::prepare`], with the unpadded `(height, width)` of
    /// each image so that padded feature positions are ignored.
    pub fn prepare_sized<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        maps: &[Var<'t, T>],
        sizes: Option<&[(usize, usize)]>,
    ) -> Result<Encoded<'t, T>> {
        if maps.len() != self.decoder.heads.len() {
            return Err(ModelError::ShapeMismatch(format!("{} feature maps for {} heads", maps.len(), self.decoder.heads.len())));
        }
        let enc = &self.config.encoder;
        let blocks: Vec<usize> = (0..maps.len()).map(|i| if i == 0 { enc.num_blocks - 1 } else { 1 }).collect();
        let mut scales = Vec::new();
        let mut pool_weights = None;
        for ((m, head), &block) in maps.iter().zip(&self.decoder.heads).zip(&blocks) {
            let s = m.shape();
            let values = m.reshape(&[s[0], s[1], s[2] * s[3]])?;
            let mut feats = ScaleFeatures::new(values, head.keys(b, m)?);
            if let Some(sizes) = sizes {
                if sizes.len() != s[0] {
                    return Err(ModelError::LengthMismatch(format!("{} sizes for {} images", sizes.len(), s[0])));
                }
                if let Some((bias, weights)) = padding_mask::<T>(enc, block, sizes, s[2], s[3])? {
                    feats.mask = Some(b.tape().constant(bias));
                    if scales.is_empty() {
                        pool_weights = Some(weights);
                    }
                }
            }
            scales.push(feats);
        }
        let pooled = match pool_weights {
            Some(w) => scales[0].values.mul(&b.tape().constant(w))?.sum_axis(2)?,
            None => scales[0].values.mean_axis(2)?,
        };
        let h0 = self.decoder.init.forward(b, &pooled)?.tanh();
        Ok(Encoded { scales, h0 })
    }

    pub fn encode<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>) -> Result<Encoded<'t, T>> {
        let maps = self.features(b, x)?;
        self.prepare(b, &maps)
    }

    /// Encodes a padded batch whose images had the given unpadded sizes.
    pub fn encode_sized<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        x: &Var<'t, T>,
        sizes: &[(usize, usize)],
    ) -> Result<Encoded<'t, T>> {
        let maps = self.features(b, x)?;
        self.prepare_sized(b, &maps, Some(sizes))
    }

    pub fn decode_step<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        enc: &Encoded<'t, T>,
        h: &Var<'t, T>,
        prev: &[usize],
    ) -> Result<StepOutput<'t, T>> {
        let d = &self.decoder;
        let emb = d.embed.forward(b, prev)?;
        let mut ctxs = Vec::new();
        let mut alphas = Vec::new();
        for (feats, head) in enc.scales.iter().zip(&d.heads) {
            let (c, a) = head.attend(b, feats, h)?;
            ctxs.push(c);
            alphas.push(a);
        }
        let context = concat(&ctxs, 1)?;
        let hidden = d.gru.forward(b, &concat(&[emb, context], 1)?, h)?;
        let logits = d.out.forward(b, &concat(&[hidden, context, emb], 1)?)?;
        Ok(StepOutput { log_probs: logits.log_softmax()?, hidden, context, alphas })
    }

    /// Per-step log-probabilities `[B, V]` under teacher forcing.
    pub fn teacher_forced<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        enc: &Encoded<'t, T>,
        batch: &TargetBatch,
    ) -> Result<Vec<Var<'t, T>>> {
        if batch.batch_size() != enc.h0.shape()[0] {
            return Err(ModelError::LengthMismatch(format!("{} targets for {} images", batch.batch_size(), enc.h0.shape()[0])));
        }
        let mut h = enc.h0;
        let mut out = Vec::with_capacity(batch.steps());
        for prev in &batch.inputs {
            let step = self.decode_step(b, enc, &h, prev)?;
            h = step.hidden;
            out.push(step.log_probs);
        }
        Ok(out)
    }

    /// Task loss for images `[B, 1, H, W]` and unpadded token-id sequences.
    pub fn loss<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>, sequences: &[Vec<usize>]) -> Result<Var<'t, T>> {
        let batch = TargetBatch::new(sequences)?;
        let enc = self.encode(b, x)?;
        let lp = self.teacher_forced(b, &enc, &batch)?;
        task_loss(&lp, &batch.targets)
    }

    /// Task loss on a padded batch, attending only inside each image's unpadded area.
    pub fn loss_sized<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        x: &Var<'t, T>,
        sizes: &[(usize, usize)],
        sequences: &[Vec<usize>],
    ) -> Result<Var<'t, T>> {
        let batch = TargetBatch::new(sequences)?;
        let enc = self.encode_sized(b, x, sizes)?;
        let lp = self.teacher_forced(b, &enc, &batch)?;
        task_loss(&lp, &batch.targets)
    }

    /// Step-by-step decoding handle for one image, eval mode.
    pub fn decoder_for<'m>(&'m self, store: &'m ParamStore<f32>, image: &GrayImage) -> Result<ImageDecoder<'m>> {
        let tape = Tape::new();
        let b = Binder::with_trainable(&tape, store, Mode::Eval, false);
        let x = tape.constant(image_batch(std::slice::from_ref(image))?);
        let enc = self.encode(&b, &x)?;
        let scales = enc.scales.iter().map(|s| ((*s.values.value()).clone(), (*s.keys.value()).clone())).collect();
        let h0 = (*enc.h0.value()).clone();
        Ok(ImageDecoder { model: self, store, scales, h0 })
    }

    /// Beam-search decoding of one image; `beam_size = 1` is greedy.
    pub fn recognize(&self, store: &ParamStore<f32>, image: &GrayImage, beam_size: usize) -> Result<BeamHypothesis> {
        let dec = self.decoder_for(store, image)?;
        let cfg = SearchConfig::new(beam_size, self.config.max_len, Vocabulary::SOS, Vocabulary::EOS)
            .with_banned(vec![Vocabulary::PAD, Vocabulary::SOS]);
        beam_search(&dec, &cfg)
    }

    /// Log-probability of each target token (ids + EOS) under teacher forcing, eval mode.
    pub fn target_log_probs(&self, store: &ParamStore<f32>, image: &GrayImage, ids: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let b = Binder::with_trainable(&tape, store, Mode::Eval, false);
        let x = tape.constant(image_batch(std::slice::from_ref(image))?);
        let enc = self.encode(&b, &x)?;
        let batch = TargetBatch::new(&[ids.to_vec()])?;
        let lp = self.teacher_forced(&b, &enc, &batch)?;
        Ok(lp
            .iter()
            .zip(&batch.targets)
            .map(|(l, t)| l.value().data()[t[0]].to_f64_lossy())
            .collect())
    }
}

/// Caches one image's encoding and runs decoder steps on fresh tapes.
pub struct ImageDecoder<'m> {
    model: &'m Recognizer,
    store: &'m ParamStore<f32>,
    scales: Vec<(Tensor<f32>, Tensor<f32>)>,
    h0: Tensor<f32>,
}

impl StepModel for ImageDecoder<'_> {
    type State = Tensor<f32>;

    fn initial(&self) -> Tensor<f32> {
        self.h0.clone()
    }

    fn step(&self, state: &Tensor<f32>, token: usize) -> Result<(Vec<f64>, Tensor<f32>)> {
        let tape = Tape::new();
        let b = Binder::with_trainable(&tape, self.store, Mode::Eval, false);
        let enc = Encoded {
            scales: self
                .scales
                .iter()
                .map(|(v, k)| ScaleFeatures::new(tape.constant(v.clone()), tape.constant(k.clone())))
                .collect(),
            h0: tape.constant(self.h0.clone()),
        };
        let h = tape.constant(state.clone());
        let out = self.model.decode_step(&b, &enc, &h, &[token])?;
        let lp = out.log_probs.value().to_f64_vec();
        Ok((lp, (*out.hidden.value()).clone()))
    }
}

const MASKED: f64 = -1e4;

/// Attention bias `[B, L]` and pooling weights `[B, 1, L]` for a padded
/// `map_h x map_w` feature map, or `None` when nothing is padded.
fn padding_mask<T: Real>(
    enc: &DenseNetConfig,
    block: usize,
    sizes: &[(usize, usize)],
    map_h: usize,
    map_w: usize,
) -> Result<Option<(Tensor<T>, Tensor<T>)>> {
    let valid: Vec<(usize, usize)> = sizes
        .iter()
        .map(|&(h, w)| {
            let (vh, vw) = enc.dims_after_block(block, h, w);
            (vh.clamp(1, map_h), vw.clamp(1, map_w))
        })
        .collect();
    if valid.iter().all(|&v| v == (map_h, map_w)) {
        return Ok(None);
    }
    let l = map_h * map_w;
    let mut bias = Vec::with_capacity(sizes.len() * l);
    let mut weights = Vec::with_capacity(sizes.len() * l);
    for &(vh, vw) in &valid {
        let share = 1.0 / (vh * vw) as f64;
        for r in 0..map_h {
            for c in 0..map_w {
                let inside = r < vh && c < vw;
                bias.push(T::from_f64_lossy(if inside { 0.0 } else { MASKED }));
                weights.push(T::from_f64_lossy(if inside { share } else { 0.0 }));
            }
        }
    }
    Ok(Some((Tensor::new(&[sizes.len(), l], bias)?, Tensor::new(&[sizes.len(), 1, l], weights)?)))
}

/// `[B, 1, H, W]` from equally sized images.
pub fn image_batch<T: Real>(images: &[GrayImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(ModelError::EmptyBatch)?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(ModelError::ShapeMismatch(format!(
                "image {}x{} in a batch of {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        data.extend(img.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Tensor::new(&[images.len(), 1, h, w], data)?)
}

/// `Σ_t Σ_b −log p_t[b, target]` over non-PAD targets, divided by the batch size.
pub fn task_loss<'t, T: Real>(log_probs: &[Var<'t, T>], targets: &[Vec<usize>]) -> Result<Var<'t, T>> {
    if log_probs.len() != targets.len() {
        return Err(ModelError::LengthMismatch(format!("{} predictions for {} targets", log_probs.len(), targets.len())));
    }
    let first = log_probs.first().ok_or(ModelError::EmptyBatch)?;
    let tape = first.tape();
    let bs = first.shape()[0];
    let mut total: Option<Var<'t, T>> = None;
    for (lp, tgt) in log_probs.iter().zip(targets) {
        if tgt.len() != bs || lp.shape().len() != 2 || lp.shape()[0] != bs {
            return Err(ModelError::LengthMismatch(format!("step with {:?} log-probs and {} targets", lp.shape(), tgt.len())));
        }
        let mask: Vec<T> = tgt.iter().map(|&t| if t == Vocabulary::PAD { T::zero() } else { T::one() }).collect();
        let picked = lp.gather_rows(tgt)?.mul(&tape.constant(Tensor::new(&[bs], mask)?))?.sum_all();
        total = Some(match total {
            Some(acc) => acc.add(&picked)?,
            None => picked,
        });
    }
    let total = total.expect("non-empty");
    Ok(total.neg().mul_scalar(T::one() / T::from_f64_lossy(bs as f64)))
}

/// Task loss of explicit per-step distributions for one sequence.
pub fn task_loss_from_probs(preds: &[Vec<f64>], truth: &[usize]) -> Result<f64> {
    if preds.len() != truth.len() {
        return Err(ModelError::LengthMismatch(format!("{} predictions for {} targets", preds.len(), truth.len())));
    }
    let mut loss = 0.0;
    for (p, &t) in preds.iter().zip(truth) {
        if t == Vocabulary::PAD {
            continue;
        }
        let q = *p.get(t).ok_or_else(|| ModelError::LengthMismatch(format!("target {t} outside {} classes", p.len())))?;
        loss -= q.ln();
    }
    Ok(loss)
}

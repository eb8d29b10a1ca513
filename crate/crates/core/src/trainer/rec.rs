use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use formula_tensor::{Adam, Binder, Mode, Optimizer, ParamStore, Sgd, Tape};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{image_sizes, pad_batch, Result, Sample, TrainError};
use crate::checkpoint::Checkpoint;
use crate::corpus::Vocabulary;
use crate::image::transform::scaled_width;
use crate::image::{resize_bilinear, Font, GrayImage, RenderParams, RendererBackend, StubRenderer};
use crate::recognizer::{Recognizer, RecognizerConfig};

/// Model-kind tag of recognizer checkpoints.
pub const REC_KIND: &str = "formula-recognizer";

/// How images are scaled before recognition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalizeMode {
    /// Fixed height (`input_height`, 128 by default).
    #[serde(rename = "height-128")]
    Height128,
    /// Height of the formula rendered at `symbol_font_size`.
    #[serde(rename = "symbol-height")]
    SymbolHeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecTrainConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: usize,
    pub clip_norm: Option<f64>,
    pub normalize_mode: NormalizeMode,
    pub input_height: usize,
    pub symbol_font_size: u32,
    /// Wider images (after scaling) are dropped.
    pub max_width: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Sampling weight per dataset; empty means equal weights.
    pub mix_weights: Vec<f64>,
    /// Beam width for validation decoding.
    pub beam_size: usize,
    /// Stop once validation ExpRate reaches this percentage.
    pub stop_at_exprate: Option<f64>,
    pub seed: u64,
    /// `vocab_size` is filled in from the vocabulary.
    pub model: RecognizerConfig,
}

impl Default for RecTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 6,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            lr: 1e-4,
            lr_decay_factor: 10.0,
            plateau_patience: 3,
            clip_norm: None,
            normalize_mode: NormalizeMode::Height128,
            input_height: 128,
            symbol_font_size: 32,
            max_width: 2048,
            epochs: 20,
            steps_per_epoch: 1000,
            mix_weights: Vec::new(),
            beam_size: 10,
            stop_at_exprate: None,
            seed: 0,
            model: RecognizerConfig::large(0),
        }
    }
}

impl RecTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lr_decay_factor > 0.0) {
            return Err(TrainError::Config("lr must be non-negative and lr_decay_factor positive".into()));
        }
        if self.batch_size == 0 || self.input_height == 0 || self.beam_size == 0 || self.plateau_patience == 0 {
            return Err(TrainError::Config("batch_size, input_height, beam_size and plateau_patience must be positive".into()));
        }
        Ok(())
    }
}

/// Weighted choice of a dataset index.
#[derive(Debug, Clone, PartialEq)]
pub struct MixSampler {
    cumulative: Vec<f64>,
}

impl MixSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(TrainError::Config(format!("mix weights must be non-negative and finite: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(TrainError::Config("mix weights sum to zero".into()));
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Ok(Self { cumulative })
    }

    pub fn equal(n: usize) -> Result<Self> {
        Self::new(&vec![1.0; n])
    }

    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cumulative.iter().position(|&c| u < c).unwrap_or(self.cumulative.len() - 1)
    }
}

/// Divides the learning rate by `factor` after `patience` epochs without
/// improvement, then starts counting again.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self { patience, factor, best: None, stale: 0 }
    }

    /// Records a higher-is-better metric; returns whether the rate was reduced.
    pub fn observe(&mut self, metric: f64, opt: &mut dyn Optimizer<f32>) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            opt.set_learning_rate(opt.learning_rate() / self.factor);
            self.stale = 0;
            return true;
        }
        false
    }
}

/// Images scaled for recognition, paired with their labels.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub items: Vec<(Sample, GrayImage)>,
    pub dropped: usize,
}

impl PreparedSet {
    pub fn new(samples: &[Sample], cfg: &RecTrainConfig) -> Self {
        let mut items = Vec::new();
        let mut dropped = 0;
        for s in samples {
            let h = target_height(s, cfg);
            let w = scaled_width(s.image.height(), s.image.width(), h);
            if w > cfg.max_width {
                dropped += 1;
                continue;
            }
            items.push((s.clone(), resize_bilinear(&s.image, h, w)));
        }
        Self { items, dropped }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn target_height(s: &Sample, cfg: &RecTrainConfig) -> usize {
    match cfg.normalize_mode {
        NormalizeMode::Height128 => cfg.input_height,
        NormalizeMode::SymbolHeight => RenderParams::new(Font::MathRm, 0, cfg.symbol_font_size)
            .and_then(|p| StubRenderer.render(&s.latex, &p))
            .map(|img| img.height())
            .unwrap_or(cfg.input_height),
    }
}

/// Percentage of samples whose decoded ids equal the reference ids.
pub fn evaluate_exprate(model: &Recognizer, store: &ParamStore<f32>, set: &PreparedSet, beam_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(TrainError::EmptyDataset("validation set".into()));
    }
    let mut hits = 0usize;
    for (s, img) in &set.items {
        if model.recognize(store, img, beam_size)?.body() == s.ids.as_slice() {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub val_exprate: f64,
    /// Learning rate in effect after this epoch's scheduler update.
    pub lr: f64,
    pub lr_reduced: bool,
}

pub struct RecTrainOutcome {
    pub model: Recognizer,
    pub store: ParamStore<f32>,
    pub best_store: ParamStore<f32>,
    pub best_exprate: f64,
    pub epochs: Vec<EpochLog>,
    pub losses: Vec<f64>,
}

/// Trains a recognizer on a weighted mix of datasets, validating after
/// every epoch. With `out_dir`, writes `metrics.csv` (`step,loss,lr`),
/// `epochs.csv` and `best.ckpt`.
pub fn train_recognizer(
    sources: &[Vec<Sample>],
    validation: &[Sample],
    vocab: &Vocabulary,
    cfg: &RecTrainConfig,
    out_dir: Option<&Path>,
) -> Result<RecTrainOutcome> {
    cfg.validate()?;
    let sets: Vec<PreparedSet> = sources.iter().map(|s| PreparedSet::new(s, cfg)).collect();
    if sets.is_empty() || sets.iter().any(|s| s.is_empty()) {
        return Err(TrainError::EmptyDataset("every training source needs at least one usable image".into()));
    }
    let val = PreparedSet::new(validation, cfg);
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation set".into()));
    }
    let sampler = if cfg.mix_weights.is_empty() {
        MixSampler::equal(sets.len())?
    } else if cfg.mix_weights.len() == sets.len() {
        MixSampler::new(&cfg.mix_weights)?
    } else {
        return Err(TrainError::Config(format!("{} mix weights for {} datasets", cfg.mix_weights.len(), sets.len())));
    };
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    let model = Recognizer::new(model_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store: ParamStore<f32> = model.init(&mut rng);
    let mut opt: Box<dyn Optimizer<f32>> = match cfg.optimizer {
        OptimizerKind::Sgd => {
            let sgd = Sgd::new(cfg.lr, cfg.momentum);
            Box::new(match cfg.clip_norm {
                Some(c) => sgd.with_clip_norm(c),
                None => sgd,
            })
        }
        OptimizerKind::Adam => Box::new(Adam::new(cfg.lr, 0.9, 0.999)),
    };
    let mut sched = PlateauScheduler::new(cfg.plateau_patience, cfg.lr_decay_factor);
    let mut logs = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut m = BufWriter::new(File::create(dir.join("metrics.csv"))?);
            writeln!(m, "step,loss,lr")?;
            let mut e = BufWriter::new(File::create(dir.join("epochs.csv"))?);
            writeln!(e, "epoch,steps,mean_loss,val_exprate,lr,lr_reduced")?;
            Some((m, e))
        }
        None => None,
    };
    let mut best_store = store.clone();
    let mut best_exprate = f64::NEG_INFINITY;
    let mut epochs = Vec::new();
    let mut losses = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let mut images = Vec::with_capacity(cfg.batch_size);
            let mut seqs = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let (s, img) = sets[sampler.pick(&mut rng)].items.choose(&mut rng).expect("non-empty set");
                images.push(img.clone());
                seqs.push(s.ids.clone());
            }
            let x = pad_batch::<f32>(&images, 1)?;
            let sizes = image_sizes(&images);
            let (loss, grads, updates) = {
                let tape = Tape::new();
                let b = Binder::new(&tape, &store, Mode::Train);
                let loss = model.loss_sized(&b, &tape.constant(x), &sizes, &seqs)?;
                let grads = b.gradients(loss)?;
                (loss.item() as f64, grads, b.into_updates())
            };
            step += 1;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteRecLoss(step));
            }
            opt.step(&mut store, &grads)?;
            store.apply_buffer_updates(updates)?;
            epoch_loss += loss;
            losses.push(loss);
            if let Some((m, _)) = logs.as_mut() {
                writeln!(m, "{step},{loss},{}", opt.learning_rate())?;
            }
        }
        let val_exprate = evaluate_exprate(&model, &store, &val, cfg.beam_size)?;
        let lr_reduced = sched.observe(val_exprate, opt.as_mut());
        let log = EpochLog {
            epoch,
            steps: step,
            mean_loss: epoch_loss / cfg.steps_per_epoch.max(1) as f64,
            val_exprate,
            lr: opt.learning_rate(),
            lr_reduced,
        };
        if let Some((_, e)) = logs.as_mut() {
            writeln!(e, "{},{},{},{},{},{}", log.epoch, log.steps, log.mean_loss, log.val_exprate, log.lr, log.lr_reduced)?;
            e.flush()?;
        }
        epochs.push(log);
        if val_exprate > best_exprate {
            best_exprate = val_exprate;
            best_store = store.clone();
            if let Some(dir) = out_dir {
                recognizer_checkpoint(&model, &best_store, vocab, epoch, val_exprate)?.save(&dir.join("best.ckpt"))?;
            }
        }
        if cfg.stop_at_exprate.is_some_and(|t| val_exprate >= t) {
            break;
        }
    }
    if let Some((mut m, mut e)) = logs {
        m.flush()?;
        e.flush()?;
    }
    Ok(RecTrainOutcome { model, store, best_store, best_exprate, epochs, losses })
}

/// Recognizer checkpoint with the vocabulary stored in its metadata.
pub fn recognizer_checkpoint(
    model: &Recognizer,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    epoch: usize,
    exprate: f64,
) -> Result<Checkpoint> {
    Ok(Checkpoint::new(REC_KIND, &model.config)?
        .with_section("recognizer", store.clone())
        .with_meta(serde_json::json!({ "vocab": vocab.to_text(), "epoch": epoch, "val_exprate": exprate })))
}

/// Loads a recognizer checkpoint and its vocabulary.
pub fn load_recognizer(ckpt: &Checkpoint) -> Result<(Recognizer, ParamStore<f32>, Vocabulary)> {
    ckpt.check_kind(REC_KIND)?;
    let model = Recognizer::new(ckpt.config_as()?)?;
    let store = ckpt.section("recognizer")?.clone();
    super::synth::check_layout(&model.init(&mut ChaCha8Rng::seed_from_u64(0)), &store)?;
    let text = ckpt.meta.get("vocab").and_then(|v| v.as_str()).ok_or_else(|| TrainError::CheckpointMismatch("no vocabulary".into()))?;
    Ok((model, store, Vocabulary::from_text(text)?))
}

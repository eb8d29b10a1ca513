//! GAN training, bulk synthesis and recognizer training.

mod gan_loop;
mod rec;
mod synth;

pub use gan_loop::{GanBatch, GanData, GanTrainConfig, GanTrainer, StepReport, GAN_KIND};
pub use rec::{
    evaluate_exprate, load_recognizer, recognizer_checkpoint, train_recognizer, EpochLog, MixSampler, NormalizeMode, OptimizerKind, PlateauScheduler,
    PreparedSet, RecTrainConfig, RecTrainOutcome, REC_KIND,
};
pub use synth::{within_area, Synthesizer, SynthesisConfig, SynthesisReport};

use std::path::Path;

use formula_tensor::{Real, Tensor};
use rand::Rng;

use crate::checkpoint::CheckpointError;
use crate::corpus::{CorpusError, DomainLabel, FormulaRecord, Vocabulary};
use crate::gan::GanLosses;
use crate::image::strokes::{pseudo_handwriting, HandStyle};
use crate::image::{normalize_intensity, rasterize_strokes, read_manifest, sample_render_params, GrayImage, ImageError, RenderParams, RendererBackend};
use crate::nn::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] formula_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("non-finite loss at step {step}: {losses:?}")]
    NonFiniteLoss { step: usize, losses: GanLosses },
    #[error("non-finite recognizer loss at step {0}")]
    NonFiniteRecLoss(usize),
    #[error("task model parameters changed outside the discriminator phase at step {0}")]
    TaskTouchedInGeneratorPhase(usize),
    #[error("checkpoint does not fit the model: {0}")]
    CheckpointMismatch(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// A labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub latex: String,
    /// Token ids without start/end markers.
    pub ids: Vec<usize>,
    pub domain: DomainLabel,
    /// Intensity-normalized image at its native size.
    pub image: GrayImage,
}

/// Renders and normalizes each record; records the renderer rejects are skipped.
pub fn render_samples<R: Rng + ?Sized>(
    records: &[FormulaRecord],
    vocab: &Vocabulary,
    renderer: &dyn RendererBackend,
    sample_fonts: bool,
    rng: &mut R,
) -> Vec<Sample> {
    records
        .iter()
        .filter_map(|r| {
            let params = if sample_fonts { sample_render_params(rng) } else { RenderParams::default() };
            let img = renderer.render(&r.source_latex, &params).ok()?;
            Some(Sample {
                id: r.id.clone(),
                latex: r.source_latex.clone(),
                ids: vocab.encode(&r.tokens),
                domain: r.domain,
                image: normalize_intensity(&img),
            })
        })
        .collect()
}

/// Traced-stroke imitations of handwriting at `height` pixels, labeled
/// handwritten. Records the stroke generator cannot lay out are skipped.
pub fn pseudo_handwritten_samples<R: Rng + ?Sized>(
    records: &[FormulaRecord],
    vocab: &Vocabulary,
    height: usize,
    rng: &mut R,
) -> Vec<Sample> {
    let style = HandStyle::default();
    records
        .iter()
        .filter_map(|r| {
            let strokes = pseudo_handwriting(&r.source_latex, &style, rng).ok()?;
            let img = rasterize_strokes(&strokes, height, None).ok()?;
            Some(Sample {
                id: r.id.clone(),
                latex: r.source_latex.clone(),
                ids: vocab.encode(&r.tokens),
                domain: DomainLabel::Handwritten,
                image: normalize_intensity(&img),
            })
        })
        .collect()
}

/// Loads a dataset directory written by [`crate::image::write_manifest`].
pub fn load_samples(dir: &Path) -> Result<(Vec<Sample>, Vocabulary)> {
    let (records, vocab) = read_manifest(dir, true)?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let rel = r.image_path.clone().ok_or_else(|| TrainError::EmptyDataset(format!("record {} has no image", r.id)))?;
        let image = normalize_intensity(&GrayImage::load_png(&dir.join(rel))?);
        out.push(Sample { ids: vocab.encode(&r.tokens), id: r.id, latex: r.source_latex, domain: r.domain, image });
    }
    Ok((out, vocab))
}

/// Re-encodes sample ids from one vocabulary into another by token text.
pub fn remap_ids(samples: &mut [Sample], from: &Vocabulary, to: &Vocabulary) {
    for s in samples {
        s.ids = s
            .ids
            .iter()
            .map(|&i| from.id_to_token(i).and_then(|t| to.token_to_id(t)).unwrap_or(Vocabulary::UNK))
            .collect();
    }
}

/// `[B, 1, H, W]`, padded with background at the bottom and right to the
/// largest height and width, each rounded up to a multiple of `multiple`.
pub fn pad_batch<T: Real>(images: &[GrayImage], multiple: usize) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(TrainError::EmptyDataset("empty batch".into()));
    }
    let m = multiple.max(1);
    let h = images.iter().map(|i| i.height()).max().unwrap_or(1).div_ceil(m) * m;
    let w = images.iter().map(|i| i.width()).max().unwrap_or(1).div_ceil(m) * m;
    let mut data = vec![T::zero(); images.len() * h * w];
    for (bi, img) in images.iter().enumerate() {
        for r in 0..img.height() {
            let dst = &mut data[(bi * h + r) * w..(bi * h + r) * w + img.width()];
            for (d, s) in dst.iter_mut().zip(&img.data()[r * img.width()..(r + 1) * img.width()]) {
                *d = T::from_f64_lossy(*s as f64);
            }
        }
    }
    Ok(Tensor::new(&[images.len(), 1, h, w], data)?)
}

/// Unpadded `(height, width)` of each image in a batch.
pub fn image_sizes(images: &[GrayImage]) -> Vec<(usize, usize)> {
    images.iter().map(|i| (i.height(), i.width())).collect()
}

/// First `h × w` pixels of sample `index` in a `[B, 1, H, W]` tensor.
pub fn crop_image(t: &Tensor<f32>, index: usize, height: usize, width: usize) -> Result<GrayImage> {
    let s = t.shape();
    let (hh, ww) = (s[2], s[3]);
    let base = index * hh * ww;
    Ok(GrayImage::from_vec_clamped(
        height,
        width,
        (0..height).flat_map(|r| t.data()[base + r * ww..base + r * ww + width].to_vec()).collect(),
    )?)
}

use std::path::PathBuf;

use formula_tensor::{Binder, Mode, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gan_loop::{GanTrainConfig, GanTrainer, GAN_KIND};
use super::{crop_image, pad_batch, Result, TrainError};
use crate::checkpoint::Checkpoint;
use crate::corpus::{DomainLabel, FormulaRecord, Vocabulary};
use crate::gan::{sample_latent, Generator};
use crate::image::transform::scaled_width;
use crate::image::{
    normalize_intensity, resize_bilinear, sample_render_params, write_manifest, GrayImage, RenderParams, RendererBackend,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Images are kept only if `height × width` is strictly below this.
    pub max_pixel_area: usize,
    /// Sample font and size per formula; otherwise use the default render parameters.
    pub sample_fonts: bool,
    pub output_dir: PathBuf,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { max_pixel_area: 640_000, sample_fonts: true, output_dir: PathBuf::from("synth") }
    }
}

/// The strict area filter.
pub fn within_area(height: usize, width: usize, max_pixel_area: usize) -> bool {
    height * width < max_pixel_area
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub written: usize,
    pub skipped_area: usize,
    pub render_failures: usize,
}

/// A frozen generator loaded from a GAN checkpoint.
pub struct Synthesizer {
    pub config: GanTrainConfig,
    pub generator: Generator,
    pub store: ParamStore<f32>,
}

impl Synthesizer {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.check_kind(GAN_KIND)?;
        let config: GanTrainConfig = ckpt.config_as()?;
        let generator = Generator::new(config.generator.clone())?;
        let store = ckpt.section("generator")?.clone();
        check_layout(&generator.init(&mut ChaCha8Rng::seed_from_u64(0)), &store)?;
        Ok(Self { config, generator, store })
    }

    /// Freezes the trainer's current generator.
    pub fn from_trainer(trainer: &GanTrainer) -> Self {
        Self { config: trainer.config.clone(), generator: trainer.generator.clone(), store: trainer.g.clone() }
    }

    /// Scales a normalized image to the generator's input height.
    pub fn input_image(&self, image: &GrayImage) -> GrayImage {
        let h = self.config.input_height;
        resize_bilinear(image, h, scaled_width(image.height(), image.width(), h))
    }

    /// Translates images (already at input height) to `target`, eval mode.
    pub fn translate<R: Rng + ?Sized>(&self, images: &[GrayImage], target: DomainLabel, rng: &mut R) -> Result<Vec<GrayImage>> {
        let m = self.config.spatial_multiple();
        let x = pad_batch::<f32>(images, m)?;
        let z = sample_latent::<f32, _>(images.len(), self.config.generator.z_dim, rng);
        let tape = Tape::new();
        let b = Binder::with_trainable(&tape, &self.store, Mode::Eval, false);
        let y = self.generator.forward(&b, &tape.constant(x), &tape.constant(z), &vec![target; images.len()])?;
        let y = y.value();
        images
            .iter()
            .enumerate()
            .map(|(i, img)| Ok(normalize_intensity(&crop_image(&y, i, img.height(), img.width())?)))
            .collect()
    }

    /// Renders, scales and translates each record to the handwritten domain,
    /// keeping the results in memory. Records get the handwritten label.
    pub fn synthesize_records<R: Rng + ?Sized>(
        &self,
        corpus: &[FormulaRecord],
        renderer: &dyn RendererBackend,
        cfg: &SynthesisConfig,
        rng: &mut R,
    ) -> Result<(Vec<(FormulaRecord, GrayImage)>, SynthesisReport)> {
        if cfg.max_pixel_area == 0 {
            return Err(TrainError::Config("max_pixel_area must be positive".into()));
        }
        let mut report = SynthesisReport::default();
        let mut out = Vec::new();
        for r in corpus {
            let params = if cfg.sample_fonts { sample_render_params(rng) } else { RenderParams::default() };
            let Ok(img) = renderer.render(&r.source_latex, &params) else {
                report.render_failures += 1;
                continue;
            };
            let h = self.config.input_height;
            let w = scaled_width(img.height(), img.width(), h);
            if !within_area(h, w, cfg.max_pixel_area) {
                report.skipped_area += 1;
                continue;
            }
            let input = resize_bilinear(&normalize_intensity(&img), h, w);
            let image = self.translate(std::slice::from_ref(&input), DomainLabel::Handwritten, rng)?.remove(0);
            let mut rec = r.clone();
            rec.domain = DomainLabel::Handwritten;
            out.push((rec, image));
            report.written += 1;
        }
        Ok((out, report))
    }

    /// [`Self::synthesize_records`], writing `<id>.png` files and a manifest
    /// into `cfg.output_dir`.
    pub fn synthesize_dataset<R: Rng + ?Sized>(
        &self,
        corpus: &[FormulaRecord],
        vocab: &Vocabulary,
        renderer: &dyn RendererBackend,
        cfg: &SynthesisConfig,
        rng: &mut R,
    ) -> Result<SynthesisReport> {
        let (items, report) = self.synthesize_records(corpus, renderer, cfg, rng)?;
        std::fs::create_dir_all(&cfg.output_dir)?;
        let mut records = Vec::with_capacity(items.len());
        for (rec, image) in items {
            let file = format!("{}.png", sanitize(&rec.id));
            image.save_png(&cfg.output_dir.join(&file))?;
            records.push(rec.with_image(file));
        }
        write_manifest(&cfg.output_dir, &records, vocab)?;
        Ok(report)
    }
}

/// Parameter names and shapes of `store` must match `expected`.
pub(crate) fn check_layout(expected: &ParamStore<f32>, store: &ParamStore<f32>) -> Result<()> {
    let names = expected.param_names();
    if names != store.param_names() {
        return Err(TrainError::CheckpointMismatch("parameter names differ from the model config".into()));
    }
    for n in names {
        if expected.param(&n)?.shape() != store.param(&n)?.shape() {
            return Err(TrainError::CheckpointMismatch(format!("parameter {n} has the wrong shape for the model config")));
        }
    }
    Ok(())
}

/// File-name-safe form of a record id.
pub(crate) fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

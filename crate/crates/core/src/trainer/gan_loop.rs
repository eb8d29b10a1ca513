use std::io::Write;

use formula_tensor::{Adam, Binder, Mode, Optimizer, ParamStore, Tape, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{image_sizes, pad_batch, Result, Sample, TrainError};
use crate::checkpoint::Checkpoint;
use crate::corpus::DomainLabel;
use crate::gan::{
    combine_losses, hinge_d, hinge_g, sample_latent, Discriminator, DiscriminatorConfig, GanLosses, Generator,
    GeneratorConfig,
};
use crate::image::{augment_random, resize_for_training, AugmentRanges, GrayImage};
use crate::recognizer::{Recognizer, RecognizerConfig};

/// Model-kind tag of GAN checkpoints.
pub const GAN_KIND: &str = "formula-gan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    pub lr_d: f64,
    pub lr_g: f64,
    /// Task model learning rate (updated with the discriminator).
    pub lr_t: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    /// Sources come from both domains and are translated to the other one.
    pub bidirectional: bool,
    /// Draw the target domain at random, possibly equal to the source.
    pub swap_target: bool,
    /// Only rendered images are used as generator inputs.
    pub no_handwritten_source: bool,
    /// Whether λ·L_T enters the discriminator-phase objective (and so trains T).
    pub task_in_d_phase: bool,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub input_height: usize,
    pub max_width: usize,
    pub max_tokens: usize,
    pub augment_rendered: bool,
    pub augment_handwritten: bool,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// `vocab_size` is filled in from the data.
    pub task: RecognizerConfig,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            lr_d: 2e-4,
            lr_g: 5e-5,
            lr_t: 2e-4,
            beta1: 0.0,
            beta2: 0.9,
            lambda: 1.0,
            bidirectional: true,
            swap_target: false,
            no_handwritten_source: false,
            task_in_d_phase: true,
            max_iterations: 10_000,
            batch_size: 8,
            input_height: 128,
            max_width: 512,
            max_tokens: 50,
            augment_rendered: true,
            augment_handwritten: true,
            seed: 0,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            task: RecognizerConfig::small(0),
        }
    }
}

impl GanTrainConfig {
    /// Desk-scale preset: 32-pixel inputs, tiny networks.
    pub fn tiny() -> Self {
        Self {
            batch_size: 2,
            input_height: 32,
            max_width: 96,
            generator: GeneratorConfig::tiny(),
            discriminator: DiscriminatorConfig::tiny(),
            task: RecognizerConfig::tiny(0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_d", self.lr_d), ("lr_g", self.lr_g), ("lr_t", self.lr_t)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(TrainError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.input_height == 0 || self.max_width == 0 || self.max_tokens == 0 {
            return Err(TrainError::Config("batch_size, input_height, max_width and max_tokens must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("adam betas must lie in [0, 1)".into()));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        let f = self.spatial_multiple();
        if self.input_height % f != 0 {
            return Err(TrainError::Config(format!("input_height {} must be a multiple of {f}", self.input_height)));
        }
        Ok(())
    }

    /// Batch widths and heights are padded to multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        self.generator.spatial_factor().max(1 << self.discriminator.channels.len())
    }
}

/// Training images of both domains, filtered and resized once.
#[derive(Debug, Clone)]
pub struct GanData {
    pub rendered: Vec<(Sample, GrayImage)>,
    pub handwritten: Vec<(Sample, GrayImage)>,
    /// Samples dropped by the token or width filter.
    pub rejected: usize,
}

impl GanData {
    /// Keeps samples with at most `max_tokens` tokens whose image, scaled to
    /// `input_height`, is at most `max_width` wide.
    pub fn new(samples: Vec<Sample>, cfg: &GanTrainConfig) -> Result<Self> {
        let mut data = Self { rendered: Vec::new(), handwritten: Vec::new(), rejected: 0 };
        for s in samples {
            let resized = if s.ids.len() <= cfg.max_tokens {
                resize_for_training(&s.image, cfg.input_height, cfg.max_width).accepted()
            } else {
                None
            };
            match resized {
                Some(img) => match s.domain {
                    DomainLabel::Rendered => data.rendered.push((s, img)),
                    DomainLabel::Handwritten => data.handwritten.push((s, img)),
                },
                None => data.rejected += 1,
            }
        }
        if data.rendered.is_empty() || data.handwritten.is_empty() {
            return Err(TrainError::EmptyDataset(format!(
                "GAN training needs both domains ({} rendered, {} handwritten after filtering)",
                data.rendered.len(),
                data.handwritten.len()
            )));
        }
        Ok(data)
    }

    fn pool(&self, d: DomainLabel) -> &[(Sample, GrayImage)] {
        match d {
            DomainLabel::Rendered => &self.rendered,
            DomainLabel::Handwritten => &self.handwritten,
        }
    }
}

/// One step's inputs.
#[derive(Debug, Clone)]
pub struct GanBatch {
    pub sources: Vec<GrayImage>,
    pub source_ids: Vec<Vec<usize>>,
    pub source_domains: Vec<DomainLabel>,
    pub targets: Vec<DomainLabel>,
    /// Real images of the target domains, for D and T.
    pub real: Vec<GrayImage>,
    pub real_ids: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub losses: GanLosses,
    pub task_hash_before: u64,
    pub task_hash_after_d: u64,
    pub task_hash_after_g: u64,
}

/// Generator, discriminator and task model with their optimizers.
pub struct GanTrainer {
    pub config: GanTrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub task: Recognizer,
    pub g: ParamStore<f32>,
    pub d: ParamStore<f32>,
    pub t: ParamStore<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    opt_t: Adam<f32>,
    pub step: usize,
    rng: ChaCha8Rng,
    ranges: AugmentRanges,
}

fn gradients<'t>(tape: &'t Tape<f32>, root: Var<'t, f32>, groups: &[&Binder<'t, '_, f32>]) -> Result<Vec<Vec<(String, Tensor<f32>)>>> {
    let bound: Vec<Vec<(String, Var<'t, f32>)>> = groups.iter().map(|b| b.bound_params()).collect();
    let vars: Vec<Var<'t, f32>> = bound.iter().flatten().map(|(_, v)| *v).collect();
    let mut grads = tape.backward(root, &vars)?.into_iter();
    Ok(bound
        .into_iter()
        .map(|group| group.into_iter().map(|(k, _)| (k, grads.next().expect("one gradient per var"))).collect())
        .collect())
}

impl GanTrainer {
    pub fn new(mut config: GanTrainConfig, vocab_size: usize) -> Result<Self> {
        config.task.vocab_size = vocab_size;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(config.generator.clone())?;
        let discriminator = Discriminator::new(config.discriminator.clone())?;
        let task = Recognizer::new(config.task.clone())?;
        let g = generator.init(&mut rng);
        let d = discriminator.init(&mut rng);
        let t = task.init(&mut rng);
        Ok(Self {
            opt_g: Adam::new(config.lr_g, config.beta1, config.beta2),
            opt_d: Adam::new(config.lr_d, config.beta1, config.beta2),
            opt_t: Adam::new(config.lr_t, config.beta1, config.beta2),
            config,
            generator,
            discriminator,
            task,
            g,
            d,
            t,
            step: 0,
            rng,
            ranges: AugmentRanges::default(),
        })
    }

    fn prepared(&mut self, sample: &Sample, base: &GrayImage) -> GrayImage {
        let on = match sample.domain {
            DomainLabel::Rendered => self.config.augment_rendered,
            DomainLabel::Handwritten => self.config.augment_handwritten,
        };
        if !on {
            return base.clone();
        }
        let (aug, _) = augment_random(&sample.image, &self.ranges, &mut self.rng);
        resize_for_training(&aug, self.config.input_height, self.config.max_width)
            .accepted()
            .unwrap_or_else(|| base.clone())
    }

    /// Samples sources, target domains and real target-domain images.
    pub fn draw_batch(&mut self, data: &GanData) -> GanBatch {
        let cfg = &self.config;
        let (bidir, swap, no_hw) = (cfg.bidirectional, cfg.swap_target, cfg.no_handwritten_source);
        let mut batch = GanBatch {
            sources: Vec::new(),
            source_ids: Vec::new(),
            source_domains: Vec::new(),
            targets: Vec::new(),
            real: Vec::new(),
            real_ids: Vec::new(),
        };
        for _ in 0..cfg.batch_size {
            let src_domain = if bidir && !no_hw && self.rng.random_bool(0.5) {
                DomainLabel::Handwritten
            } else {
                DomainLabel::Rendered
            };
            let target = if swap {
                DomainLabel::ALL[self.rng.random_range(0..2)]
            } else {
                src_domain.opposite()
            };
            let (s, base) = data.pool(src_domain).choose(&mut self.rng).expect("non-empty pools");
            let img = self.prepared(s, base);
            batch.sources.push(img);
            batch.source_ids.push(s.ids.clone());
            batch.source_domains.push(src_domain);
            batch.targets.push(target);
            let (r, rbase) = data.pool(target).choose(&mut self.rng).expect("non-empty pools");
            let rimg = self.prepared(r, rbase);
            batch.real.push(rimg);
            batch.real_ids.push(r.ids.clone());
        }
        batch
    }

    /// One discriminator/task update on L_DT, then one generator update on L_GT.
    pub fn train_step(&mut self, data: &GanData) -> Result<StepReport> {
        let batch = self.draw_batch(data);
        let m = self.config.spatial_multiple();
        let x = pad_batch::<f32>(&batch.sources, m)?;
        let real = pad_batch::<f32>(&batch.real, m)?;
        let (src_sizes, real_sizes) = (image_sizes(&batch.sources), image_sizes(&batch.real));
        let z = sample_latent::<f32, _>(batch.sources.len(), self.config.generator.z_dim, &mut self.rng);
        let c = &batch.targets;
        let lambda = self.config.lambda;
        let update_t = lambda > 0.0 && self.config.task_in_d_phase;
        let task_hash_before = self.t.fingerprint();

        let (l_d, l_t, d_grads, t_grads, d_updates, t_updates) = {
            let tape = Tape::new();
            let gb = Binder::with_trainable(&tape, &self.g, Mode::Train, false);
            let db = Binder::new(&tape, &self.d, Mode::Train);
            let tb = Binder::with_trainable(&tape, &self.t, Mode::Train, update_t);
            let xv = tape.constant(x.clone());
            let zv = tape.constant(z.clone());
            let fake = self.generator.forward(&gb, &xv, &zv, c)?.detach();
            let realv = tape.constant(real);
            let s_real = self.discriminator.forward(&db, &realv, c)?;
            let s_fake = self.discriminator.forward(&db, &fake, c)?;
            let l_d = hinge_d(&s_real, &s_fake)?;
            let l_t_real = self.task.loss_sized(&tb, &realv, &real_sizes, &batch.real_ids)?;
            let l_t_fake = self.task.loss_sized(&tb, &fake, &src_sizes, &batch.source_ids)?;
            let l_t = l_t_real.add(&l_t_fake)?.mul_scalar(0.5);
            let objective = if update_t { l_d.add(&l_t.mul_scalar(lambda as f32))? } else { l_d };
            let (ld, lt) = (l_d.item() as f64, l_t.item() as f64);
            let mut grads = if update_t {
                gradients(&tape, objective, &[&db, &tb])?
            } else {
                gradients(&tape, objective, &[&db])?
            };
            let t_grads = if update_t { grads.pop().expect("task group") } else { Vec::new() };
            let d_grads = grads.pop().expect("discriminator group");
            (ld, lt, d_grads, t_grads, db.into_updates(), tb.into_updates())
        };
        self.opt_d.step(&mut self.d, &d_grads)?;
        self.d.apply_buffer_updates(d_updates)?;
        if update_t {
            self.opt_t.step(&mut self.t, &t_grads)?;
            self.t.apply_buffer_updates(t_updates)?;
        }
        let task_hash_after_d = self.t.fingerprint();

        let (l_g, g_grads, g_updates) = {
            let tape = Tape::new();
            let gb = Binder::new(&tape, &self.g, Mode::Train);
            let db = Binder::with_trainable(&tape, &self.d, Mode::Eval, false);
            let tb = Binder::with_trainable(&tape, &self.t, Mode::Train, false);
            let xv = tape.constant(x);
            let zv = tape.constant(z);
            let fake = self.generator.forward(&gb, &xv, &zv, c)?;
            let l_g = hinge_g(&self.discriminator.forward(&db, &fake, c)?)?;
            let objective = if lambda > 0.0 {
                l_g.add(&self.task.loss_sized(&tb, &fake, &src_sizes, &batch.source_ids)?.mul_scalar(lambda as f32))?
            } else {
                l_g
            };
            let lg = l_g.item() as f64;
            let grads = gradients(&tape, objective, &[&gb])?.pop().expect("generator group");
            (lg, grads, gb.into_updates())
        };
        self.opt_g.step(&mut self.g, &g_grads)?;
        self.g.apply_buffer_updates(g_updates)?;
        let task_hash_after_g = self.t.fingerprint();

        self.step += 1;
        let losses = combine_losses(l_d, l_g, l_t, lambda)?;
        if !losses.all_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step, losses });
        }
        if task_hash_after_g != task_hash_after_d {
            return Err(TrainError::TaskTouchedInGeneratorPhase(self.step));
        }
        Ok(StepReport { step: self.step, losses, task_hash_before, task_hash_after_d, task_hash_after_g })
    }

    /// Runs `iterations` steps, optionally logging CSV rows
    /// `step,l_d,l_g,l_t,l_dt,l_gt,lr`.
    pub fn train(&mut self, data: &GanData, iterations: usize, mut log: Option<&mut dyn Write>) -> Result<Vec<StepReport>> {
        let mut out = Vec::with_capacity(iterations);
        if self.step == 0 {
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "step,l_d,l_g,l_t,l_dt,l_gt,lr")?;
            }
        }
        for _ in 0..iterations {
            let r = self.train_step(data)?;
            if let Some(w) = log.as_deref_mut() {
                let l = r.losses;
                writeln!(w, "{},{},{},{},{},{},{}", r.step, l.l_d, l.l_g, l.l_t, l.l_dt, l.l_gt, self.opt_g.learning_rate())?;
            }
            out.push(r);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(GAN_KIND, &self.config)?
            .with_section("generator", self.g.clone())
            .with_section("discriminator", self.d.clone())
            .with_section("task", self.t.clone())
            .with_meta(serde_json::json!({ "step": self.step })))
    }
}

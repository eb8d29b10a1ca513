//! Perplexity, WER and ExpRate, the ablation harness and sample grids.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use formula_tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FormulaRecord, Token, Vocabulary, SPACING_COMMANDS};
use crate::image::{normalize_intensity, resize_bilinear, GrayImage, RenderParams, RendererBackend};
use crate::image::transform::scaled_width;
use crate::recognizer::Recognizer;
use crate::trainer::{
    train_recognizer, GanData, GanTrainConfig, GanTrainer, PreparedSet, RecTrainConfig, Sample, SynthesisConfig,
    Synthesizer, TrainError,
};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("no pairs to score")]
    EmptyList,
    #[error("log-probability {0} is not a finite non-positive number")]
    InvalidLogProb(f64),
    #[error("invalid ablation setup: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("prediction line {line}: {source}")]
    Prediction { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Token-level Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Percentage of `(reference, hypothesis)` pairs that match exactly.
pub fn exprate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let hits = pairs.iter().filter(|(r, h)| r == h).count();
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

/// Drops spacing commands from token texts.
pub fn normalize_texts<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| t.as_ref())
        .filter(|t| !SPACING_COMMANDS.contains(t))
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerplexityMode {
    /// Cross-entropy averaged over every token of the set.
    #[default]
    Corpus,
    /// Per-formula mean cross-entropy, averaged over formulas.
    PerFormula,
}

/// Teacher-forced log-probabilities of each target token (ids then EOS).
pub trait TokenScorer {
    fn target_log_probs(&self, image: &GrayImage, ids: &[usize]) -> Result<Vec<f64>>;
}

/// A trained recognizer with its parameters.
pub struct RecognizerScorer<'a> {
    pub model: &'a Recognizer,
    pub store: &'a ParamStore<f32>,
}

impl TokenScorer for RecognizerScorer<'_> {
    fn target_log_probs(&self, image: &GrayImage, ids: &[usize]) -> Result<Vec<f64>> {
        Ok(self.model.target_log_probs(self.store, image, ids).map_err(TrainError::from)?)
    }
}

/// Perplexity from per-formula token log-probabilities.
pub fn perplexity_from_log_probs(per_formula: &[Vec<f64>], mode: PerplexityMode) -> Result<f64> {
    let formulas: Vec<&Vec<f64>> = per_formula.iter().filter(|v| !v.is_empty()).collect();
    if formulas.is_empty() {
        return Err(MetricsError::EmptyDataset("no scored tokens".into()));
    }
    if let Some(&bad) = formulas.iter().flat_map(|v| v.iter()).find(|lp| !(lp.is_finite() && **lp <= 0.0)) {
        return Err(MetricsError::InvalidLogProb(bad));
    }
    let mean_ce = match mode {
        PerplexityMode::Corpus => {
            let n: usize = formulas.iter().map(|v| v.len()).sum();
            -formulas.iter().flat_map(|v| v.iter()).sum::<f64>() / n as f64
        }
        PerplexityMode::PerFormula => {
            formulas.iter().map(|v| -v.iter().sum::<f64>() / v.len() as f64).sum::<f64>() / formulas.len() as f64
        }
    };
    Ok(mean_ce.exp())
}

/// Teacher-forced perplexity of `scorer` over a prepared set.
pub fn perplexity(scorer: &dyn TokenScorer, set: &PreparedSet, mode: PerplexityMode) -> Result<f64> {
    if set.is_empty() {
        return Err(MetricsError::EmptyDataset("perplexity set".into()));
    }
    let lps = set
        .items
        .iter()
        .map(|(s, img)| scorer.target_log_probs(img, &s.ids))
        .collect::<Result<Vec<_>>>()?;
    perplexity_from_log_probs(&lps, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: Option<f64>,
    /// Mean per-formula WER.
    pub wer: f64,
    pub exprate: f64,
    pub n_samples: usize,
}

impl EvalReport {
    /// Scores normalized `(reference, hypothesis)` token texts.
    pub fn from_pairs(pairs: &[(Vec<String>, Vec<String>)], perplexity: Option<f64>) -> Result<Self> {
        let norm: Vec<(Vec<String>, Vec<String>)> =
            pairs.iter().map(|(r, h)| (normalize_texts(r), normalize_texts(h))).collect();
        let rate = exprate(&norm)?;
        let total: f64 = norm.iter().map(|(r, h)| wer(r, h)).sum::<Result<f64>>()?;
        Ok(Self { perplexity, wer: total / norm.len() as f64, exprate: rate, n_samples: norm.len() })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["n_samples", "wer", "exprate", "perplexity"])?;
        w.write_record([
            self.n_samples.to_string(),
            self.wer.to_string(),
            self.exprate.to_string(),
            self.perplexity.map(|p| p.to_string()).unwrap_or_default(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples     {}", self.n_samples)?;
        writeln!(f, "WER         {:.4}", self.wer)?;
        writeln!(f, "ExpRate     {:.2}%", self.exprate)?;
        match self.perplexity {
            Some(p) => writeln!(f, "perplexity  {p:.4}"),
            None => writeln!(f, "perplexity  n/a"),
        }
    }
}

/// One decoded formula, stored as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub log_prob: Option<f64>,
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| MetricsError::Prediction { line: i + 1, source })?);
    }
    Ok(out)
}

/// Scores predictions against reference records matched by id. A reference
/// without a prediction counts as an empty hypothesis.
pub fn evaluate_predictions(preds: &[Prediction], truth: &[FormulaRecord]) -> Result<EvalReport> {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let pairs: Vec<(Vec<String>, Vec<String>)> = truth
        .iter()
        .map(|r| {
            let reference = r.tokens.texts().into_iter().map(str::to_owned).collect();
            let hyp = by_id.get(r.id.as_str()).map(|p| p.tokens.clone()).unwrap_or_default();
            (reference, hyp)
        })
        .collect();
    EvalReport::from_pairs(&pairs, None)
}

/// Decodes every prepared image and scores the results.
pub fn evaluate_recognizer(
    model: &Recognizer,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    set: &PreparedSet,
    beam_size: usize,
    mode: PerplexityMode,
) -> Result<(EvalReport, Vec<Prediction>)> {
    if set.is_empty() {
        return Err(MetricsError::EmptyDataset("evaluation set".into()));
    }
    let mut preds = Vec::with_capacity(set.len());
    let mut pairs = Vec::with_capacity(set.len());
    for (s, img) in &set.items {
        let hyp = model.recognize(store, img, beam_size).map_err(TrainError::from)?;
        let tokens = texts(vocab, hyp.body());
        pairs.push((texts(vocab, &s.ids), tokens.clone()));
        preds.push(Prediction { id: s.id.clone(), tokens, log_prob: Some(hyp.log_prob) });
    }
    let ppl = perplexity(&RecognizerScorer { model, store }, set, mode)?;
    Ok((EvalReport::from_pairs(&pairs, Some(ppl))?, preds))
}

fn texts(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    vocab.decode(ids).iter().map(|t: &Token| t.as_str().to_owned()).collect()
}

/// A named GAN configuration in an ablation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub config: GanTrainConfig,
}

/// Data shared by every variant.
pub struct AblationInputs<'a> {
    /// Rendered and handwritten samples for GAN training.
    pub gan_samples: &'a [Sample],
    /// Formulas to synthesize at each checkpoint.
    pub synthesis_corpus: &'a [FormulaRecord],
    /// Handwritten samples for the perplexity score.
    pub heldout: &'a [Sample],
    pub vocab: &'a Vocabulary,
    pub renderer: &'a dyn RendererBackend,
    pub synthesis: SynthesisConfig,
    pub recognizer: RecTrainConfig,
    pub perplexity_mode: PerplexityMode,
}

/// Perplexity per variant (rows) and GAN iteration (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub variants: Vec<AblationVariant>,
    pub iterations: Vec<usize>,
    pub perplexity: Vec<Vec<f64>>,
}

impl AblationTable {
    pub fn is_complete(&self) -> bool {
        self.perplexity.len() == self.variants.len()
            && self.perplexity.iter().all(|row| row.len() == self.iterations.len() && row.iter().all(|p| p.is_finite()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["variant".to_owned()];
        header.extend(self.iterations.iter().map(|i| i.to_string()));
        w.write_record(&header)?;
        for (v, row) in self.variants.iter().zip(&self.perplexity) {
            let mut rec = vec![v.name.clone()];
            rec.extend(row.iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_w = self.variants.iter().map(|v| v.name.len()).max().unwrap_or(0).max(7);
        write!(f, "{:<name_w$}", "variant")?;
        for it in &self.iterations {
            write!(f, " {it:>10}")?;
        }
        writeln!(f)?;
        for (v, row) in self.variants.iter().zip(&self.perplexity) {
            write!(f, "{:<name_w$}", v.name)?;
            for p in row {
                write!(f, " {p:>10.4}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// For each variant, trains the GAN and at each listed iteration synthesizes
/// the corpus, trains a fresh recognizer on it and scores perplexity on the
/// held-out handwritten set.
pub fn ablation_run(variants: &[AblationVariant], iterations: &[usize], inputs: &AblationInputs) -> Result<AblationTable> {
    if variants.is_empty() || iterations.is_empty() {
        return Err(MetricsError::Config("need at least one variant and one iteration".into()));
    }
    if iterations.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricsError::Config(format!("iterations must be strictly increasing: {iterations:?}")));
    }
    let heldout = PreparedSet::new(inputs.heldout, &inputs.recognizer);
    if heldout.is_empty() {
        return Err(MetricsError::EmptyDataset("held-out handwritten set".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let data = GanData::new(inputs.gan_samples.to_vec(), &v.config)?;
        let mut trainer = GanTrainer::new(v.config.clone(), inputs.vocab.len())?;
        let mut synth_rng = ChaCha8Rng::seed_from_u64(v.config.seed ^ 0x5eed);
        let mut row = Vec::with_capacity(iterations.len());
        for &it in iterations {
            trainer.train(&data, it - trainer.step, None)?;
            let synth = Synthesizer::from_trainer(&trainer);
            let (items, _) =
                synth.synthesize_records(inputs.synthesis_corpus, inputs.renderer, &inputs.synthesis, &mut synth_rng)?;
            let samples: Vec<Sample> = items
                .into_iter()
                .map(|(r, image)| Sample {
                    ids: inputs.vocab.encode(&r.tokens),
                    id: r.id,
                    latex: r.source_latex,
                    domain: r.domain,
                    image,
                })
                .collect();
            if samples.is_empty() {
                return Err(MetricsError::EmptyDataset(format!("variant {} synthesized nothing at iteration {it}", v.name)));
            }
            let outcome = train_recognizer(std::slice::from_ref(&samples), &samples, inputs.vocab, &inputs.recognizer, None)?;
            let scorer = RecognizerScorer { model: &outcome.model, store: &outcome.store };
            row.push(perplexity(&scorer, &heldout, inputs.perplexity_mode)?);
        }
        rows.push(row);
    }
    Ok(AblationTable { variants: variants.to_vec(), iterations: iterations.to_vec(), perplexity: rows })
}

/// Pixel layout of a sample grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: usize,
    pub columns: usize,
    pub cell_height: usize,
    pub cell_width: usize,
    pub gutter: usize,
}

impl GridLayout {
    pub fn width(&self) -> usize {
        self.columns * self.cell_width + (self.columns - 1) * self.gutter
    }

    pub fn height(&self) -> usize {
        self.rows * self.cell_height + (self.rows - 1) * self.gutter
    }
}

/// Writes a PNG with one row per formula: the rendered input on the left,
/// the synthesized image on the right. Latents come from `z_seed`.
pub fn emit_sample_grid(
    synth: &Synthesizer,
    formulas: &[FormulaRecord],
    renderer: &dyn RendererBackend,
    z_seed: u64,
    gutter: usize,
    out: &Path,
) -> Result<GridLayout> {
    if formulas.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let h = synth.config.input_height;
    let mut rng = ChaCha8Rng::seed_from_u64(z_seed);
    let mut pairs = Vec::with_capacity(formulas.len());
    for r in formulas {
        let img = normalize_intensity(&renderer.render(&r.source_latex, &RenderParams::default())?);
        let input = resize_bilinear(&img, h, scaled_width(img.height(), img.width(), h));
        let fake = synth.translate(std::slice::from_ref(&input), crate::corpus::DomainLabel::Handwritten, &mut rng)?.remove(0);
        pairs.push((input, fake));
    }
    let cell_width = pairs.iter().map(|(a, _)| a.width()).max().unwrap_or(1);
    let layout = GridLayout { rows: pairs.len(), columns: 2, cell_height: h, cell_width, gutter };
    let (gh, gw) = (layout.height(), layout.width());
    let mut data = vec![0.0f32; gh * gw];
    for (row, (input, fake)) in pairs.iter().enumerate() {
        let top = row * (h + gutter);
        for (col, img) in [input, fake].into_iter().enumerate() {
            let left = col * (cell_width + gutter);
            for r in 0..img.height() {
                let dst = (top + r) * gw + left;
                data[dst..dst + img.width()].copy_from_slice(&img.data()[r * img.width()..(r + 1) * img.width()]);
            }
        }
    }
    GrayImage::from_vec(gh, gw, data)?.save_png(out)?;
    Ok(layout)
}

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use formula_synth::checkpoint::Checkpoint;
use formula_synth::corpus::{
    build_vocabulary, filter_corpus, read_corpus_file, DomainLabel, FormulaRecord, Token, Vocabulary,
};
use formula_synth::image::{
    normalize_intensity, parse_inkml, rasterize_strokes, read_manifest, sample_render_params, write_manifest,
    GrayImage, HttpRenderer, ImageError, RenderParams, RendererBackend, StubRenderer,
};
use formula_synth::image::strokes::{pseudo_handwriting, HandStyle};
use formula_synth::metrics::{
    ablation_run, emit_sample_grid, evaluate_predictions, evaluate_recognizer, read_predictions, write_predictions,
    AblationInputs, AblationVariant, EvalReport,
};
use formula_synth::trainer::{
    load_recognizer, load_samples, recognizer_checkpoint, remap_ids, GanData, GanTrainer, NormalizeMode,
    PreparedSet, Sample, Synthesizer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn renderer(spec: &str) -> Result<Box<dyn RendererBackend>> {
    match spec {
        "stub" => Ok(Box::new(StubRenderer)),
        "http" => Ok(Box::new(HttpRenderer::from_env())),
        s => match s.strip_prefix("http:") {
            Some(url) if !url.is_empty() => Ok(Box::new(HttpRenderer::new(url))),
            _ => Err(usage(format!("unknown renderer {s:?}; expected stub, http or http:<url>"))),
        },
    }
}

fn rng(cfg: &RunConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed)
}

fn file_name(id: &str) -> String {
    let stem: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{stem}.png")
}

/// Renders in order, spreading contiguous chunks over `workers` threads.
fn render_all(renderer: &dyn RendererBackend, jobs: &[(&str, RenderParams)], workers: usize) -> Vec<Result<GrayImage, ImageError>> {
    let chunk = jobs.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|(l, p)| renderer.render(l, p)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("render worker panicked")).collect()
    })
}

/// Vocabulary covering every dataset vocabulary and every extra record.
fn union_vocab<'a>(vocabs: impl IntoIterator<Item = &'a Vocabulary>, extra: &[FormulaRecord]) -> Result<Vocabulary> {
    let mut tokens = Vec::new();
    for v in vocabs {
        for t in &v.tokens()[Vocabulary::SPECIALS.len()..] {
            tokens.push(Token::new(t.clone())?);
        }
    }
    tokens.extend(extra.iter().flat_map(|r| r.tokens.iter().cloned()));
    Ok(Vocabulary::from_tokens(tokens.iter()))
}

/// Loads dataset directories and re-encodes them against one shared vocabulary.
fn load_datasets(dirs: &[PathBuf], extra: &[FormulaRecord]) -> Result<(Vec<Vec<Sample>>, Vocabulary)> {
    let mut loaded = Vec::with_capacity(dirs.len());
    for d in dirs {
        loaded.push(load_samples(d).with_context(|| format!("loading dataset {}", d.display()))?);
    }
    let vocab = union_vocab(loaded.iter().map(|(_, v)| v), extra)?;
    let sets = loaded
        .into_iter()
        .map(|(mut s, v)| {
            remap_ids(&mut s, &v, &vocab);
            s
        })
        .collect();
    Ok((sets, vocab))
}

fn read_formulas(path: &Path, domain: DomainLabel, cfg: &RunConfig) -> Result<Vec<FormulaRecord>> {
    if path.is_dir() {
        return Ok(read_manifest(path, false)?.0);
    }
    let loaded = read_corpus_file(path, domain, &cfg.prepare.exclusion)
        .with_context(|| format!("reading corpus {}", path.display()))?;
    if !loaded.rejected.is_empty() {
        eprintln!("{}: skipped {} lines", path.display(), loaded.rejected.len());
    }
    Ok(loaded.records)
}

fn manifest_dir(path: &Path) -> &Path {
    if path.is_file() {
        path.parent().unwrap_or(Path::new("."))
    } else {
        path
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DomainArg {
    Rendered,
    Handwritten,
}

impl From<DomainArg> for DomainLabel {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Rendered => DomainLabel::Rendered,
            DomainArg::Handwritten => DomainLabel::Handwritten,
        }
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// One LaTeX formula per line.
    #[arg(long, conflicts_with = "inkml", required_unless_present = "inkml")]
    corpus: Option<PathBuf>,
    /// Directory of `.inkml` files with truth annotations.
    #[arg(long)]
    inkml: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Draw traced-stroke imitations instead of rendering.
    #[arg(long, conflicts_with = "inkml")]
    pseudo_handwriting: bool,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Encode against an existing `vocab.txt` instead of building one.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

pub fn prepare_data(mut cfg: RunConfig, a: PrepareArgs) -> Result<()> {
    if let Some(m) = a.max_tokens {
        cfg.prepare.max_tokens = m;
    }
    let mut rng = rng(&cfg);
    let h = cfg.prepare.stroke_height;
    let mut items: Vec<(FormulaRecord, GrayImage)> = Vec::new();
    let mut failures = 0usize;
    if let Some(dir) = &a.inkml {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "inkml"))
            .collect();
        files.sort();
        for f in files {
            let ink = parse_inkml(&std::fs::read_to_string(&f)?).with_context(|| format!("parsing {}", f.display()))?;
            let id = f.file_stem().and_then(|s| s.to_str()).unwrap_or("ink").to_string();
            let record = ink
                .truth
                .as_deref()
                .map(|t| t.trim().trim_matches('$').trim())
                .and_then(|t| FormulaRecord::new(id, t, DomainLabel::Handwritten).ok());
            match (record, rasterize_strokes(&ink.strokes, h, None)) {
                (Some(r), Ok(img)) if r.tokens.len() <= cfg.prepare.max_tokens => items.push((r, normalize_intensity(&img))),
                _ => failures += 1,
            }
        }
    } else {
        let path = a.corpus.as_ref().expect("clap requires --corpus without --inkml");
        let domain = if a.pseudo_handwriting { DomainLabel::Handwritten } else { DomainLabel::Rendered };
        let records = filter_corpus(&read_formulas(path, domain, &cfg)?, cfg.prepare.max_tokens, None);
        if a.pseudo_handwriting {
            let style = HandStyle::default();
            for r in records {
                match pseudo_handwriting(&r.source_latex, &style, &mut rng).and_then(|s| rasterize_strokes(&s, h, None)) {
                    Ok(img) => items.push((r, normalize_intensity(&img))),
                    Err(_) => failures += 1,
                }
            }
        } else {
            let backend = renderer(&cfg.renderer)?;
            let params: Vec<RenderParams> = records
                .iter()
                .map(|_| if cfg.prepare.sample_fonts { sample_render_params(&mut rng) } else { RenderParams::default() })
                .collect();
            let jobs: Vec<(&str, RenderParams)> =
                records.iter().zip(&params).map(|(r, p)| (r.source_latex.as_str(), p.clone())).collect();
            let images = render_all(backend.as_ref(), &jobs, cfg.workers);
            for (r, img) in records.iter().zip(images) {
                match img {
                    Ok(img) => items.push((r.clone(), normalize_intensity(&img))),
                    Err(_) => failures += 1,
                }
            }
        }
    }
    if items.is_empty() {
        bail!("no usable formulas ({failures} failed)");
    }
    std::fs::create_dir_all(&a.out)?;
    let mut records = Vec::with_capacity(items.len());
    for (r, img) in items {
        let name = file_name(&r.id);
        img.save_png(&a.out.join(&name))?;
        records.push(r.with_image(name));
    }
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::read(p)?,
        None => build_vocabulary(&records)?,
    };
    write_manifest(&a.out, &records, &vocab)?;
    cfg.write_resolved(&a.out)?;
    println!("wrote {} images to {} ({failures} skipped, vocabulary {})", records.len(), a.out.display(), vocab.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainGanArgs {
    /// Dataset directories with rendered and handwritten samples.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Also save `gan-<step>.ckpt` every this many iterations.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

pub fn train_gan(mut cfg: RunConfig, a: TrainGanArgs) -> Result<()> {
    if let Some(n) = a.iterations {
        cfg.gan.max_iterations = n;
    }
    if let Some(l) = a.lambda {
        cfg.gan.lambda = l;
    }
    if a.checkpoint_every == Some(0) {
        return Err(usage("--checkpoint-every must be positive"));
    }
    let (sets, vocab) = load_datasets(&a.data, &[])?;
    let data = GanData::new(sets.into_iter().flatten().collect(), &cfg.gan)?;
    println!(
        "{} rendered, {} handwritten, {} filtered out",
        data.rendered.len(),
        data.handwritten.len(),
        data.rejected
    );
    let mut trainer = GanTrainer::new(cfg.gan.clone(), vocab.len())?;
    cfg.write_resolved(&a.out)?;
    vocab.write(&a.out.join("vocab.txt"))?;
    let mut log = BufWriter::new(File::create(a.out.join("losses.csv"))?);
    let total = cfg.gan.max_iterations;
    let chunk = a.checkpoint_every.unwrap_or(total).max(1);
    let mut done = 0;
    let mut last = None;
    while done < total {
        let n = chunk.min(total - done);
        last = trainer.train(&data, n, Some(&mut log))?.pop().or(last);
        done += n;
        if a.checkpoint_every.is_some() {
            trainer.checkpoint()?.save(&a.out.join(format!("gan-{done:07}.ckpt")))?;
        }
    }
    trainer.checkpoint()?.save(&a.out.join("gan.ckpt"))?;
    if let Some(r) = last {
        let l = r.losses;
        println!("step {done}: L_D {:.4}  L_G {:.4}  L_T {:.4}  L_DT {:.4}  L_GT {:.4}", l.l_d, l.l_g, l.l_t, l.l_dt, l.l_gt);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus file, or a dataset directory whose formulas are used.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn synthesize(mut cfg: RunConfig, a: SynthesizeArgs) -> Result<()> {
    let synth = Synthesizer::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let records = read_formulas(&a.corpus, DomainLabel::Rendered, &cfg)?;
    let vocab = build_vocabulary(&records)?;
    cfg.synthesis.output_dir = a.out.clone();
    let backend = renderer(&cfg.renderer)?;
    let report = synth.synthesize_dataset(&records, &vocab, backend.as_ref(), &cfg.synthesis, &mut rng(&cfg))?;
    cfg.write_resolved(&a.out)?;
    println!(
        "wrote {} images ({} over the area limit, {} render failures)",
        report.written, report.skipped_area, report.render_failures
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormalizeArg {
    Height128,
    SymbolHeight,
}

#[derive(Debug, Args)]
pub struct TrainRecognizerArgs {
    /// Training dataset directories, mixed by `--mix` weights.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    mix: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    normalize: Option<NormalizeArg>,
}

pub fn train_recognizer(mut cfg: RunConfig, a: TrainRecognizerArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.recognizer.epochs = e;
    }
    if let Some(m) = a.mix {
        cfg.recognizer.mix_weights = m;
    }
    if let Some(n) = a.normalize {
        cfg.recognizer.normalize_mode = match n {
            NormalizeArg::Height128 => NormalizeMode::Height128,
            NormalizeArg::SymbolHeight => NormalizeMode::SymbolHeight,
        };
    }
    let mut dirs = a.data.clone();
    dirs.push(a.val.clone());
    let (mut sets, vocab) = load_datasets(&dirs, &[])?;
    let val = sets.pop().expect("validation set loaded");
    cfg.write_resolved(&a.out)?;
    let out = formula_synth::trainer::train_recognizer(&sets, &val, &vocab, &cfg.recognizer, Some(&a.out))?;
    let last = out.epochs.last().map(|e| (e.epoch, e.val_exprate)).unwrap_or((0, 0.0));
    recognizer_checkpoint(&out.model, &out.store, &vocab, last.0, last.1)?.save(&a.out.join("final.ckpt"))?;
    println!("{} epochs, best validation ExpRate {:.2}%, last {:.2}%", last.0, out.best_exprate, last.1);
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predictions as JSON lines (`id`, `tokens`).
    #[arg(long, requires = "truth", conflicts_with = "checkpoint")]
    pred: Option<PathBuf>,
    /// Ground-truth dataset directory or its `manifest.jsonl`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Recognizer checkpoint to decode `--truth` with.
    #[arg(long, requires = "truth")]
    checkpoint: Option<PathBuf>,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    /// Where to write decoded predictions (checkpoint mode).
    #[arg(long, requires = "checkpoint")]
    predictions: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
}

pub fn evaluate(mut cfg: RunConfig, a: EvaluateArgs) -> Result<()> {
    if let Some(b) = a.beam {
        cfg.evaluate.beam_size = b;
    }
    let truth = a.truth.as_deref().ok_or_else(|| usage("--truth is required"))?;
    let dir = manifest_dir(truth);
    for path in std::iter::once(&a.out).chain(&a.predictions) {
        std::fs::create_dir_all(parent_dir(path))?;
    }
    let report: EvalReport = match (&a.pred, &a.checkpoint) {
        (Some(pred), None) => {
            let (records, _) = read_manifest(dir, false)?;
            evaluate_predictions(&read_predictions(pred)?, &records)?
        }
        (None, Some(ckpt)) => {
            let (model, store, vocab) = load_recognizer(&Checkpoint::load(ckpt)?)?;
            let (mut samples, data_vocab) = load_samples(dir)?;
            remap_ids(&mut samples, &data_vocab, &vocab);
            let set = PreparedSet::new(&samples, &cfg.recognizer);
            let (report, preds) =
                evaluate_recognizer(&model, &store, &vocab, &set, cfg.evaluate.beam_size, cfg.evaluate.perplexity_mode)?;
            if let Some(p) = &a.predictions {
                write_predictions(p, &preds)?;
            }
            report
        }
        _ => return Err(usage("evaluate needs either --pred or --checkpoint")),
    };
    report.write_csv(&a.out)?;
    cfg.write_resolved(&parent_dir(&a.out))?;
    println!("{report}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// GAN training datasets (rendered and handwritten).
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Formulas synthesized at each checkpoint (corpus file or dataset).
    #[arg(long)]
    corpus: PathBuf,
    /// Handwritten dataset scored for perplexity.
    #[arg(long)]
    heldout: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    iterations: Option<Vec<usize>>,
}

pub fn ablate(mut cfg: RunConfig, a: AblateArgs) -> Result<()> {
    if let Some(l) = a.lambdas {
        cfg.ablation.lambdas = l;
    }
    if let Some(i) = a.iterations {
        cfg.ablation.iterations = i;
    }
    let corpus = read_formulas(&a.corpus, DomainLabel::Rendered, &cfg)?;
    let mut dirs = a.data.clone();
    dirs.push(a.heldout.clone());
    let (mut sets, vocab) = load_datasets(&dirs, &corpus)?;
    let heldout = sets.pop().expect("held-out set loaded");
    let gan_samples: Vec<Sample> = sets.into_iter().flatten().collect();
    let variants: Vec<AblationVariant> = cfg
        .ablation
        .lambdas
        .iter()
        .map(|&l| AblationVariant { name: format!("lambda={l}"), config: formula_synth::trainer::GanTrainConfig { lambda: l, ..cfg.gan.clone() } })
        .collect();
    let backend = renderer(&cfg.renderer)?;
    let inputs = AblationInputs {
        gan_samples: &gan_samples,
        synthesis_corpus: &corpus,
        heldout: &heldout,
        vocab: &vocab,
        renderer: backend.as_ref(),
        synthesis: cfg.synthesis.clone(),
        recognizer: cfg.recognizer.clone(),
        perplexity_mode: cfg.evaluate.perplexity_mode,
    };
    let table = ablation_run(&variants, &cfg.ablation.iterations, &inputs)?;
    cfg.write_resolved(&a.out)?;
    table.write_csv(&a.out.join("ablation.csv"))?;
    table.write_json(&a.out.join("ablation.json"))?;
    println!("{table}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct SampleGridArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    gutter: Option<usize>,
}

pub fn sample_grid(mut cfg: RunConfig, a: SampleGridArgs) -> Result<()> {
    if let Some(c) = a.count {
        cfg.grid.count = c;
    }
    if let Some(g) = a.gutter {
        cfg.grid.gutter = g;
    }
    let synth = Synthesizer::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let records: Vec<FormulaRecord> =
        read_formulas(&a.corpus, DomainLabel::Rendered, &cfg)?.into_iter().take(cfg.grid.count).collect();
    let backend = renderer(&cfg.renderer)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let layout = emit_sample_grid(&synth, &records, backend.as_ref(), cfg.seed, cfg.grid.gutter, &a.out)?;
    cfg.write_resolved(&parent_dir(&a.out))?;
    println!("{}x{} grid, {}x{} pixels", layout.rows, layout.columns, layout.height(), layout.width());
    Ok(())
}

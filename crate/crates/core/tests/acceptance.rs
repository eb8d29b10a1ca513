//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.
//! Extra arguments select criteria whose name contains one of them.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{exhaustive, fixture, gradcheck_module, random_tensor, rng, Fixture, ToyModel};
use formula_synth::corpus::DomainLabel;
use formula_synth::gan::{
    hinge_d_loss, hinge_g_loss, sample_latent, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};
use formula_synth::image::{normalize_intensity, GrayImage, StubRenderer};
use formula_synth::metrics::{
    ablation_run, edit_distance, perplexity, wer, AblationInputs, AblationVariant, MetricsError, PerplexityMode,
    RecognizerScorer, TokenScorer,
};
use formula_synth::nn::{CondBatchNorm, SelfAttention};
use formula_synth::recognizer::{
    beam_search, greedy, image_batch, AdditiveAttention, Recognizer, RecognizerConfig, ScaleFeatures, SearchConfig,
};
use formula_synth::trainer::{
    evaluate_exprate, train_recognizer, within_area, GanData, GanTrainConfig, GanTrainer, OptimizerKind, PreparedSet,
    RecTrainConfig, Sample, SynthesisConfig, Synthesizer,
};
use formula_tensor::{concat, Binder, Mode, ParamStore, Tape, Tensor};
use rand::Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

const HAND_TOL: f64 = 1e-7;
const ORACLE_TOL: f64 = 1e-6;
const GRADCHECK_TOL: f64 = 1e-3;
const PROJECTION_TOL: f64 = 1e-5;
const IDEMPOTENCE_TOL: f32 = 1e-6;

fn loss_hand_values() -> Check {
    let cases = [
        ("d([1],[-1])", hinge_d_loss(&[1.0], &[-1.0]), 0.0),
        ("d([0],[0])", hinge_d_loss(&[0.0], &[0.0]), 2.0),
        ("d([-2],[3])", hinge_d_loss(&[-2.0], &[3.0]), 7.0),
        ("g([2])", hinge_g_loss(&[2.0]), -2.0),
    ];
    for (name, got, want) in cases {
        let got = got.map_err(e2s)?;
        ensure!((got - want).abs() <= HAND_TOL, "{name} = {got}, expected {want}");
    }
    Ok(format!("4 hinge values within {HAND_TOL:e}"))
}

fn gamma_gate() -> Check {
    let mut r = rng(100);
    for _ in 0..5 {
        let c = 8;
        let att = SelfAttention::new("a", c, false);
        let mut store = ParamStore::new();
        att.init(&mut store, &mut r);
        ensure!(store.param(&att.gamma_key()).map_err(e2s)?.data() == [0.0], "gate does not start at zero");
        let x = random_tensor(&[2, c, r.random_range(1..6), r.random_range(1..6)], &mut r);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, Mode::Eval);
        let y = att.forward(&b, &tape.constant(x.clone())).map_err(e2s)?.value();
        ensure!(y.data() == x.data(), "zero gate changed the input");
    }
    let att = SelfAttention::new("a", 1, false);
    let mut store = ParamStore::new();
    att.init(&mut store, &mut r);
    let (wf, wg, wh, gamma) = (0.8, -1.3, 0.6, 0.45);
    for (k, v) in [("a.f.weight", wf), ("a.g.weight", wg), ("a.h.weight", wh)] {
        store.param_mut(k).map_err(e2s)?.data_mut()[0] = v;
    }
    store.param_mut(&att.gamma_key()).map_err(e2s)?.data_mut()[0] = gamma;
    let xs = [0.9, -0.4];
    let tape = Tape::new();
    let b = Binder::new(&tape, &store, Mode::Eval);
    let x = tape.constant(Tensor::new(&[1, 1, 1, 2], xs.to_vec()).map_err(e2s)?);
    let y = att.forward(&b, &x).map_err(e2s)?.value();
    let mut worst: f64 = 0.0;
    for j in 0..2 {
        let s: Vec<f64> = xs.iter().map(|&xi| (wg * xs[j]) * (wf * xi)).collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let o: f64 = (0..2).map(|i| s[i].exp() / z * wh * xs[i]).sum();
        worst = worst.max((y.data()[j] - (xs[j] + gamma * o)).abs());
    }
    ensure!(worst <= ORACLE_TOL, "two-position case off by {worst:e}");
    Ok(format!("identity exact on 5 shapes; scalar oracle error {worst:.1e}"))
}

fn gradient_checks() -> Check {
    let att = SelfAttention::new("a", 8, false);
    let mut store = ParamStore::new();
    att.init(&mut store, &mut rng(6));
    store.param_mut(&att.gamma_key()).map_err(e2s)?.data_mut()[0] = 0.8;
    let e_att = gradcheck_module(&store, random_tensor(&[2, 8, 2, 3], &mut rng(7)), vec![], Mode::Eval, |b, v| {
        att.forward(b, &v[0])
    });

    let cbn = CondBatchNorm::new("cbn", 3, 4);
    let mut store = ParamStore::new();
    cbn.init(&mut store, &mut rng(8));
    let x = random_tensor(&[3, 3, 2, 2], &mut rng(9));
    let cond = random_tensor(&[3, 4], &mut rng(10));
    let e_cbn = gradcheck_module(&store, x, vec![cond], Mode::Train, |b, v| cbn.forward(b, &v[0], &v[1]));

    let head = AdditiveAttention::new("att", 3, 4, 5);
    let mut store = ParamStore::new();
    head.init(&mut store, &mut rng(4));
    let feats = random_tensor(&[2, 3, 2, 2], &mut rng(5));
    let h = random_tensor(&[2, 4], &mut rng(6));
    let e_dec = gradcheck_module(&store, feats, vec![h], Mode::Eval, |b, v| {
        let s = v[0].shape();
        let sf = ScaleFeatures::new(v[0].reshape(&[s[0], s[1], s[2] * s[3]])?, head.keys(b, &v[0])?);
        let (ctx, alpha) = head.attend(b, &sf, &v[1])?;
        Ok(concat(&[ctx, alpha], 1)?)
    });
    let detail = format!("self-attention {e_att:.1e}, cond-batchnorm {e_cbn:.1e}, decoder attention {e_dec:.1e}");
    ensure!(e_att.max(e_cbn).max(e_dec) < GRADCHECK_TOL, "{detail}");
    Ok(detail)
}

fn resolution_and_range() -> Check {
    let g = Generator::new(GeneratorConfig::tiny()).map_err(e2s)?;
    let store: ParamStore<f32> = g.init(&mut rng(11));
    let mut r = rng(12);
    let mut shapes = Vec::new();
    for _ in 0..10 {
        let (h, w) = (16 * r.random_range(1..=4), 16 * r.random_range(1..=8));
        let x = Tensor::<f32>::new(&[2, 1, h, w], (0..2 * h * w).map(|_| r.random_range(0.0..1.0)).collect())
            .map_err(e2s)?;
        let z = sample_latent::<f32, _>(2, g.config.z_dim, &mut r);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, Mode::Train);
        let labels = [DomainLabel::Handwritten, DomainLabel::Rendered];
        let y = g.forward(&b, &tape.constant(x), &tape.constant(z), &labels).map_err(e2s)?.value();
        ensure!(y.shape() == [2, 1, h, w], "{h}x{w} came out as {:?}", y.shape());
        ensure!(y.data().iter().all(|&v| v > 0.0 && v < 1.0), "{h}x{w}: output outside (0, 1)");
        shapes.push(format!("{h}x{w}"));
    }
    Ok(format!("shapes {}", shapes.join(" ")))
}

fn projection_decomposition() -> Check {
    let d = Discriminator::new(DiscriminatorConfig::tiny()).map_err(e2s)?;
    let store: ParamStore<f64> = d.init(&mut rng(16));
    let mut zeroed = store.clone();
    zeroed.param_mut(&d.embed.key()).map_err(e2s)?.data_mut().fill(0.0);
    let table = store.param(&d.embed.key()).map_err(e2s)?;
    let mut r = rng(17);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (h, w) = (16 * r.random_range(1..=2), 16 * r.random_range(1..=4));
        let y = Tensor::new(&[3, 1, h, w], (0..3 * h * w).map(|_| r.random_range(0.0..1.0)).collect()).map_err(e2s)?;
        let labels: Vec<DomainLabel> =
            (0..3).map(|_| DomainLabel::from_index(r.random_range(0..2)).expect("two domains")).collect();
        let tape = Tape::new();
        let full = d.forward_parts(&Binder::new(&tape, &store, Mode::Eval), &tape.constant(y.clone()), &labels);
        let plain = d.forward(&Binder::new(&tape, &zeroed, Mode::Eval), &tape.constant(y), &labels);
        let (full, plain) = (full.map_err(e2s)?, plain.map_err(e2s)?.value());
        let phi = full.phi.value();
        let c = phi.shape()[1];
        for (i, l) in labels.iter().enumerate() {
            let dot: f64 = (0..c).map(|k| table.data()[l.index() * c + k] * phi.data()[i * c + k]).sum();
            worst = worst.max((full.score.value().data()[i] - plain.data()[i] - dot).abs());
        }
    }
    ensure!(worst <= PROJECTION_TOL, "largest deviation {worst:e}");
    Ok(format!("15 scores, largest deviation {worst:.1e}"))
}

/// Levenshtein distance by memoized recursion over suffixes.
fn levenshtein_oracle(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() || b.is_empty() {
            return a.len() + b.len();
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let v = (go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]))
            .min(go(&a[1..], b, memo) + 1)
            .min(go(a, &b[1..], memo) + 1);
        memo.insert((a.len(), b.len()), v);
        v
    }
    go(a, b, &mut Default::default())
}

struct Uniform(usize);

impl TokenScorer for Uniform {
    fn target_log_probs(&self, _: &GrayImage, ids: &[usize]) -> Result<Vec<f64>, MetricsError> {
        Ok(vec![-(self.0 as f64).ln(); ids.len() + 1])
    }
}

fn metric_oracles() -> Check {
    let mut r = rng(1);
    for i in 0..1000 {
        let a: Vec<u8> = (0..r.random_range(1..15)).map(|_| r.random_range(0..5)).collect();
        let b: Vec<u8> = (0..r.random_range(0..15)).map(|_| r.random_range(0..5)).collect();
        let d = levenshtein_oracle(&a, &b);
        ensure!(edit_distance(&a, &b) == d, "pair {i}: distance {} vs oracle {d}", edit_distance(&a, &b));
        ensure!(wer(&a, &b).map_err(e2s)? == d as f64 / a.len() as f64, "pair {i}: WER differs");
    }
    let fx = fixture(5, 32, 128, 2);
    let cfg = RecTrainConfig { input_height: 32, ..RecTrainConfig::default() };
    let set = PreparedSet::new(&fx.rendered, &cfg);
    for v in [3, 10, 100] {
        for mode in [PerplexityMode::Corpus, PerplexityMode::PerFormula] {
            let p = perplexity(&Uniform(v), &set, mode).map_err(e2s)?;
            ensure!((p - v as f64).abs() <= ORACLE_TOL, "uniform V={v}: perplexity {p}");
        }
    }
    let model = Recognizer::new(RecognizerConfig::tiny(fx.vocab.len())).map_err(e2s)?;
    let store = model.init(&mut rng(4));
    let mut worst: f64 = 0.0;
    for item in &set.items {
        let one = PreparedSet { items: vec![item.clone()], dropped: 0 };
        let p = perplexity(&RecognizerScorer { model: &model, store: &store }, &one, PerplexityMode::Corpus)
            .map_err(e2s)?;
        let tape = Tape::new();
        let b = Binder::with_trainable(&tape, &store, Mode::Eval, false);
        let x = tape.constant(image_batch::<f32>(std::slice::from_ref(&item.1)).map_err(e2s)?);
        let loss = model.loss(&b, &x, std::slice::from_ref(&item.0.ids)).map_err(e2s)?.item() as f64;
        let expected = (loss / (item.0.ids.len() + 1) as f64).exp();
        worst = worst.max((p - expected).abs() / expected);
    }
    ensure!(worst <= ORACLE_TOL, "perplexity vs exp(task_loss/T): relative error {worst:e}");
    Ok(format!("1000 WER pairs exact; uniform V in {{3,10,100}} exact; loss consistency {worst:.1e}"))
}

fn beam_soundness() -> Check {
    for seed in 0..50 {
        let m = ToyModel { seed, vocab: 6, sharpness: 2.0 };
        let cfg = SearchConfig::new(1, 8, 0, 1);
        ensure!(beam_search(&m, &cfg).map_err(e2s)? == greedy(&m, &cfg).map_err(e2s)?, "seed {seed}: beam 1 != greedy");
    }
    for seed in 0..50 {
        let m = ToyModel { seed: 1000 + seed, vocab: 3, sharpness: 3.0 };
        let cfg = SearchConfig::new(16, 3, 0, 2);
        let (seq, score) = exhaustive(&m, &cfg);
        let got = beam_search(&m, &cfg).map_err(e2s)?;
        ensure!(got.tokens == seq && (got.log_prob - score).abs() < 1e-12, "seed {seed}: beam misses the optimum");
    }
    Ok("50 greedy equalities, 50 exhaustive optima".into())
}

fn blank_sample(n_ids: usize, domain: DomainLabel, h: usize, w: usize) -> Sample {
    let image = GrayImage::from_fn(h, w, |r, c| if (r + c) % 7 == 0 { 1.0 } else { 0.0 }).expect("valid size");
    Sample { id: format!("{n_ids}-{w}"), latex: "x".into(), ids: vec![4; n_ids], domain, image }
}

fn filters() -> Check {
    let cfg = GanTrainConfig::default();
    let tokens = GanData::new(
        vec![
            blank_sample(50, DomainLabel::Rendered, 128, 256),
            blank_sample(51, DomainLabel::Rendered, 128, 256),
            blank_sample(5, DomainLabel::Handwritten, 128, 256),
        ],
        &cfg,
    )
    .map_err(e2s)?;
    ensure!(tokens.rendered.len() == 1 && tokens.rejected == 1, "token-length boundary");
    ensure!(tokens.rendered[0].0.ids.len() == 50, "kept the wrong formula");
    let widths = GanData::new(
        vec![
            blank_sample(5, DomainLabel::Rendered, 128, 512),
            blank_sample(5, DomainLabel::Rendered, 128, 513),
            blank_sample(5, DomainLabel::Handwritten, 128, 256),
        ],
        &cfg,
    )
    .map_err(e2s)?;
    ensure!(widths.rendered.len() == 1 && widths.rendered[0].1.width() == 512, "width boundary");
    ensure!(within_area(1, 639_999, 640_000) && !within_area(1, 640_000, 640_000), "area boundary");
    ensure!(within_area(799, 800, 640_000) && !within_area(800, 800, 640_000), "area boundary (2-D)");
    Ok("tokens 50 kept / 51 dropped; width 512 / 513; area 639,999 / 640,000".into())
}

fn gan_smoke() -> Check {
    let fx = fixture(16, 32, 96, 31);
    let cfg = GanTrainConfig::tiny();
    let data = GanData::new(fx.all_samples(), &cfg).map_err(e2s)?;
    ensure!(data.rendered.len() == 16, "{} of 16 rendered formulas usable", data.rendered.len());
    let mut t = GanTrainer::new(cfg, fx.vocab.len()).map_err(e2s)?;
    let reports = t.train(&data, 2000, None).map_err(e2s)?;
    ensure!(reports.len() == 2000, "{} steps ran", reports.len());
    let mut t_updates = 0;
    for (i, r) in reports.iter().enumerate() {
        ensure!(r.losses.all_finite(), "non-finite loss at step {}", i + 1);
        ensure!(r.task_hash_after_d == r.task_hash_after_g, "task model changed in the generator phase of step {}", i + 1);
        t_updates += usize::from(r.task_hash_before != r.task_hash_after_d);
    }
    let synth = Synthesizer::from_trainer(&t);
    let scfg = SynthesisConfig { sample_fonts: false, ..SynthesisConfig::default() };
    let (items, _) = synth.synthesize_records(&fx.records, &StubRenderer, &scfg, &mut rng(32)).map_err(e2s)?;
    ensure!(items.len() == fx.records.len(), "synthesized {} of {}", items.len(), fx.records.len());
    let mut worst = 0f32;
    for (rec, img) in &items {
        ensure!(img.min() >= 0.0 && img.max() <= 1.0, "{} outside [0, 1]", rec.id);
        let again = normalize_intensity(img);
        worst = again.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
    }
    ensure!(worst <= IDEMPOTENCE_TOL, "normalization moved a synthesized pixel by {worst:e}");
    let l = reports.last().expect("2000 reports").losses;
    Ok(format!(
        "2000 steps finite, G-phase hash equal every step, T updated in {t_updates} D-phases; final L_D {:.3} L_G {:.3} L_T {:.3}; {} images idempotent ({worst:.0e})",
        l.l_d,
        l.l_g,
        l.l_t,
        items.len()
    ))
}

fn recognizer_overfit() -> Check {
    let fx = fixture(32, 32, 128, 21);
    ensure!(fx.rendered.len() == 32, "{} of 32 formulas rendered", fx.rendered.len());
    let cfg = RecTrainConfig {
        batch_size: 8,
        optimizer: OptimizerKind::Adam,
        lr: 1e-3,
        input_height: 32,
        max_width: 128,
        epochs: 50,
        steps_per_epoch: 100,
        beam_size: 1,
        stop_at_exprate: Some(100.0),
        plateau_patience: usize::MAX,
        model: RecognizerConfig { max_len: 16, ..RecognizerConfig::small(0) },
        ..RecTrainConfig::default()
    };
    let out = train_recognizer(&[fx.rendered.clone()], &fx.rendered, &fx.vocab, &cfg, None).map_err(e2s)?;
    let last = out.epochs.last().expect("at least one epoch");
    let set = PreparedSet::new(&fx.rendered, &cfg);
    let exprate = evaluate_exprate(&out.model, &out.store, &set, 1).map_err(e2s)?;
    ensure!(exprate == 100.0, "training-set ExpRate {exprate}% after {} steps", last.steps);

    let plateau = forced_plateau(&fx)?;
    Ok(format!("ExpRate 100% after {} steps; {plateau}", last.steps))
}

/// A learning rate too small to move the metric, so validation stalls.
fn forced_plateau(fx: &Fixture) -> Check {
    let cfg = RecTrainConfig {
        batch_size: 2,
        lr: 1e-12,
        input_height: 32,
        max_width: 128,
        epochs: 4,
        steps_per_epoch: 1,
        beam_size: 1,
        plateau_patience: 1,
        model: RecognizerConfig { max_len: 8, ..RecognizerConfig::tiny(0) },
        ..RecTrainConfig::default()
    };
    let out = train_recognizer(&[fx.rendered[..4].to_vec()], &fx.rendered[..4], &fx.vocab, &cfg, None).map_err(e2s)?;
    let fired = out.epochs.iter().filter(|e| e.lr_reduced).count();
    ensure!(fired >= 1, "scheduler never fired: {:?}", out.epochs.iter().map(|e| e.val_exprate).collect::<Vec<_>>());
    let lr = out.epochs.last().expect("4 epochs").lr;
    Ok(format!("forced plateau fired {fired}x, lr 1e-12 -> {lr:e}"))
}

fn ablation_shape() -> Check {
    let fx = fixture(8, 32, 96, 41);
    let variants: Vec<AblationVariant> = [0.0, 1.0]
        .iter()
        .map(|&l| AblationVariant { name: format!("lambda={l}"), config: GanTrainConfig { lambda: l, ..GanTrainConfig::tiny() } })
        .collect();
    let gan_samples = fx.all_samples();
    let inputs = AblationInputs {
        gan_samples: &gan_samples,
        synthesis_corpus: &fx.records,
        heldout: &fx.handwritten,
        vocab: &fx.vocab,
        renderer: &StubRenderer,
        synthesis: SynthesisConfig { sample_fonts: false, ..SynthesisConfig::default() },
        recognizer: RecTrainConfig {
            batch_size: 4,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            input_height: 32,
            epochs: 2,
            steps_per_epoch: 20,
            beam_size: 1,
            model: RecognizerConfig { max_len: 12, ..RecognizerConfig::tiny(0) },
            ..RecTrainConfig::default()
        },
        perplexity_mode: PerplexityMode::Corpus,
    };
    let iterations = [50, 100];
    let a = ablation_run(&variants, &iterations, &inputs).map_err(e2s)?;
    ensure!(a.is_complete() && a.perplexity.len() == 2 && a.perplexity.iter().all(|r| r.len() == 2), "incomplete table");
    ensure!(a.perplexity.iter().flatten().all(|p| p.is_finite() && *p >= 1.0), "bad entries {:?}", a.perplexity);
    let b = ablation_run(&variants, &iterations, &inputs).map_err(e2s)?;
    ensure!(a.perplexity == b.perplexity, "reruns differ: {:?} vs {:?}", a.perplexity, b.perplexity);
    Ok(format!("2x2 table {:?}, identical on rerun", a.perplexity))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .map(|m| format!("panicked: {m}"))
        .unwrap_or_else(|| "panicked".into())
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { name: "loss hand-values", budget: secs(1), run: loss_hand_values },
        Criterion { name: "self-attention gamma gate", budget: secs(1), run: gamma_gate },
        Criterion { name: "gradient checks", budget: secs(120), run: gradient_checks },
        Criterion { name: "resolution and range", budget: secs(60), run: resolution_and_range },
        Criterion { name: "projection decomposition", budget: secs(60), run: projection_decomposition },
        Criterion { name: "metric oracles", budget: secs(60), run: metric_oracles },
        Criterion { name: "beam soundness", budget: secs(120), run: beam_soundness },
        Criterion { name: "filters", budget: secs(1), run: filters },
        Criterion { name: "gan smoke", budget: secs(30 * 60), run: gan_smoke },
        Criterion { name: "recognizer overfit", budget: secs(20 * 60), run: recognizer_overfit },
        Criterion { name: "ablation harness shape", budget: secs(60 * 60), run: ablation_shape },
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut ran = 0;
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str()))) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| Err(panic_message(p)));
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; exceeded the {:?} budget", c.budget)),
            Err(e) => (false, e),
        };
        ran += 1;
        failed += usize::from(!ok);
        println!("{} {} ({:.1}s) {detail}", if ok { "PASS" } else { "FAIL" }, c.name, took.as_secs_f64());
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

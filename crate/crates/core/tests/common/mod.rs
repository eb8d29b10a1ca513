#![allow(dead_code)]

use formula_tensor::gradcheck::check_gradients;
use formula_tensor::{Binder, Mode, ParamStore, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Gradient check of `sum(w * f(x, params))` over the input and every parameter.
pub fn gradcheck_module<F>(store: &ParamStore<f64>, x: Tensor<f64>, extra: Vec<Tensor<f64>>, mode: Mode, f: F) -> f64
where
    F: for<'t> Fn(&Binder<'t, '_, f64>, &[Var<'t, f64>]) -> formula_synth::nn::Result<Var<'t, f64>>,
{
    let names = store.param_names();
    let mut inputs = vec![x];
    inputs.extend(extra);
    let n_data = inputs.len();
    inputs.extend(names.iter().map(|n| (**store.param(n).unwrap()).clone()));
    let report = check_gradients(&inputs, 1e-6, |tape, vars| {
        let b = Binder::new(tape, store, mode);
        for (n, v) in names.iter().zip(&vars[n_data..]) {
            b.bind(n, *v);
        }
        let y = f(&b, &vars[..n_data])
            .map_err(|e| TensorError::InvalidArgument { op: "module", detail: e.to_string() })?;
        let w = Tensor::new(&y.shape(), (0..y.value().numel()).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect())?;
        Ok(y.mul(&tape.constant(w))?.sum_all())
    })
    .unwrap();
    report.max_error()
}


use std::collections::BTreeSet;

use formula_synth::corpus::{build_vocabulary, DomainLabel, FormulaRecord, Vocabulary};
use formula_synth::image::transform::scaled_width;
use formula_synth::image::{RenderParams, RendererBackend, StubRenderer};
use formula_synth::trainer::{pseudo_handwritten_samples, render_samples, Sample};

const TEMPLATES: [&str; 8] = ["@+#", "@-#", "@^{#}", "@_{#}", "\\frac{@}{#}", "@=#", "@#", "@"];
const SYMBOLS: [&str; 10] = ["a", "b", "x", "y", "n", "1", "2", "3", "7", "0"];

/// Distinct short formulas drawn from a few templates.
pub fn short_formulas(n: usize, seed: u64) -> Vec<FormulaRecord> {
    let mut r = rng(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < n {
        let t = TEMPLATES[r.random_range(0..TEMPLATES.len())];
        let a = SYMBOLS[r.random_range(0..SYMBOLS.len())];
        let b = SYMBOLS[r.random_range(0..SYMBOLS.len())];
        let latex = t.replace('@', a).replace('#', b);
        if seen.insert(latex.clone()) {
            out.push(FormulaRecord::new(format!("f{:03}", out.len()), latex, DomainLabel::Rendered).unwrap());
        }
    }
    out
}

/// Short formulas whose stub render and pseudo-handwriting both fit
/// `max_width` once scaled to `height`.
pub struct Fixture {
    pub records: Vec<FormulaRecord>,
    pub vocab: Vocabulary,
    pub rendered: Vec<Sample>,
    pub handwritten: Vec<Sample>,
}

impl Fixture {
    pub fn all_samples(&self) -> Vec<Sample> {
        self.rendered.iter().chain(&self.handwritten).cloned().collect()
    }
}

pub fn fixture(n: usize, height: usize, max_width: usize, seed: u64) -> Fixture {
    let fits = |s: &Sample| scaled_width(s.image.height(), s.image.width(), height) <= max_width;
    let mut r = rng(seed);
    let mut picked = Vec::new();
    for rec in short_formulas(4 * n, seed) {
        if picked.len() == n {
            break;
        }
        let Ok(img) = StubRenderer.render(&rec.source_latex, &RenderParams::default()) else { continue };
        if scaled_width(img.height(), img.width(), height) <= max_width {
            picked.push(rec);
        }
    }
    assert_eq!(picked.len(), n, "not enough short formulas fit the fixture width");
    let vocab = build_vocabulary(&picked).unwrap();
    let rendered = render_samples(&picked, &vocab, &StubRenderer, false, &mut r);
    let handwritten: Vec<Sample> =
        pseudo_handwritten_samples(&picked, &vocab, height, &mut r).into_iter().filter(|s| fits(s)).collect();
    assert!(!handwritten.is_empty());
    Fixture { records: picked, vocab, rendered, handwritten }
}


use formula_synth::recognizer::{SearchConfig, StepModel};

/// Next-token distribution drawn from a seeded hash of the whole prefix.
pub struct ToyModel {
    pub seed: u64,
    pub vocab: usize,
    pub sharpness: f64,
}

impl StepModel for ToyModel {
    type State = Vec<usize>;

    fn initial(&self) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, state: &Vec<usize>, token: usize) -> formula_synth::nn::Result<(Vec<f64>, Vec<usize>)> {
        let mut prefix = state.clone();
        prefix.push(token);
        let key = prefix.iter().fold(self.seed, |h, &t| h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1));
        let mut r = rng(key);
        let logits: Vec<f64> = (0..self.vocab).map(|_| self.sharpness * r.random_range(-1.0..1.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
        Ok((logits.iter().map(|l| l - z).collect(), prefix))
    }
}

/// Best finished sequence by brute force (score, then ids ascending).
pub fn exhaustive(model: &ToyModel, cfg: &SearchConfig) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier = vec![(vec![cfg.start], 0.0, model.initial())];
    for _ in 0..cfg.max_len {
        let mut next = Vec::new();
        for (tokens, score, state) in frontier {
            let (lp, st) = model.step(&state, *tokens.last().unwrap()).unwrap();
            for (t, l) in lp.iter().enumerate() {
                let mut seq = tokens.clone();
                seq.push(t);
                let s = score + l;
                if t == cfg.end {
                    let better = match &best {
                        None => true,
                        Some((bt, bs)) => s > *bs || (s == *bs && seq < *bt),
                    };
                    if better {
                        best = Some((seq, s));
                    }
                } else {
                    next.push((seq, s, st.clone()));
                }
            }
        }
        frontier = next;
    }
    best.expect("some finished sequence")
}

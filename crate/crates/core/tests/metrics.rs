mod common;

use common::{fixture, rng};
use formula_synth::corpus::{tokenize, FormulaRecord, DomainLabel};
use formula_synth::image::{GrayImage, StubRenderer};
use formula_synth::metrics::{
    ablation_run, edit_distance, emit_sample_grid, evaluate_predictions, evaluate_recognizer, exprate, perplexity,
    perplexity_from_log_probs, read_predictions, wer, write_predictions, AblationInputs, AblationVariant,
    EvalReport, MetricsError, PerplexityMode, Prediction, RecognizerScorer, TokenScorer,
};
use formula_synth::recognizer::{image_batch, Recognizer, RecognizerConfig};
use formula_synth::trainer::{
    GanTrainConfig, GanTrainer, OptimizerKind, PreparedSet, RecTrainConfig, SynthesisConfig, Synthesizer,
};
use formula_tensor::{Binder, Mode, Tape};
use proptest::prelude::*;
use rand::Rng;

/// Full-table Levenshtein recursion with memoization.
fn levenshtein_oracle(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let sub = go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
        let del = go(&a[1..], b, memo) + 1;
        let ins = go(a, &b[1..], memo) + 1;
        let v = sub.min(del).min(ins);
        memo.insert((a.len(), b.len()), v);
        v
    }
    go(a, b, &mut Default::default())
}

#[test]
fn wer_examples() {
    assert_eq!(wer(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 0.0);
    assert!((wer(&["a", "b", "c"], &["a", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(wer::<&str>(&["a", "b"], &[]).unwrap(), 1.0);
    assert!(matches!(wer::<&str>(&[], &["a"]), Err(MetricsError::EmptyReference)));
}

#[test]
fn wer_matches_recursive_oracle_on_random_pairs() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let a: Vec<u8> = (0..r.random_range(1..12)).map(|_| r.random_range(0..4)).collect();
        let b: Vec<u8> = (0..r.random_range(0..12)).map(|_| r.random_range(0..4)).collect();
        let d = levenshtein_oracle(&a, &b);
        assert_eq!(edit_distance(&a, &b), d);
        assert_eq!(wer(&a, &b).unwrap(), d as f64 / a.len() as f64);
    }
}

fn seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 0..10)
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in seq(), b in seq(), c in seq()) {
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
    }

    #[test]
    fn exprate_complement_identity(pairs in prop::collection::vec((seq(), seq()), 1..20)) {
        let matched: Vec<_> = pairs.iter().map(|(r, h)| (r.clone(), h.clone())).collect();
        let flipped: Vec<_> = pairs
            .iter()
            .map(|(r, h)| if r == h { (r.clone(), [r.clone(), vec![9]].concat()) } else { (r.clone(), r.clone()) })
            .collect();
        let sum = exprate(&matched).unwrap() + exprate(&flipped).unwrap();
        prop_assert!((sum - 100.0).abs() < 1e-9);
    }
}

#[test]
fn exprate_examples() {
    let all = vec![(vec![1, 2], vec![1, 2]); 3];
    assert_eq!(exprate(&all).unwrap(), 100.0);
    let mixed = vec![
        (vec![1], vec![1]),
        (vec![2], vec![2]),
        (vec![3], vec![4]),
        (vec![5], vec![]),
        (vec![6, 7], vec![7, 6]),
    ];
    assert_eq!(exprate(&mixed).unwrap(), 40.0);
    assert!(matches!(exprate::<u8>(&[]), Err(MetricsError::EmptyList)));
}

#[test]
fn exprate_ignores_spacing_commands() {
    let pairs = vec![(vec!["a".to_string(), "b".into()], vec!["a".to_string(), "\\quad".into(), "b".into()])];
    let report = EvalReport::from_pairs(&pairs, None).unwrap();
    assert_eq!(report.exprate, 100.0);
    assert_eq!(report.wer, 0.0);
}

struct Uniform(usize);

impl TokenScorer for Uniform {
    fn target_log_probs(&self, _: &GrayImage, ids: &[usize]) -> Result<Vec<f64>, MetricsError> {
        Ok(vec![-(self.0 as f64).ln(); ids.len() + 1])
    }
}

struct Perfect;

impl TokenScorer for Perfect {
    fn target_log_probs(&self, _: &GrayImage, ids: &[usize]) -> Result<Vec<f64>, MetricsError> {
        Ok(vec![0.0; ids.len() + 1])
    }
}

fn prepared(n: usize) -> PreparedSet {
    let fx = fixture(n, 32, 128, 2);
    let cfg = RecTrainConfig { input_height: 32, ..RecTrainConfig::default() };
    PreparedSet::new(&fx.rendered, &cfg)
}

#[test]
fn perplexity_closed_forms() {
    let set = prepared(5);
    for v in [3, 10, 100] {
        for mode in [PerplexityMode::Corpus, PerplexityMode::PerFormula] {
            let p = perplexity(&Uniform(v), &set, mode).unwrap();
            assert!((p - v as f64).abs() < 1e-6, "V={v}: {p}");
        }
    }
    assert_eq!(perplexity(&Perfect, &set, PerplexityMode::Corpus).unwrap(), 1.0);
    let empty = PreparedSet { items: vec![], dropped: 0 };
    assert!(matches!(perplexity(&Perfect, &empty, PerplexityMode::Corpus), Err(MetricsError::EmptyDataset(_))));
}

#[test]
fn corpus_and_per_formula_modes_differ_as_expected() {
    let lps = vec![vec![-1.0], vec![-2.0, -2.0, -2.0]];
    let corpus = perplexity_from_log_probs(&lps, PerplexityMode::Corpus).unwrap();
    let per = perplexity_from_log_probs(&lps, PerplexityMode::PerFormula).unwrap();
    assert!((corpus - (7.0f64 / 4.0).exp()).abs() < 1e-12);
    assert!((per - 1.5f64.exp()).abs() < 1e-12);
    assert!(perplexity_from_log_probs(&[vec![0.5]], PerplexityMode::Corpus).is_err());
}

#[test]
fn perplexity_matches_the_batch_task_loss() {
    let fx = fixture(3, 32, 128, 3);
    let model = Recognizer::new(RecognizerConfig::tiny(fx.vocab.len())).unwrap();
    let store = model.init(&mut rng(4));
    let cfg = RecTrainConfig { input_height: 32, ..RecTrainConfig::default() };
    let set = PreparedSet::new(&fx.rendered[..1], &cfg);
    let p = perplexity(&RecognizerScorer { model: &model, store: &store }, &set, PerplexityMode::Corpus).unwrap();
    let (s, img) = &set.items[0];
    let tape = Tape::new();
    let b = Binder::with_trainable(&tape, &store, Mode::Eval, false);
    let x = tape.constant(image_batch::<f32>(std::slice::from_ref(img)).unwrap());
    let loss = model.loss(&b, &x, std::slice::from_ref(&s.ids)).unwrap().item() as f64;
    let t = (s.ids.len() + 1) as f64;
    assert!((p - (loss / t).exp()).abs() / p < 1e-6, "{p} vs {}", (loss / t).exp());
}

fn record(id: &str, latex: &str) -> FormulaRecord {
    FormulaRecord::new(id, latex, DomainLabel::Handwritten).unwrap()
}

#[test]
fn predictions_round_trip_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    let toks = |s: &str| tokenize(s).unwrap().texts().into_iter().map(String::from).collect::<Vec<_>>();
    let preds = vec![
        Prediction { id: "a".into(), tokens: toks("x^{2}"), log_prob: Some(-0.5) },
        Prediction { id: "b".into(), tokens: toks("a+c"), log_prob: None },
    ];
    write_predictions(&path, &preds).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), preds);
    let truth = vec![record("a", "x^{2}"), record("b", "a+b"), record("c", "y")];
    let report = evaluate_predictions(&preds, &truth).unwrap();
    assert_eq!(report.n_samples, 3);
    assert!((report.exprate - 100.0 / 3.0).abs() < 1e-9);
    assert!((report.wer - (0.0 + 1.0 / 3.0 + 1.0) / 3.0).abs() < 1e-12);
    let csv_path = dir.path().join("r.csv");
    report.write_csv(&csv_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("n_samples,wer,exprate,perplexity\n3,"));
    assert!(report.to_string().contains("ExpRate"));
}

#[test]
fn malformed_prediction_lines_are_reported_with_their_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    std::fs::write(&path, "{\"id\":\"a\",\"tokens\":[]}\n\n{\"id\":3}\n").unwrap();
    assert!(matches!(read_predictions(&path), Err(MetricsError::Prediction { line: 3, .. })));
}

#[test]
fn evaluate_recognizer_reports_consistent_numbers() {
    let fx = fixture(4, 32, 128, 5);
    let model = Recognizer::new(RecognizerConfig { max_len: 12, ..RecognizerConfig::tiny(fx.vocab.len()) }).unwrap();
    let store = model.init(&mut rng(6));
    let set = PreparedSet::new(&fx.rendered, &RecTrainConfig { input_height: 32, ..RecTrainConfig::default() });
    let (report, preds) = evaluate_recognizer(&model, &store, &fx.vocab, &set, 2, PerplexityMode::Corpus).unwrap();
    assert_eq!(report.n_samples, 4);
    assert_eq!(preds.len(), 4);
    assert!(report.perplexity.unwrap() >= 1.0);
    assert!((0.0..=100.0).contains(&report.exprate));
}

#[test]
fn sample_grid_layout_and_determinism() {
    let fx = fixture(4, 32, 128, 7);
    let t = GanTrainer::new(GanTrainConfig::tiny(), fx.vocab.len()).unwrap();
    let synth = Synthesizer::from_trainer(&t);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    let layout = emit_sample_grid(&synth, &fx.records, &StubRenderer, 42, 6, &a).unwrap();
    emit_sample_grid(&synth, &fx.records, &StubRenderer, 42, 6, &b).unwrap();
    assert_eq!((layout.rows, layout.columns), (4, 2));
    assert_eq!(layout.width(), 2 * layout.cell_width + 6);
    assert_eq!(layout.height(), 4 * 32 + 3 * 6);
    let img = GrayImage::load_png(&a).unwrap();
    assert_eq!((img.height(), img.width()), (layout.height(), layout.width()));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(matches!(
        emit_sample_grid(&synth, &[], &StubRenderer, 0, 6, &a),
        Err(MetricsError::EmptyList)
    ));
}

#[test]
fn tiny_ablation_table_is_complete_and_deterministic() {
    let fx = fixture(6, 32, 96, 8);
    let variants: Vec<AblationVariant> = [0.0, 1.0]
        .iter()
        .map(|&l| AblationVariant {
            name: format!("lambda={l}"),
            config: GanTrainConfig { lambda: l, max_width: 96, ..GanTrainConfig::tiny() },
        })
        .collect();
    let inputs = AblationInputs {
        gan_samples: &fx.all_samples(),
        synthesis_corpus: &fx.records,
        heldout: &fx.handwritten,
        vocab: &fx.vocab,
        renderer: &StubRenderer,
        synthesis: SynthesisConfig { sample_fonts: false, ..SynthesisConfig::default() },
        recognizer: RecTrainConfig {
            batch_size: 2,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            input_height: 32,
            epochs: 1,
            steps_per_epoch: 2,
            beam_size: 1,
            model: RecognizerConfig { max_len: 8, ..RecognizerConfig::tiny(0) },
            ..RecTrainConfig::default()
        },
        perplexity_mode: PerplexityMode::Corpus,
    };
    let a = ablation_run(&variants, &[1, 2], &inputs).unwrap();
    assert!(a.is_complete());
    assert_eq!(a.perplexity.len(), 2);
    let b = ablation_run(&variants[..1], &[1, 2], &inputs).unwrap();
    assert_eq!(a.perplexity[0], b.perplexity[0]);
    let dir = tempfile::tempdir().unwrap();
    a.write_csv(&dir.path().join("t.csv")).unwrap();
    a.write_json(&dir.path().join("t.json")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("variant,1,2"));
    assert!(matches!(ablation_run(&variants, &[2, 1], &inputs), Err(MetricsError::Config(_))));
}

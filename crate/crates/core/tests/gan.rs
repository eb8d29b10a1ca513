mod common;

use common::{gradcheck_module, random_tensor, rng};
use formula_synth::corpus::DomainLabel;
use formula_synth::gan::{
    combine_losses, hinge_d_loss, hinge_g_loss, sample_latent, Discriminator, DiscriminatorConfig, Generator,
    GeneratorConfig,
};
use formula_synth::nn::{CondBatchNorm, ModelError, SelfAttention};
use formula_tensor::{Binder, Mode, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn hinge_discriminator_values() {
    assert_eq!(hinge_d_loss(&[1.0], &[-1.0]).unwrap(), 0.0);
    assert!((hinge_d_loss(&[0.0], &[0.0]).unwrap() - 2.0).abs() < 1e-12);
    assert!((hinge_d_loss(&[-2.0], &[3.0]).unwrap() - 7.0).abs() < 1e-12);
}

#[test]
fn hinge_generator_values() {
    assert_eq!(hinge_g_loss(&[0.0]).unwrap(), 0.0);
    assert_eq!(hinge_g_loss(&[0.5, -0.5]).unwrap(), 0.0);
    assert!((hinge_g_loss(&[2.0]).unwrap() + 2.0).abs() < 1e-12);
}

#[test]
fn hinge_rejects_empty_batches() {
    assert!(matches!(hinge_d_loss(&[], &[1.0]), Err(ModelError::EmptyBatch)));
    assert!(matches!(hinge_g_loss(&[]), Err(ModelError::EmptyBatch)));
}

#[test]
fn combined_losses_table() {
    for (lambda, dt, gt) in [(0.0, 1.0, 2.0), (1.0, 4.0, 5.0), (10.0, 31.0, 32.0)] {
        let l = combine_losses(1.0, 2.0, 3.0, lambda).unwrap();
        assert_eq!((l.l_dt, l.l_gt), (dt, gt), "lambda {lambda}");
    }
    assert!(combine_losses(1.0, 2.0, 3.0, -1.0).is_err());
    assert!(combine_losses(1.0, 2.0, 3.0, f64::NAN).is_err());
}

proptest! {
    #[test]
    fn hinge_d_is_nonnegative_and_zero_beyond_margin(real in prop::collection::vec(-5.0f64..5.0, 1..8),
                                                     fake in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let l = hinge_d_loss(&real, &fake).unwrap();
        prop_assert!(l >= 0.0);
        let real_ok: Vec<f64> = real.iter().map(|r| r.abs() + 1.0).collect();
        let fake_ok: Vec<f64> = fake.iter().map(|f| -f.abs() - 1.0).collect();
        prop_assert_eq!(hinge_d_loss(&real_ok, &fake_ok).unwrap(), 0.0);
    }
}

fn attention_store(att: &SelfAttention, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    att.init(&mut store, &mut rng(seed));
    store
}

#[test]
fn attention_with_zero_gate_is_identity() {
    let att = SelfAttention::new("a", 16, false);
    let store = attention_store(&att, 1);
    let x = random_tensor(&[2, 16, 3, 5], &mut rng(2));
    let tape = Tape::new();
    let b = Binder::new(&tape, &store, Mode::Eval);
    let y = att.forward(&b, &tape.constant(x.clone())).unwrap().value();
    assert_eq!(y.data(), x.data());
}

#[test]
fn attention_single_position_adds_gated_value() {
    let att = SelfAttention::new("a", 8, false);
    let mut store = attention_store(&att, 3);
    store.param_mut(&att.gamma_key()).unwrap().data_mut()[0] = 0.7;
    let x = random_tensor(&[1, 8, 1, 1], &mut rng(4));
    let w = store.param("a.h.weight").unwrap().clone();
    let tape = Tape::new();
    let b = Binder::new(&tape, &store, Mode::Eval);
    let (y, beta) = att.forward_with_map(&b, &tape.constant(x.clone())).unwrap();
    assert_eq!(beta.value().data(), &[1.0]);
    for o in 0..8 {
        let h: f64 = (0..8).map(|i| w.data()[o * 8 + i] * x.data()[i]).sum();
        assert!((y.value().data()[o] - (x.data()[o] + 0.7 * h)).abs() < 1e-12);
    }
}

#[test]
fn attention_two_positions_match_scalar_oracle() {
    let att = SelfAttention::new("a", 1, false);
    let mut store = attention_store(&att, 5);
    let (wf, wg, wh, gamma) = (0.8, -1.3, 0.6, 0.45);
    store.param_mut("a.f.weight").unwrap().data_mut()[0] = wf;
    store.param_mut("a.g.weight").unwrap().data_mut()[0] = wg;
    store.param_mut("a.h.weight").unwrap().data_mut()[0] = wh;
    store.param_mut(&att.gamma_key()).unwrap().data_mut()[0] = gamma;
    let xs = [0.9, -0.4];
    let tape = Tape::new();
    let b = Binder::new(&tape, &store, Mode::Eval);
    let y = att.forward(&b, &tape.constant(Tensor::new(&[1, 1, 1, 2], xs.to_vec()).unwrap())).unwrap().value();
    for j in 0..2 {
        let s: Vec<f64> = xs.iter().map(|&xi| (wg * xs[j]) * (wf * xi)).collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let o: f64 = (0..2).map(|i| s[i].exp() / z * wh * xs[i]).sum();
        assert!((y.data()[j] - (xs[j] + gamma * o)).abs() < 1e-6);
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let att = SelfAttention::new("a", 8, false);
    let mut store = attention_store(&att, 6);
    store.param_mut(&att.gamma_key()).unwrap().data_mut()[0] = 0.8;
    let x = random_tensor(&[2, 8, 2, 3], &mut rng(7));
    let err = gradcheck_module(&store, x, vec![], Mode::Eval, |b, v| att.forward(b, &v[0]));
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn conditional_batchnorm_gradients_match_finite_differences() {
    let cbn = CondBatchNorm::new("cbn", 3, 4);
    let mut store = ParamStore::new();
    cbn.init(&mut store, &mut rng(8));
    let x = random_tensor(&[3, 3, 2, 2], &mut rng(9));
    let cond = random_tensor(&[3, 4], &mut rng(10));
    let err = gradcheck_module(&store, x, vec![cond], Mode::Train, |b, v| cbn.forward(b, &v[0], &v[1]));
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn generator_preserves_resolution_and_range() {
    let g = Generator::new(GeneratorConfig::tiny()).unwrap();
    let store: ParamStore<f32> = g.init(&mut rng(11));
    let mut r = rng(12);
    for _ in 0..4 {
        let (h, w) = (16 * r.random_range(1..=3), 16 * r.random_range(1..=5));
        let x = Tensor::<f32>::new(&[2, 1, h, w], (0..2 * h * w).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let z = sample_latent::<f32, _>(2, g.config.z_dim, &mut r);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, Mode::Train);
        let y = g
            .forward(&b, &tape.constant(x), &tape.constant(z), &[DomainLabel::Handwritten, DomainLabel::Rendered])
            .unwrap()
            .value();
        assert_eq!(y.shape(), &[2, 1, h, w]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn generator_rejects_non_divisible_inputs() {
    let g = Generator::new(GeneratorConfig::tiny()).unwrap();
    let store: ParamStore<f32> = g.init(&mut rng(13));
    let tape = Tape::new();
    let b = Binder::new(&tape, &store, Mode::Eval);
    let x = tape.constant(Tensor::<f32>::zeros(&[1, 1, 24, 32]));
    let z = tape.constant(sample_latent::<f32, _>(1, g.config.z_dim, &mut rng(0)));
    let err = g.forward(&b, &x, &z, &[DomainLabel::Handwritten]).unwrap_err();
    assert!(matches!(err, ModelError::NonDivisibleSpatialDims { .. }));
}

#[test]
fn generator_eval_is_deterministic() {
    let g = Generator::new(GeneratorConfig::tiny()).unwrap();
    let store: ParamStore<f32> = g.init(&mut rng(14));
    let x = Tensor::<f32>::full(&[1, 1, 16, 32], 0.3);
    let z = sample_latent::<f32, _>(1, g.config.z_dim, &mut rng(15));
    let run = || {
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, Mode::Eval);
        g.forward(&b, &tape.constant(x.clone()), &tape.constant(z.clone()), &[DomainLabel::Handwritten]).unwrap().value()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn discriminator_score_decomposes_into_projection() {
    let d = Discriminator::new(DiscriminatorConfig::tiny()).unwrap();
    let store: ParamStore<f64> = d.init(&mut rng(16));
    let mut r = rng(17);
    let y = Tensor::new(&[3, 1, 16, 32], (0..3 * 16 * 32).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let labels = [DomainLabel::Handwritten, DomainLabel::Rendered, DomainLabel::Handwritten];
    let tape = Tape::new();
    let b = Binder::new(&tape, &store, Mode::Eval);
    let out = d.forward_parts(&b, &tape.constant(y), &labels).unwrap();
    let table = store.param(&d.embed.key()).unwrap();
    let phi = out.phi.value();
    let c = phi.shape()[1];
    for (i, l) in labels.iter().enumerate() {
        let dot: f64 = (0..c).map(|k| table.data()[l.index() * c + k] * phi.data()[i * c + k]).sum();
        let diff = out.score.value().data()[i] - out.psi.value().data()[i];
        assert!((diff - dot).abs() < 1e-5);
    }
}

#[test]
fn zero_embedding_makes_score_label_independent() {
    let d = Discriminator::new(DiscriminatorConfig::tiny()).unwrap();
    let mut store: ParamStore<f64> = d.init(&mut rng(18));
    store.param_mut(&d.embed.key()).unwrap().data_mut().fill(0.0);
    let y = Tensor::full(&[1, 1, 16, 16], 0.4);
    let score = |c| {
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, Mode::Eval);
        d.forward(&b, &tape.constant(y.clone()), &[c]).unwrap().value().data()[0]
    };
    assert_eq!(score(DomainLabel::Handwritten), score(DomainLabel::Rendered));
}

use formula_tensor::{softmax_slice, Conv2dSpec, Tape, Tensor};
use proptest::prelude::*;

fn tensor_strategy(max_dims: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(1usize..=4, 1..=max_dims).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-5.0f64..5.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in tensor_strategy(3)) {
        let tape = Tape::new();
        let y = tape.var(x.clone()).softmax().unwrap().value();
        let n = *x.shape().last().unwrap();
        for row in y.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax(row in prop::collection::vec(-30.0f64..30.0, 1..8)) {
        let n = row.len();
        let tape = Tape::new();
        let ls = tape.var(Tensor::new(&[n], row.clone()).unwrap()).log_softmax().unwrap().value();
        for (a, p) in ls.data().iter().zip(softmax_slice(&row)) {
            prop_assert!((a - p.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn addition_commutes_under_broadcast(x in tensor_strategy(3), k in -3.0f64..3.0) {
        let tape = Tape::new();
        let last = *x.shape().last().unwrap();
        let row = Tensor::new(&[last], (0..last).map(|i| k * i as f64).collect()).unwrap();
        let (a, b) = (tape.var(x), tape.var(row));
        let (ab, ba) = (a.add(&b).unwrap().value(), b.add(&a).unwrap().value());
        prop_assert_eq!(ab.data(), ba.data());
    }

    #[test]
    fn sum_gradient_is_all_ones_through_permute(x in tensor_strategy(3)) {
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let perm: Vec<usize> = (0..x.rank()).rev().collect();
        let s = v.permute(&perm).unwrap().sum_all();
        let g = tape.backward(s, &[v]).unwrap();
        prop_assert!(g[0].data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn pooling_preserves_mean(h in 1usize..4, w in 1usize..4, seed in 0u64..1000) {
        let n = 2 * 2 * h * 2 * w;
        let data: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 97.0).collect();
        let x = Tensor::new(&[1, 2, 2 * h, 2 * w], data).unwrap();
        let tape = Tape::new();
        let pooled = tape.var(x.clone()).avg_pool2().unwrap().value();
        let mean_in = x.sum() / x.numel() as f64;
        let mean_out = pooled.sum() / pooled.numel() as f64;
        prop_assert!((mean_in - mean_out).abs() < 1e-12);
        prop_assert!(pooled.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn identity_kernel_convolution_is_identity(x in tensor_strategy(2)) {
        let flat = x.reshape(&[1, 1, 1, x.numel()]).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.set(&[0, 0, 1, 1], 1.0);
        let tape = Tape::new();
        let y = tape.var(flat.clone()).conv2d(&tape.constant(k), None, Conv2dSpec::same(3)).unwrap();
        let yv = y.value();
        prop_assert_eq!(yv.data(), flat.data());
    }
}

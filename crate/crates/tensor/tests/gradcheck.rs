use formula_tensor::gradcheck::check_gradients;
use formula_tensor::{concat, Conv2dSpec, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Contract `y` with a fixed random tensor so every output element matters.
fn probe<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = tape.constant(rand_tensor(&y.shape(), 999));
    Ok(y.mul(&w)?.sum_all())
}

fn assert_close(label: &str, inputs: &[Tensor<f64>], f: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>) {
    let report = check_gradients(inputs, 1e-5, f).unwrap();
    assert!(report.max_error() < TOL, "{label}: relative errors {:?}", report.errors);
}

#[test]
fn broadcasting_arithmetic() {
    let a = rand_tensor(&[2, 3, 4], 1);
    let b = rand_tensor(&[3, 1], 2);
    assert_close("add", &[a.clone(), b.clone()], |t, v| probe(t, v[0].add(&v[1])?));
    assert_close("sub", &[a.clone(), b.clone()], |t, v| probe(t, v[0].sub(&v[1])?));
    assert_close("mul", &[a.clone(), b.clone()], |t, v| probe(t, v[0].mul(&v[1])?));
    let denom = b.map(|x| x.signum() * (x.abs() + 0.5));
    assert_close("div", &[a, denom], |t, v| probe(t, v[0].div(&v[1])?));
}

#[test]
fn unary_functions() {
    let x = rand_tensor(&[3, 5], 3);
    let away_from_kink = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    assert_close("relu", &[away_from_kink], |t, v| probe(t, v[0].relu()));
    assert_close("sigmoid", &[x.clone()], |t, v| probe(t, v[0].sigmoid()));
    assert_close("tanh", &[x.clone()], |t, v| probe(t, v[0].tanh()));
    assert_close("exp", &[x.clone()], |t, v| probe(t, v[0].exp()));
    assert_close("ln", &[x.map(|v| v.abs() + 0.2)], |t, v| probe(t, v[0].ln()));
    assert_close("square", &[x.clone()], |t, v| probe(t, v[0].square()));
    assert_close("scalars", &[x], |t, v| probe(t, v[0].mul_scalar(-2.5).add_scalar(0.3).neg()));
}

#[test]
fn reductions() {
    let x = rand_tensor(&[2, 3, 4], 4);
    for axis in 0..3 {
        assert_close("sum_axis", &[x.clone()], move |t, v| probe(t, v[0].sum_axis(axis)?));
        assert_close("mean_axis", &[x.clone()], move |t, v| probe(t, v[0].mean_axis(axis)?));
    }
    assert_close("mean_all", &[x], |_, v| Ok(v[0].square().mean_all()));
}

#[test]
fn shape_ops() {
    let x = rand_tensor(&[2, 3, 4], 5);
    assert_close("reshape", &[x.clone()], |t, v| probe(t, v[0].reshape(&[6, 4])?));
    assert_close("permute", &[x.clone()], |t, v| probe(t, v[0].permute(&[2, 0, 1])?));
    assert_close("narrow", &[x.clone()], |t, v| probe(t, v[0].narrow(1, 1, 2)?));
    assert_close("index_rows", &[rand_tensor(&[5, 3], 6)], |t, v| probe(t, v[0].index_rows(&[4, 0, 4, 2])?));
    assert_close("gather_rows", &[rand_tensor(&[3, 4], 7)], |t, v| probe(t, v[0].gather_rows(&[1, 3, 0])?));
    let y = rand_tensor(&[2, 2, 4], 8);
    assert_close("concat", &[x, y], |t, v| probe(t, concat(&[v[0], v[1]], 1)?));
}

#[test]
fn matrix_products() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rand_tensor(&[2, 4, 3], 9) } else { rand_tensor(&[2, 3, 4], 9) };
        let b = if tb { rand_tensor(&[2, 5, 4], 10) } else { rand_tensor(&[2, 4, 5], 10) };
        assert_close("bmm", &[a, b], move |t, v| probe(t, v[0].bmm(&v[1], ta, tb)?));
    }
    let x = rand_tensor(&[3, 4], 11);
    let w = rand_tensor(&[2, 4], 12);
    let b = rand_tensor(&[2], 13);
    assert_close("matmul", &[x.clone(), rand_tensor(&[4, 2], 14)], |t, v| probe(t, v[0].matmul(&v[1])?));
    assert_close("linear", &[x, w, b], |t, v| probe(t, v[0].linear(&v[1], Some(&v[2]))?));
}

#[test]
fn softmax_family() {
    let x = rand_tensor(&[2, 3, 5], 15);
    assert_close("softmax", &[x.clone()], |t, v| probe(t, v[0].softmax()?));
    assert_close("log_softmax", &[x], |t, v| probe(t, v[0].log_softmax()?));
}

#[test]
fn convolutions() {
    let x = rand_tensor(&[2, 3, 6, 5], 16);
    let w3 = rand_tensor(&[4, 3, 3, 3], 17);
    let w1 = rand_tensor(&[4, 3, 1, 1], 18);
    let w7 = rand_tensor(&[2, 3, 7, 7], 19);
    let b = rand_tensor(&[4], 20);
    assert_close("conv3", &[x.clone(), w3, b.clone()], |t, v| probe(t, v[0].conv2d(&v[1], Some(&v[2]), Conv2dSpec::same(3))?));
    assert_close("conv1", &[x.clone(), w1, b], |t, v| probe(t, v[0].conv2d(&v[1], Some(&v[2]), Conv2dSpec::same(1))?));
    assert_close("conv7s2", &[x, w7], |t, v| {
        probe(t, v[0].conv2d(&v[1], None, Conv2dSpec { stride: 2, padding: 3 })?)
    });
}

#[test]
fn pooling_and_upsampling() {
    let x = rand_tensor(&[2, 2, 4, 6], 21);
    assert_close("avg_pool2", &[x.clone()], |t, v| probe(t, v[0].avg_pool2()?));
    assert_close("max_pool2", &[x.clone()], |t, v| probe(t, v[0].max_pool2()?));
    assert_close("upsample2", &[x], |t, v| probe(t, v[0].upsample2()?));
}

#[test]
fn batch_normalization() {
    let x = rand_tensor(&[3, 2, 2, 3], 22);
    assert_close("bn_train", &[x.clone()], |t, v| probe(t, v[0].batch_norm_train(1e-5)?.0));
    let mean = rand_tensor(&[2], 23);
    let var = rand_tensor(&[2], 24).map(|v| v.abs() + 0.5);
    assert_close("bn_eval", &[x], move |t, v| probe(t, v[0].batch_norm_eval(&mean, &var, 1e-5)?));
}

#[test]
fn shared_subexpressions_accumulate() {
    let x = rand_tensor(&[4], 25);
    assert_close("reuse", &[x], |t, v| {
        let y = v[0].tanh();
        let z = y.mul(&v[0])?.add(&y.square())?;
        probe(t, z)
    });
}

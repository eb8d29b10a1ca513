//! Weight initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;
use crate::tensor::Tensor;

pub fn normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("sizes agree")
}

/// Orthogonal init: the weight viewed as `[shape[0], rest]` has orthonormal
/// rows (or columns, whichever is the shorter side), scaled by `gain`.
pub fn orthogonal<T: Real, R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor<T> {
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product::<usize>().max(1);
    let (short, long) = (rows.min(cols), rows.max(cols));
    // `short` vectors of length `long`, orthonormalized by modified Gram-Schmidt.
    let mut vecs: Vec<Vec<f64>> = (0..short)
        .map(|_| (0..long).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for i in 0..short {
        for j in 0..i {
            let (head, tail) = vecs.split_at_mut(i);
            let d: f64 = head[j].iter().zip(tail[0].iter()).map(|(a, b)| a * b).sum();
            for (x, &y) in tail[0].iter_mut().zip(&head[j]) {
                *x -= d * y;
            }
        }
        let norm = vecs[i].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut vecs[i] {
            *x /= norm;
        }
    }
    let mut data = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = if rows <= cols { vecs[r][c] } else { vecs[c][r] };
            data[r * cols + c] = T::from_f64_lossy(v * gain);
        }
    }
    Tensor::new(shape, data).expect("sizes agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let w: Tensor<f64> = orthogonal(&[4, 2, 3, 3], 1.0, &mut rng);
        let cols = 18;
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = (0..cols).map(|k| w.data()[i * cols + k] * w.data()[j * cols + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn orthogonal_tall_matrix_has_orthonormal_columns() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w: Tensor<f64> = orthogonal(&[6, 2], 1.0, &mut rng);
        let d: f64 = (0..6).map(|r| w.data()[r * 2] * w.data()[r * 2 + 1]).sum();
        assert!(d.abs() < 1e-10);
    }
}

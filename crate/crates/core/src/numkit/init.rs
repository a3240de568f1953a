//! Parameter initializers: Kaiming-uniform for conv/linear weights,
//! orthogonal blocks for recurrent weights, zeros for biases.

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{Real, Tensor};

/// `U(-b, b)` with `b = sqrt(6 / fan_in)` (ReLU gain).
pub fn kaiming_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

/// Uniform in `(-bound, bound)`, used for small output heads.
pub fn uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

/// A `rows x cols` matrix with orthonormal rows (or columns when
/// `rows > cols`), from modified Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // `short` vectors of length `long`.
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(short);
    while vecs.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng.sample(StandardNormal)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        vecs.push(v);
    }
    Tensor::from_fn(&[rows, cols], |i| {
        let (r, c) = (i / cols, i % cols);
        let v = if rows >= cols { vecs[c][r] } else { vecs[r][c] };
        T::of(v * gain)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_square_has_orthonormal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m: Tensor<f64> = orthogonal(6, 6, 1.0, &mut rng);
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = (0..6).map(|k| m.at(&[i, k]) * m.at(&[j, k])).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f32> = kaiming_uniform(&[8, 24], 24, &mut rng);
        let b = (6.0f32 / 24.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= b));
    }
}

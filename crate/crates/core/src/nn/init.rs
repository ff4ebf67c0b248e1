use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

/// I.i.d. uniform on `[-L, L]`, `L = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in.max(1) + fan_out.max(1)) as f64).sqrt();
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.random_range(-limit..=limit)).collect(),
    }
}

/// Random `n × n` orthogonal matrix: the Q factor of a standard normal
/// matrix with the signs fixed so that R has a positive diagonal.
/// Computed by modified Gram-Schmidt with one re-orthogonalization pass.
pub fn orthogonal(n: usize, rng: &mut impl Rng) -> Tensor {
    // columns of the random matrix, stored one per row for locality
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for j in 0..n {
        let (done, rest) = cols.split_at_mut(j);
        let v = &mut rest[0];
        for _ in 0..2 {
            for q in done.iter() {
                let dot: f64 = q.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                for (x, qi) in v.iter_mut().zip(q) {
                    *x -= dot * qi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
    }
    let mut data = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * n + j] = v;
        }
    }
    Tensor {
        shape: vec![n, n],
        data,
    }
}

/// `max |MᵀM − I|` over all entries of a square matrix.
pub fn orthogonality_error(m: &Tensor) -> f64 {
    let n = m.shape[0];
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..n).map(|r| m.data[r * n + i] * m.data[r * n + j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

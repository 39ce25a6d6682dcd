use ndarray::{Array, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::mdp::TabularMdp;

pub(crate) fn random_mdp(rng: &mut ChaCha8Rng, n: usize, m: usize, gamma: f64) -> TabularMdp {
    let mut t = Array3::<f64>::zeros((n, m, n));
    for s in 0..n {
        for a in 0..m {
            let row: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let sum: f64 = row.iter().sum();
            for (k, x) in row.iter().enumerate() {
                t[[s, a, k]] = x / sum;
            }
        }
    }
    let mu: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let total: f64 = mu.iter().sum();
    TabularMdp::new(t, gamma, Array::from_iter(mu.iter().map(|x| x / total)), None).unwrap()
}

pub(crate) fn random_reward(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0))
}

/// Inverse-CDF draw, kept separate from the crate's sampler.
pub(crate) fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

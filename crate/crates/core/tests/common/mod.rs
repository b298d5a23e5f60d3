#![allow(dead_code)]

use paglab::data::{Dataset, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Central differences of `f` at `x`.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

pub fn dataset(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Dataset {
    Dataset::new(features, labels, dim, classes, Split::Train, "test").unwrap()
}

/// Random points with every class present.
pub fn random_dataset(seed: u64, n: usize, dim: usize, classes: usize) -> Dataset {
    let mut r = rng(seed);
    let features = uniform(&mut r, n * dim, -3.0, 3.0);
    let labels = (0..n).map(|i| if i < classes { i } else { r.gen_range(0..classes) }).collect();
    dataset(features, labels, dim, classes)
}

//! Shared helpers for unit tests.

use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::graph::SpanningTree;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random well-conditioned SPD matrix with substantial off-diagonal mass.
pub(crate) fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut m = &a * a.transpose() / n as f64;
    for i in 0..n {
        m[(i, i)] += 0.3;
    }
    m
}

pub(crate) fn random_tree(n: usize, rng: &mut ChaCha8Rng) -> SpanningTree {
    if n == 2 {
        return SpanningTree::new(2, alloc::vec![(0, 1)]).unwrap();
    }
    let code: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
    SpanningTree::from_prufer(n, &code).unwrap()
}

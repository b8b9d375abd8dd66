//! Shared helpers for the criterion benches.

use fastmm_core::DenseMatrix;
use rand::Rng;
use rand::SeedableRng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

//! Shared fixtures for the kernel benchmarks in `benches/`.

use operon::data::{gen_example1, linspace};
use operon::{Matrix, OperatorDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Entries uniform in `[-1, 1)`.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// First Darcy example with `k` equidistant conductivities in `[1, 100]`.
pub fn example1(grid_n: usize, k: usize) -> OperatorDataset {
    gen_example1(&linspace(1.0, 100.0, k), grid_n).expect("valid parameters")
}

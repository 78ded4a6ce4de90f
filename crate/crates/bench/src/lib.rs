//! Shared fixtures for the benchmarks.

use dbps_core::{generate, Dataset, GeneratorSpec, LogPredDensityTable};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Training and held-out halves of one two-outcome simulation.
pub fn split_sim(n: usize, held: usize, seed: u64) -> (Dataset, Dataset) {
    let sim = generate(&GeneratorSpec::sim3(n + held, seed)).expect("valid generator spec");
    let train: Vec<usize> = (0..n).collect();
    let test: Vec<usize> = (n..n + held).collect();
    (sim.data.select(&train), sim.data.select(&test))
}

/// Log-density table with columns that overlap the way CV tables do.
pub fn overlapping_table(n: usize, j: usize, seed: u64) -> LogPredDensityTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..n).map(|_| -1.0 - 3.0 * rng.random::<f64>()).collect();
    let v = DMatrix::from_fn(n, j, |i, _| base[i] + 0.3 * (rng.random::<f64>() - 0.5));
    LogPredDensityTable::from_values(v).expect("finite table")
}

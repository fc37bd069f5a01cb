//! Deterministic inputs for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Chirp plus noise, `seconds` long at `rate` Hz.
pub fn utterance(seconds: f32, rate: u32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * rate as f32) as usize;
    (0..n)
        .map(|i| {
            let t = i as f32 / rate as f32;
            let f = 200.0 + 1800.0 * t / seconds;
            0.5 * (std::f32::consts::TAU * f * t).sin() + rng.random_range(-0.05..0.05)
        })
        .collect()
}

/// `rows` x `cols` matrix with entries in [-1, 1).
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn flat(rows: usize, cols: usize, seed: u64) -> Vec<f32> {
    matrix(rows, cols, seed).into_iter().flatten().map(|x| x as f32).collect()
}

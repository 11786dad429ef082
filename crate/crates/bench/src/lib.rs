//! Seeded inputs shared by the benchmarks.

use chorekit::io::SeededRng;

pub fn randn(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    (0..n).map(|_| rng.normal()).collect()
}

pub fn randn_f32(seed: u64, n: usize) -> Vec<f32> {
    randn(seed, n).into_iter().map(|v| v as f32).collect()
}

//! Seeded randomness. Every random draw in the crate comes from a ChaCha
//! stream keyed by `(seed, stream)`, so results never depend on thread
//! scheduling or the OS.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` standard normal samples from stream `(seed, stream)`.
pub fn normal_vec(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, stream);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

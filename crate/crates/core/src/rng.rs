//! Reproducible random streams for Monte Carlo work.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;

/// Generator for trial `index` under the root `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs `trials` independent trials in parallel, trial `i` on stream `i`.
/// Results come back in trial order, so any later reduction is deterministic.
pub fn monte_carlo<T, F>(seed: u64, trials: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> Result<T> + Sync,
{
    (0..trials)
        .into_par_iter()
        .map(|i| f(i, &mut stream_rng(seed, i as u64)))
        .collect()
}

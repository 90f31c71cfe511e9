//! Seeded random streams.
//!
//! Every stochastic routine takes a `u64` seed. Independent work items
//! (replications, restarts, folds) draw from `stream(seed, index)`, which
//! selects ChaCha stream `index` under key `seed`, so item `r` can be
//! reproduced in isolation without replaying items `0..r`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

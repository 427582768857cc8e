//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit 64-bit seed. Independent
//! components of one experiment draw from distinct ChaCha streams of the same
//! key so that, e.g., the response noise for row `i` does not shift when a
//! different number of mismatch rows is planted.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `stream` of the generator keyed by `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

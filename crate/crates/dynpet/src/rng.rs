//! Reproducible random streams.
//!
//! Every random draw comes from a ChaCha8 generator keyed by the run seed.
//! Event `k` uses stream `k`; the total count uses stream [`COUNT_STREAM`].
//! Draws therefore do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const COUNT_STREAM: u64 = u64::MAX;

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

//! Named, independent random streams.
//!
//! Every consumer of randomness derives its generator from `(seed, domain,
//! index)` so that switching one feature off never shifts the draws seen by
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    PolypProxy = 1,
    EddProxy = 2,
    Unseen = 3,
    Split = 4,
    Fold = 5,
    Shuffle = 6,
    Augment = 7,
    AnchorSampling = 8,
    Init = 9,
    Plan = 10,
}

/// Generator for stream `(domain, index)` under `seed`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 56) ^ index);
    rng
}

/// Packs two counters into one stream index.
pub fn pair(a: u64, b: u64) -> u64 {
    (a << 28) ^ b
}

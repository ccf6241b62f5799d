//! Seeded generators. ChaCha keeps streams stable across platforms and crate versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Generator for `seed`, on an independent stream per `purpose`.
pub fn seeded(seed: u64, purpose: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

pub(crate) mod stream {
    pub const DATASET: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const LABELED_BATCHES: u64 = 3;
    pub const UNLABELED_BATCHES: u64 = 4;
    pub const CUTMIX: u64 = 5;
    pub const NET_INIT: u64 = 6;
}

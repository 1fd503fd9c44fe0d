//! Seeded, splittable random streams.
//!
//! A [`SeedStream`] is a 64-bit state that can be split into child streams by
//! tag. Every sampler in the crate takes a stream (or an RNG built from one),
//! so concurrent workers never share a generator and results depend only on
//! the seed and the split layout.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StreamRng = ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    state: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self {
            state: splitmix64(seed),
        }
    }

    /// Derives an independent child stream identified by `tag`.
    pub fn child(&self, tag: u64) -> Self {
        Self {
            state: splitmix64(self.state ^ splitmix64(tag.wrapping_add(0x632B_E59B_D9B4_E019))),
        }
    }

    pub fn rng(&self) -> StreamRng {
        ChaCha20Rng::seed_from_u64(self.state)
    }
}

/// Splits `n` items over `workers` shards; earlier shards take the remainder.
pub fn shard_sizes(n: usize, workers: usize) -> Vec<usize> {
    let workers = workers.max(1);
    let base = n / workers;
    let extra = n % workers;
    (0..workers).map(|w| base + usize::from(w < extra)).collect()
}

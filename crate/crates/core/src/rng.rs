//! Keyed random streams. Every consumer (layer, iteration, MC sample) derives
//! its own stream so draws never depend on evaluation order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Child stream identified by `key`; distinct keys give independent streams.
    pub fn derive(&self, key: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(key.wrapping_add(0xD1B5_4A32_D192_ED03))),
        }
    }

    /// Derive along a path of keys, e.g. `[iteration, sample, layer]`.
    pub fn derive_path(&self, keys: &[u64]) -> Self {
        keys.iter().fold(*self, |s, &k| s.derive(k))
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    pub fn next_u64_at_start(&self) -> u64 {
        self.rng().next_u64()
    }
}

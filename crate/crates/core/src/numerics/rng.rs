use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Generator handed out by [`RngStream::rng`].
pub type StreamRng = ChaCha12Rng;

/// Domain tags used to separate streams by purpose.
pub mod domain {
    pub const TASK: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const INIT: u64 = 4;
    pub const PLAN: u64 = 5;
    pub const SKETCH: u64 = 6;
    pub const BATCH: u64 = 7;
    pub const CLIENT: u64 = 8;
    pub const MASK: u64 = 9;
    pub const PAIR: u64 = 10;
    pub const REINIT: u64 = 11;
    pub const SCHEDULE: u64 = 12;
    pub const DIAGNOSE: u64 = 13;
    pub const PROBE: u64 = 14;
}

/// A named, reproducible random stream: `(seed, stream id)`.
///
/// Backed by ChaCha with the stream id as the cipher nonce, so distinct ids
/// give independent sequences regardless of which thread draws them or when.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Child stream for `(domain, index)`. Same parent and arguments always
    /// give the same child.
    pub fn derive(&self, domain: u64, index: u64) -> Self {
        let tag = splitmix64(domain.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ splitmix64(index));
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ tag),
        }
    }

    pub fn rng(&self) -> StreamRng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

//! Seeded random streams.
//!
//! All randomness goes through ChaCha8 with a 64-bit seed and a 64-bit
//! stream id, so every (seed, stream) pair names an independent,
//! platform-stable sequence. Per-index streams make datasets and crop sets
//! reproducible without storing them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

/// Stream namespaces keep unrelated consumers of one seed apart.
pub mod domain {
    pub const PHANTOM: u64 = 0x5048_414e_0000_0000;
    pub const INIT: u64 = 0x494e_4954_0000_0000;
    pub const TRAIN: u64 = 0x5452_4149_0000_0000;
    pub const SAMPLER: u64 = 0x5341_4d50_0000_0000;
    pub const EVAL: u64 = 0x4556_414c_0000_0000;
    pub const PROBE: u64 = 0x5052_4f42_0000_0000;
    pub const SUPERVISED: u64 = 0x5355_5056_0000_0000;
}

/// Returns the generator for `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Serializable position of a [`Rng`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as decimal string (u128 does not survive JSON numbers).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Option<Rng> {
        let pos: u128 = self.word_pos.parse().ok()?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Some(rng)
    }
}

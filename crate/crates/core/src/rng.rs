//! Counter-based seed streams.
//!
//! Every stochastic step takes an explicit generator derived from
//! `(master_seed, tag, index)`. The derivation is a pure function, so work can
//! be scheduled on any number of threads without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type used throughout the crate.
pub type Stream = ChaCha8Rng;

/// A node in the seed derivation tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedSpec {
    seed: u64,
}

impl SeedSpec {
    pub const fn new(master_seed: u64) -> Self {
        Self { seed: master_seed }
    }

    pub fn value(&self) -> u64 {
        self.seed
    }

    /// Derive the child seed for `(tag, index)`.
    pub fn child(&self, tag: &str, index: u64) -> SeedSpec {
        let tag_hash = fnv1a64(tag.as_bytes());
        let mut h = mix64(self.seed ^ 0x9E37_79B9_7F4A_7C15);
        h = mix64(h ^ tag_hash);
        h = mix64(h.wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03)));
        SeedSpec { seed: h }
    }

    /// Generator seeded from this node.
    pub fn rng(&self) -> Stream {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Shorthand for `self.child(tag, index).rng()`.
    pub fn stream(&self, tag: &str, index: u64) -> Stream {
        self.child(tag, index).rng()
    }
}

impl From<u64> for SeedSpec {
    fn from(seed: u64) -> Self {
        SeedSpec::new(seed)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

// splitmix64 finalizer
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

//! Splittable, counter-based random streams.
//!
//! A [`RngStream`] is a key, not a generator: it names a position in the
//! random universe of a run. Children are derived with [`RngStream::split`],
//! and the actual ChaCha generator is only materialized on demand. Two
//! streams with the same key always produce the same numbers, regardless of
//! the order in which other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    key: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { key: splitmix64(seed) }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Child stream identified by an integer counter.
    pub fn split(&self, index: u64) -> Self {
        RngStream {
            key: splitmix64(self.key ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019))),
        }
    }

    /// Child stream identified by a name.
    pub fn named(&self, label: &str) -> Self {
        self.split(hash_label(label))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

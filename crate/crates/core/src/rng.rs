//! Seed handling. Every random decision in the toolkit flows from a single
//! `RngSeed` through named substreams, so independent components never share
//! or race a generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn stream(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derive an independent child seed identified by a label.
    pub fn child(self, tag: &str) -> RngSeed {
        self.child_idx(tag, 0)
    }

    /// Derive an independent child seed identified by a label and an index
    /// (task number, layer number, ...).
    pub fn child_idx(self, tag: &str, idx: u64) -> RngSeed {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in tag.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= idx.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        RngSeed(mix(self.0 ^ mix(h)))
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

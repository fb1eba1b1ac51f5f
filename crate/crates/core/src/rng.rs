//! Named, reproducible random sub-streams derived from one root seed.
//!
//! Every consumer asks for a stream by `(label, index)`; the stream is a fresh
//! ChaCha generator seeded from a hash of the root seed, the label and the
//! index, so any single component can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    root: u64,
}

impl Streams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Stream for `label`, indexed by a single counter (step, replicate, ...).
    pub fn rng(&self, label: &str, index: u64) -> Rng {
        self.rng2(label, index, 0)
    }

    /// Stream for `label` partitioned by two indices, e.g. (task id, rollout index).
    pub fn rng2(&self, label: &str, a: u64, b: u64) -> Rng {
        let mut h = splitmix(self.root ^ 0x5851_f42d_4c95_7f2d);
        h = splitmix(h ^ fnv1a(label.as_bytes()));
        h = splitmix(h ^ a);
        h = splitmix(h ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        ChaCha8Rng::seed_from_u64(h)
    }

    /// Derived child seed, for handing a whole sub-experiment its own root.
    pub fn child(&self, label: &str, index: u64) -> Streams {
        let h = splitmix(splitmix(self.root ^ fnv1a(label.as_bytes())) ^ index);
        Streams::new(h)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

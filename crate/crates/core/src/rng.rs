//! Seeded random streams addressed by `(seed, name)`.
//!
//! Each name maps onto its own ChaCha stream id, so draws from one stream never
//! shift the sequence observed on another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    name: String,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, name: impl Into<String>) -> Self {
        let name = name.into();
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a(name.as_bytes()));
        Self { seed, name, inner }
    }

    /// A stream derived from this one's seed with a nested name.
    pub fn substream(&self, name: &str) -> Self {
        Self::new(self.seed, format!("{}/{}", self.name, name))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

//! Seedable, splittable random number generation.
//!
//! Every stream is a ChaCha8 keystream. A stream is identified by a 64-bit
//! key; child streams derive their key from the parent key and a tag through
//! the SplitMix64 finalizer, so `SatRng::new(s).fork(a).fork(b)` is a pure
//! function of `(s, a, b)`. Consumers that need per-iteration or per-image
//! randomness fork by index instead of carrying generator state around, which
//! keeps training resumable from a checkpoint without persisting RNG state.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct SatRng {
    key: u64,
    inner: ChaCha8Rng,
}

impl SatRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream. Does not advance `self`.
    pub fn fork(&self, tag: u64) -> Self {
        Self::new(splitmix64(self.key ^ splitmix64(tag)))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Seeded Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}

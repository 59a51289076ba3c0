//! Seeded random streams.
//!
//! Every consumer of randomness gets its own [`RandomStream`], derived from
//! the run seed, a [`Purpose`] tag and up to a few integer keys
//! (worker id, round, local iteration, ...). Derivation hashes the tuple with
//! the SplitMix64 finalizer and seeds a ChaCha12 generator from the result,
//! so a stream depends only on its key and never on how many numbers other
//! streams consumed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// What a stream is used for; part of the derivation key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    /// Synthetic class means.
    DataMeans = 1,
    /// Synthetic training-set noise.
    TrainNoise = 2,
    /// Synthetic evaluation-set noise.
    EvalNoise = 3,
    /// Shard size plan.
    Partition = 4,
    /// Initial model parameters.
    Init = 5,
    /// Per-round worker selection, keyed by round.
    Selection = 6,
    /// Minibatch draws, keyed by (worker, round, iteration).
    LocalSgd = 7,
    /// Anything test or tool specific.
    Auxiliary = 8,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix_key(seed: u64, purpose: Purpose, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ (purpose as u64));
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(GOLDEN)));
    }
    h
}

/// Deterministic pseudo-random stream. Not meant to be shared across threads.
#[derive(Debug, Clone)]
pub struct RandomStream {
    inner: ChaCha12Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream for `(seed, purpose, keys)`.
    pub fn derive(seed: u64, purpose: Purpose, keys: &[u64]) -> Self {
        Self::new(mix_key(seed, purpose, keys))
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

impl RngCore for RandomStream {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_stream() {
        let mut a = RandomStream::derive(42, Purpose::LocalSgd, &[3, 7, 1]);
        let mut b = RandomStream::derive(42, Purpose::LocalSgd, &[3, 7, 1]);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn keys_and_purposes_separate_streams() {
        let base = RandomStream::derive(42, Purpose::LocalSgd, &[3, 7, 1]).next_u64();
        assert_ne!(base, RandomStream::derive(42, Purpose::LocalSgd, &[3, 7, 2]).next_u64());
        assert_ne!(base, RandomStream::derive(42, Purpose::LocalSgd, &[7, 3, 1]).next_u64());
        assert_ne!(
            base,
            RandomStream::derive(42, Purpose::Selection, &[3, 7, 1]).next_u64()
        );
        assert_ne!(base, RandomStream::derive(43, Purpose::LocalSgd, &[3, 7, 1]).next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut s = RandomStream::new(1);
        for _ in 0..10_000 {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}

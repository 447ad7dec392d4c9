//! Seeded, splittable random streams.
//!
//! A stream is a ChaCha8 generator keyed by a 64-bit seed. Child streams are
//! derived from `(seed, label)` so independent consumers (weight init, batch
//! order, probes) never perturb each other's sequences.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; depends only on this stream's seed and `label`.
    pub fn fork(&self, label: &str) -> RandomStream {
        RandomStream::new(splitmix64(self.seed ^ fnv1a(label.as_bytes())))
    }

    /// Child stream keyed by an index, e.g. one per modality.
    pub fn fork_indexed(&self, label: &str, index: u64) -> RandomStream {
        RandomStream::new(splitmix64(
            splitmix64(self.seed ^ fnv1a(label.as_bytes())) ^ index,
        ))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RandomStream::new(42);
        let mut b = RandomStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn forks_are_independent_of_parent_consumption() {
        let mut a = RandomStream::new(7);
        let before = a.fork("init").next_u64();
        a.uniform();
        assert_eq!(a.fork("init").next_u64(), before);
        assert_ne!(a.fork("init").next_u64(), a.fork("batches").next_u64());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut s = RandomStream::new(1);
        let mut p = s.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}

//! Seeded random streams.
//!
//! Every stream is a ChaCha8 keystream addressed by `(seed, stream)`. ChaCha is
//! counter based, so the `n`-th draw of a given stream is the same on every
//! platform and independent of what other streams have been consumed.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Well-known stream ids. Parameter initialisation uses `INIT_BASE + layer id`.
pub mod streams {
    pub const SHUFFLE: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const POWER: u64 = 5;
    pub const HUTCHINSON: u64 = 6;
    pub const BENCH: u64 = 7;
    pub const INIT_BASE: u64 = 1 << 16;
}

pub const ALGORITHM: &str = "chacha8";

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    draws: u64,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, stream, inner, draws: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of primitive draws taken so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.draws += 1;
        StandardNormal.sample(&mut self.inner)
    }

    /// +1 or -1 with equal probability.
    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.draws += 1;
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = Rng::new(7, 3);
        let mut b = Rng::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        assert_eq!(a.draws(), 100);
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = Rng::new(7, 1);
        let mut b = Rng::new(7, 2);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut r = Rng::new(1, 0);
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut s = v.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(v, s);
    }

    #[test]
    fn rademacher_balanced() {
        let mut r = Rng::new(3, 9);
        let total: f64 = (0..10_000).map(|_| r.rademacher()).sum();
        assert!(total.abs() < 400.0);
    }
}

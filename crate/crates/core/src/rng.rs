//! Seeded, platform-independent random source.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Name of the generator backing [`Rng`]. Bumped if the stream ever changes.
pub const RNG_ALGORITHM: &str = "chacha8/rand_chacha-0.3";

/// Deterministic generator: equal seeds give equal streams on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Independent stream derived from this generator's seed, so that a
    /// sub-task can draw without perturbing the parent's sequence.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.r#gen::<f64>()
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + sd * z
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn between(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.r#gen::<bool>()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }

    /// Index drawn proportionally to `weights` (non-negative, not all zero).
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut target = self.uniform(0.0, total);
        for (i, w) in weights.iter().enumerate() {
            if target < *w {
                return i;
            }
            target -= w;
        }
        // rounding left us past the end: take the last positive weight
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_give_equal_streams() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn stream_is_pinned() {
        // guards against silent changes of the underlying generator
        let mut r = Rng::new(7);
        let first: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        let mut again = ChaCha8Rng::seed_from_u64(7);
        let expect: Vec<u64> = (0..3).map(|_| again.next_u64()).collect();
        assert_eq!(first, expect);
    }

    #[test]
    fn forks_are_independent_of_parent_progress() {
        let mut parent = Rng::new(3);
        let f1: Vec<u64> = {
            let mut f = parent.fork(9);
            (0..5).map(|_| f.next_u64()).collect()
        };
        for _ in 0..100 {
            parent.next_u64();
        }
        let mut f = parent.fork(9);
        let f2: Vec<u64> = (0..5).map(|_| f.next_u64()).collect();
        assert_eq!(f1, f2);
        let mut other = parent.fork(10);
        assert_ne!(f1[0], other.next_u64());
    }

    #[test]
    fn weighted_index_skips_zero_weights() {
        let mut r = Rng::new(1);
        for _ in 0..1000 {
            let i = r.weighted_index(&[0.0, 1.0, 0.0, 2.0]);
            assert!(i == 1 || i == 3);
        }
    }
}

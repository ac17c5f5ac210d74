use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic random stream.
///
/// Backed by ChaCha8 (a counter-based stream cipher), so the same seed yields
/// the same draws on every platform. Child streams are derived by mixing the
/// parent seed with a path of integers through SplitMix64.
#[derive(Clone, Debug)]
pub struct RngHandle {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of stream identifiers.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn seeded_rng(seed: u64) -> RngHandle {
    RngHandle {
        seed,
        inner: ChaCha8Rng::seed_from_u64(seed),
    }
}

impl RngHandle {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `(self.seed, path)`; does not advance `self`.
    pub fn derive(&self, path: &[u64]) -> RngHandle {
        seeded_rng(derive_seed(self.seed, path))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// `k` distinct indices from `0..n`, uniformly without replacement, in
    /// draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k.min(n)).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = seeded_rng(42);
        let mut b = seeded_rng(42);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn different_seeds_diverge_early() {
        let mut a = seeded_rng(1);
        let mut b = seeded_rng(2);
        let differs = (0..10).any(|_| a.uniform() != b.uniform());
        assert!(differs);
    }

    #[test]
    fn uniform_mean_is_half() {
        let mut r = seeded_rng(7);
        let n = 100_000;
        let mean = (0..n).map(|_| r.uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let root = seeded_rng(9);
        let mut x = root.derive(&[1, 2]);
        let mut y = root.derive(&[1, 2]);
        let mut z = root.derive(&[2, 1]);
        let (a, b, c) = (x.uniform(), y.uniform(), z.uniform());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sampling_without_replacement_is_unique() {
        let mut r = seeded_rng(3);
        let mut idx = r.sample_without_replacement(100, 30);
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 30);
        assert!(idx.iter().all(|&i| i < 100));
    }
}

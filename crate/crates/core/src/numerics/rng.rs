use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Labeled, splittable random stream.
///
/// The generator key is a SHA-256 digest of `(seed, stream_id)`, so distinct labels
/// never share a key and draws are identical on every platform.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: impl Into<String>) -> Self {
        let stream_id = stream_id.into();
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update((stream_id.len() as u64).to_le_bytes());
        h.update(stream_id.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        RngStream {
            seed,
            stream_id,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Child stream `parent/label`; independent of how many draws the parent has made.
    pub fn child(&self, label: impl AsRef<str>) -> Self {
        RngStream::new(self.seed, format!("{}/{}", self.stream_id, label.as_ref()))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    /// Index drawn from unnormalized nonnegative weights.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut r = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if r < w {
                return i;
            }
            r -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream_same_draws() {
        let mut a = RngStream::new(7, "x");
        let mut b = RngStream::new(7, "x");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn child_streams_differ_and_ignore_parent_position() {
        let mut parent = RngStream::new(7, "root");
        let c1 = parent.child("a");
        parent.next_u64();
        let c2 = parent.child("a");
        let mut c1 = c1;
        let mut c2 = c2;
        assert_eq!(c1.next_u64(), c2.next_u64());
        let mut other = parent.child("b");
        let mut a = parent.child("a");
        assert_ne!(a.next_u64(), other.next_u64());
    }

    #[test]
    fn uniform_passes_chi_square_at_1e5() {
        // 20 equiprobable bins; the 99.9% critical value for 19 dof is 43.8.
        for label in ["s0", "s1", "s1/child"] {
            let mut r = RngStream::new(42, label);
            let n = 100_000;
            let mut bins = [0usize; 20];
            for _ in 0..n {
                bins[(r.uniform() * 20.0) as usize] += 1;
            }
            let expected = n as f64 / 20.0;
            let chi2: f64 = bins
                .iter()
                .map(|&o| (o as f64 - expected).powi(2) / expected)
                .sum();
            assert!(chi2 < 43.8, "{label}: chi2 = {chi2}");
        }
    }

    #[test]
    fn weighted_respects_zero_weights() {
        let mut r = RngStream::new(1, "w");
        for _ in 0..1000 {
            assert_ne!(r.weighted(&[1.0, 0.0, 2.0]), 1);
        }
    }
}

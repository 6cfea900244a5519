use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Probability of each sequence length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthDist {
    pub lengths: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Default for LengthDist {
    fn default() -> Self {
        LengthDist {
            lengths: vec![4, 5, 6],
            probs: vec![0.5, 0.3, 0.2],
        }
    }
}

impl LengthDist {
    pub fn fixed(len: usize) -> Self {
        LengthDist {
            lengths: vec![len],
            probs: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.probs.iter().sum();
        if self.lengths.is_empty()
            || self.lengths.len() != self.probs.len()
            || self.lengths.contains(&0)
            || self.probs.iter().any(|p| !(*p >= 0.0))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!("invalid length distribution {self:?}")));
        }
        Ok(())
    }

    pub fn min_len(&self) -> usize {
        self.lengths.iter().copied().min().unwrap_or(0)
    }

    /// A length no longer than `cap`, drawn from the distribution restricted to such lengths.
    fn draw(&self, cap: usize, rng: &mut RngStream) -> Option<usize> {
        let w: Vec<f64> = self
            .lengths
            .iter()
            .zip(&self.probs)
            .map(|(&l, &p)| if l <= cap { p } else { 0.0 })
            .collect();
        if w.iter().all(|&x| x == 0.0) {
            return None;
        }
        Some(self.lengths[rng.weighted(&w)])
    }
}

/// Split one cluster's members (in temporal order) into consecutive sequences
/// whose lengths follow `dist`. When fewer members remain than the drawn length
/// allows, the draw is restricted to lengths that fit; leftovers shorter than
/// every length are dropped.
pub fn group_frames(members: &[usize], dist: &LengthDist, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut rest = members;
    while let Some(l) = dist.draw(rest.len(), rng) {
        out.push(rest[..l].to_vec());
        rest = &rest[l..];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn below_minimum_gives_nothing() {
        let mut r = RngStream::new(0, "g");
        assert!(group_frames(&[1, 2, 3], &LengthDist::default(), &mut r).is_empty());
    }

    #[test]
    fn forced_length_takes_all_in_order() {
        let mut r = RngStream::new(0, "g");
        assert_eq!(group_frames(&[3, 8, 9, 12], &LengthDist::fixed(4), &mut r), vec![vec![3, 8, 9, 12]]);
    }

    #[test]
    fn default_distribution_frequencies() {
        let dist = LengthDist::default();
        dist.validate().unwrap();
        let mut r = RngStream::new(42, "group-stats");
        let mut counts = [0usize; 3];
        let mut n = 0;
        let mut start = 0;
        while n < 10_000 {
            // large clusters keep the tail correction negligible
            let members: Vec<usize> = (start..start + 5000).collect();
            start += 5000;
            for s in group_frames(&members, &dist, &mut r) {
                if n == 10_000 {
                    break;
                }
                counts[s.len() - 4] += 1;
                n += 1;
            }
        }
        for (c, p) in counts.iter().zip([0.5, 0.3, 0.2]) {
            let f = *c as f64 / 10_000.0;
            assert!((f - p).abs() <= 0.015, "{counts:?}");
        }
    }

    #[test]
    fn bad_distribution_rejected() {
        assert!(LengthDist { lengths: vec![4, 5], probs: vec![0.5, 0.6] }.validate().is_err());
        assert!(LengthDist { lengths: vec![0], probs: vec![1.0] }.validate().is_err());
    }

    proptest! {
        #[test]
        fn sequences_are_ordered_disjoint_and_sized(n in 0usize..60, seed in 0u64..1000) {
            let members: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
            let mut r = RngStream::new(seed, "g");
            let seqs = group_frames(&members, &LengthDist::default(), &mut r);
            let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
            prop_assert!(flat.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(seqs.iter().all(|s| (4..=6).contains(&s.len())));
            prop_assert!(n - flat.len() < 4);
            prop_assert_eq!(&flat[..], &members[..flat.len()]);
        }
    }
}

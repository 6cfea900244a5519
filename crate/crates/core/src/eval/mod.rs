//! Metrics on latent frames: Fréchet distance, Recall@1, a toy subject-consistency
//! score and layout adherence, all over the same 64-d pooled features.
//!
//! The pooled features are a stand-in for learned image embeddings, so scores are
//! reported under `toy_` names and are not comparable to published numbers.

pub mod story;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{rasterize_bbox, BoundingBox};
use crate::numerics::Tensor;
use crate::pipeline::detect_subject_stub;

pub use story::{evaluate_mode, mode_records, story_features, EvalMode, ModeResult};

pub const FEATURE_GRID: usize = 4;
pub const FEATURE_DIM: usize = FEATURE_GRID * FEATURE_GRID * 4;
/// Added to covariance eigenvalues before taking square roots.
pub const SQRT_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Full,
    /// Cells outside the subject box are zeroed before pooling.
    Subject,
}

/// Mean of each channel over each cell of a 4x4 partition of the frame.
/// Grid edges split latent cells fractionally, so any frame size works.
fn pool(frame: &Tensor, keep: Option<&[bool]>) -> Vec<f64> {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let overlap = |k: usize, a: f64, b: f64| ((k as f64 + 1.0).min(b) - (k as f64).max(a)).max(0.0);
    let g = FEATURE_GRID as f64;
    let mut out = vec![0.0; FEATURE_DIM];
    for gi in 0..FEATURE_GRID {
        let (ya, yb) = (gi as f64 * h as f64 / g, (gi + 1) as f64 * h as f64 / g);
        for gj in 0..FEATURE_GRID {
            let (xa, xb) = (gj as f64 * w as f64 / g, (gj + 1) as f64 * w as f64 / g);
            let mut acc = [0.0; 4];
            let mut wsum = 0.0;
            for i in 0..h {
                let oy = overlap(i, ya, yb);
                if oy == 0.0 {
                    continue;
                }
                for j in 0..w {
                    let a = oy * overlap(j, xa, xb);
                    if a == 0.0 {
                        continue;
                    }
                    wsum += a;
                    if keep.is_some_and(|k| !k[i * w + j]) {
                        continue;
                    }
                    for (c, v) in acc.iter_mut().enumerate() {
                        *v += a * frame.data()[(i * w + j) * 4 + c];
                    }
                }
            }
            for c in 0..4 {
                out[(gi * FEATURE_GRID + gj) * 4 + c] = acc[c] / wsum;
            }
        }
    }
    out
}

/// One 64-d feature row per frame, `(n, 64)`.
pub fn toy_features(frames: &[Tensor], boxes: Option<&[BoundingBox]>, mode: FeatureMode) -> Result<Tensor> {
    let Some(first) = frames.first() else {
        return Err(Error::DegenerateInput("no frames".into()));
    };
    let s = first.shape().to_vec();
    if s.len() != 3 || s[2] != 4 {
        return Err(Error::BadShape {
            op: "toy_features",
            detail: format!("expected (h, w, 4), got {s:?}"),
        });
    }
    let mut data = Vec::with_capacity(frames.len() * FEATURE_DIM);
    for (k, f) in frames.iter().enumerate() {
        if f.shape() != s {
            return Err(Error::shape("toy_features", &s, f.shape()));
        }
        let keep = match mode {
            FeatureMode::Full => None,
            FeatureMode::Subject => {
                let b = boxes.and_then(|b| b.get(k)).ok_or_else(|| Error::shape("toy_features", &[frames.len()], &[boxes.map_or(0, |b| b.len())]))?;
                Some(rasterize_bbox(b, s[0], s[1])?.grid)
            }
        };
        data.extend(pool(f, keep.as_deref()));
    }
    Tensor::new(&[frames.len(), FEATURE_DIM], data)
}

fn mean_cov(x: &Tensor) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if n < 2 {
        return Err(Error::DegenerateInput(format!("need at least 2 feature rows, got {n}")));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("fid features"));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mu: Vec<f64> = (0..d).map(|j| m.column(j).sum() / n as f64).collect();
    let mut c = m.clone();
    for j in 0..d {
        for i in 0..n {
            c[(i, j)] -= mu[j];
        }
    }
    let cov = (c.transpose() * &c) / (n - 1) as f64;
    Ok((mu, cov))
}

/// Square root of a symmetric positive semidefinite matrix; eigenvalues are
/// clipped at 0 and shifted by `eps`.
pub fn sqrtm_psd(m: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let root = e.eigenvalues.map(|l| (l.max(0.0) + eps).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)` with unbiased covariances.
pub fn fid(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape("fid", a.shape(), b.shape()));
    }
    let (mu_a, sa) = mean_cov(a)?;
    let (mu_b, sb) = mean_cov(b)?;
    let diff: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = sqrtm_psd(&sa, SQRT_EPS);
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok(diff + sa.trace() + sb.trace() - 2.0 * cross)
}

/// Fraction of rows whose largest entry is strictly the diagonal one.
pub fn recall_at_1(sim: &Tensor) -> Result<f64> {
    let s = sim.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::NotSquare {
            rows: s.first().copied().unwrap_or(0),
            cols: s.get(1).copied().unwrap_or(0),
        });
    }
    if !sim.all_finite() {
        return Err(Error::NonFinite("similarity matrix"));
    }
    let n = s[0];
    if n == 0 {
        return Err(Error::DegenerateInput("empty similarity matrix".into()));
    }
    let hits = (0..n)
        .filter(|&i| {
            let row = &sim.data()[i * n..(i + 1) * n];
            (0..n).all(|j| j == i || row[i] > row[j])
        })
        .count();
    Ok(hits as f64 / n as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean pairwise cosine similarity of feature rows.
pub fn mean_pairwise_cosine(features: &Tensor) -> Result<f64> {
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if n < 2 {
        return Err(Error::TooFewFrames(n));
    }
    let rows: Vec<&[f64]> = features.data().chunks(d).collect();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += cosine(rows[i], rows[j]);
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// Toy analog of subject consistency: mean pairwise cosine of subject-mode features.
pub fn subject_consistency(frames: &[Tensor], boxes: &[BoundingBox]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::TooFewFrames(frames.len()));
    }
    mean_pairwise_cosine(&toy_features(frames, Some(boxes), FeatureMode::Subject)?)
}

/// Fraction of frames whose detected subject center falls inside the given box.
/// A frame with no detectable subject counts as a miss.
pub fn layout_adherence(frames: &[Tensor], boxes: &[BoundingBox]) -> Result<f64> {
    if frames.is_empty() || frames.len() != boxes.len() {
        return Err(Error::shape("layout_adherence", &[frames.len()], &[boxes.len()]));
    }
    let mut hits = 0;
    for (f, b) in frames.iter().zip(boxes) {
        match detect_subject_stub(f) {
            Ok(d) => {
                let (cx, cy) = d.center();
                hits += usize::from(b.contains(cx, cy));
            }
            Err(Error::NoSubject) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(hits as f64 / frames.len() as f64)
}

/// Expected adherence when the subject lands uniformly at random: the mean box area.
pub fn random_placement_baseline(boxes: &[BoundingBox]) -> f64 {
    boxes.iter().map(|b| b.area()).sum::<f64>() / boxes.len().max(1) as f64
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub config_hash: String,
    pub seed: u64,
}

/// Fixed-width plain-text table of a report.
pub fn summary_table(records: &[MetricRecord]) -> String {
    let w = records.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<w$}  {:>12}  {:>6}\n", "metric", "value", "n");
    for r in records {
        s.push_str(&format!("{:<w$}  {:>12.6}  {:>6}\n", r.metric, r.value, r.n));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::pipeline::synth::{gen_synthetic_stories, SynthConfig};
    use proptest::prelude::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut RngStream::new(seed, "eval"))
    }

    #[test]
    fn constant_frame_features() {
        let f = toy_features(&[Tensor::full(&[16, 16, 4], 0.3)], None, FeatureMode::Full).unwrap();
        assert!(f.data().iter().all(|&x| (x - 0.3).abs() < 1e-15));
        let odd = toy_features(&[Tensor::full(&[7, 5, 4], -2.0)], None, FeatureMode::Full).unwrap();
        assert!(odd.data().iter().all(|&x| (x + 2.0).abs() < 1e-12));
    }

    #[test]
    fn features_match_loop_oracle() {
        let frames: Vec<_> = (0..3).map(|s| randn(&[16, 16, 4], s)).collect();
        let f = toy_features(&frames, None, FeatureMode::Full).unwrap();
        for (n, fr) in frames.iter().enumerate() {
            for gi in 0..4 {
                for gj in 0..4 {
                    for c in 0..4 {
                        let mut s = 0.0;
                        for i in 4 * gi..4 * gi + 4 {
                            for j in 4 * gj..4 * gj + 4 {
                                s += fr.get(&[i, j, c]);
                            }
                        }
                        let got = f.get(&[n, (gi * 4 + gj) * 4 + c]);
                        assert!((got - s / 16.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn subject_mode_with_full_box_is_full_mode() {
        let frames: Vec<_> = (0..4).map(|s| randn(&[16, 16, 4], 10 + s)).collect();
        let full = toy_features(&frames, None, FeatureMode::Full).unwrap();
        let subj = toy_features(&frames, Some(&[BoundingBox::FULL; 4]), FeatureMode::Subject).unwrap();
        assert_eq!(full, subj);
        assert!(toy_features(&[randn(&[4, 4, 4], 1), randn(&[4, 5, 4], 1)], None, FeatureMode::Full).is_err());
    }

    #[test]
    fn fid_identities() {
        let a = randn(&[200, 6], 1);
        assert!(fid(&a, &a).unwrap().abs() <= 1e-8);
        let dvec = [0.5, -1.0, 2.0, 0.0, 0.25, 3.0];
        let shifted = Tensor::from_fn(&[200, 6], |i| a.data()[i] + dvec[i % 6]);
        let want: f64 = dvec.iter().map(|x| x * x).sum();
        assert!((fid(&a, &shifted).unwrap() - want).abs() < 1e-6);
        assert!(matches!(fid(&randn(&[1, 6], 2), &a), Err(Error::DegenerateInput(_))));
    }

    /// Closed-form square root of a 2x2 symmetric positive definite matrix.
    fn sqrt2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let s = det.sqrt();
        let t = (m[0][0] + m[1][1] + 2.0 * s).sqrt();
        [[(m[0][0] + s) / t, m[0][1] / t], [m[1][0] / t, (m[1][1] + s) / t]]
    }

    fn mul2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let mut c = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        c
    }

    fn stats2(x: &Tensor) -> ([f64; 2], [[f64; 2]; 2]) {
        let n = x.shape()[0];
        let mu = [0, 1].map(|j| (0..n).map(|i| x.get(&[i, j])).sum::<f64>() / n as f64);
        let mut c = [[0.0; 2]; 2];
        for i in 0..n {
            for a in 0..2 {
                for b in 0..2 {
                    c[a][b] += (x.get(&[i, a]) - mu[a]) * (x.get(&[i, b]) - mu[b]) / (n - 1) as f64;
                }
            }
        }
        (mu, c)
    }

    #[test]
    fn fid_matches_closed_form_in_two_dimensions() {
        for seed in 0..20 {
            let mut r = RngStream::new(seed, "gauss2");
            let mix = [[r.uniform_range(0.5, 2.0), r.uniform_range(-1.0, 1.0)], [r.uniform_range(-1.0, 1.0), r.uniform_range(0.5, 2.0)]];
            let a = randn(&[50, 2], 100 + seed);
            let b0 = randn(&[70, 2], 200 + seed);
            let b = Tensor::from_fn(&[70, 2], |k| {
                let (i, j) = (k / 2, k % 2);
                mix[j][0] * b0.get(&[i, 0]) + mix[j][1] * b0.get(&[i, 1]) + 0.7
            });
            let (ma, ca) = stats2(&a);
            let (mb, cb) = stats2(&b);
            let ra = sqrt2(ca);
            let inner = sqrt2(mul2(mul2(ra, cb), ra));
            let want = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2) + ca[0][0] + ca[1][1] + cb[0][0] + cb[1][1]
                - 2.0 * (inner[0][0] + inner[1][1]);
            let got = fid(&a, &b).unwrap();
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
            assert!((got - fid(&b, &a).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_1(&Tensor::eye(5)).unwrap(), 1.0);
        let anti = Tensor::from_fn(&[4, 4], |k| if k / 4 + k % 4 == 3 { 1.0 } else { 0.0 });
        assert_eq!(recall_at_1(&anti).unwrap(), 0.0);
        assert_eq!(recall_at_1(&Tensor::ones(&[3, 3])).unwrap(), 0.0);
        assert!(matches!(recall_at_1(&Tensor::zeros(&[2, 3])), Err(Error::NotSquare { rows: 2, cols: 3 })));
        let m = randn(&[8, 8], 4);
        let mut hits = 0;
        for i in 0..8 {
            let mut best = 0;
            for j in 1..8 {
                if m.get(&[i, j]) > m.get(&[i, best]) {
                    best = j;
                }
            }
            hits += usize::from(best == i);
        }
        assert_eq!(recall_at_1(&m).unwrap(), hits as f64 / 8.0);
    }

    #[test]
    fn consistency_examples() {
        let f = randn(&[16, 16, 4], 5);
        let b = BoundingBox::new(0.2, 0.2, 0.7, 0.8).unwrap();
        let same = subject_consistency(&[f.clone(), f.clone(), f.clone()], &[b; 3]).unwrap();
        assert!((same - 1.0).abs() < 1e-9);
        let neg = f.map(|x| -x);
        // pairs: (f, f) = 1, (f, -f) twice = -1 each
        let mixed = subject_consistency(&[f.clone(), f.clone(), neg], &[b; 3]).unwrap();
        assert!((mixed - (1.0 - 1.0 - 1.0) / 3.0).abs() < 1e-9);
        assert!(matches!(subject_consistency(&[f], &[b]), Err(Error::TooFewFrames(1))));
    }

    #[test]
    fn same_identity_beats_shuffled_identity() {
        let stories = gen_synthetic_stories(200, &SynthConfig::default(), 21, 0).unwrap();
        let own: f64 = stories.iter().map(|s| subject_consistency(&s.frames, &s.boxes).unwrap()).sum::<f64>() / 200.0;
        // frame k of story i comes from story i + k
        let shuffled: f64 = (0..200)
            .map(|i| {
                let frames: Vec<_> = (0..4).map(|k| stories[(i + k * 37) % 200].frames[k].clone()).collect();
                let boxes: Vec<_> = (0..4).map(|k| stories[(i + k * 37) % 200].boxes[k]).collect();
                subject_consistency(&frames, &boxes).unwrap()
            })
            .sum::<f64>()
            / 200.0;
        assert!(own > shuffled, "{own} vs {shuffled}");
    }

    #[test]
    fn adherence_examples() {
        let stories = gen_synthetic_stories(20, &SynthConfig::default(), 4, 0).unwrap();
        for s in &stories {
            assert_eq!(layout_adherence(&s.frames, &s.boxes).unwrap(), 1.0);
        }
        let zeros = vec![Tensor::zeros(&[16, 16, 4]); 3];
        assert_eq!(layout_adherence(&zeros, &[BoundingBox::FULL; 3]).unwrap(), 0.0);
        let b = BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        assert_eq!(random_placement_baseline(&[b, BoundingBox::FULL]), 0.625);
    }

    #[test]
    fn report_table_lists_every_metric() {
        let r = vec![
            MetricRecord { metric: "toy_fid".into(), value: 1.5, n: 64, config_hash: "h".into(), seed: 0 },
            MetricRecord { metric: "layout_adherence".into(), value: 0.9, n: 256, config_hash: "h".into(), seed: 0 },
        ];
        let t = summary_table(&r);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("toy_fid") && t.contains("0.900000"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn recall_invariant_under_monotone_maps(seed in 0u64..1000, n in 2usize..10) {
            let m = randn(&[n, n], seed);
            let r = recall_at_1(&m).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(r, recall_at_1(&m.map(|x| x.exp())).unwrap());
            prop_assert_eq!(r, recall_at_1(&m.map(|x| 3.0 * x - 1.0)).unwrap());
        }

        #[test]
        fn fid_is_symmetric_and_nonnegative(seed in 0u64..1000) {
            let a = randn(&[30, 4], seed);
            let b = randn(&[40, 4], seed + 7).map(|x| 1.3 * x + 0.2);
            let ab = fid(&a, &b).unwrap();
            prop_assert!(ab >= -1e-8);
            prop_assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-8);
        }

        #[test]
        fn cosine_mean_invariant_under_rotation(seed in 0u64..1000) {
            let x = randn(&[5, 6], seed);
            let q = {
                let m = DMatrix::from_row_slice(6, 6, randn(&[6, 6], seed + 1).data());
                m.qr().q()
            };
            let xm = DMatrix::from_row_slice(5, 6, x.data());
            let rotated = xm * q.transpose();
            let rt = Tensor::from_fn(&[5, 6], |k| rotated[(k / 6, k % 6)]);
            let a = mean_pairwise_cosine(&x).unwrap();
            let b = mean_pairwise_cosine(&rt).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

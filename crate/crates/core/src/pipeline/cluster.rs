use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

/// Frames clustered together.
pub const WINDOW: usize = 150;
/// Centers for a full window.
pub const K_FULL: usize = 12;
/// Centers for a shorter final window.
pub const K_PARTIAL: usize = 6;
/// Independent k-means++ restarts; the lowest-inertia run is kept.
pub const N_INIT: usize = 10;
pub const MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    /// `(k, d)`.
    pub centers: Tensor,
    pub inertia: f64,
    pub iterations_run: usize,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centers.shape()[0]
    }

    /// Member indices of each cluster in increasing order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k()];
        for (i, &a) in self.assignments.iter().enumerate() {
            m[a].push(i);
        }
        m
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    let d = t.shape()[1];
    t.data().chunks(d.max(1)).collect()
}

/// Nearest center per point, ties to the lowest index, and the total squared distance.
fn assign(points: &[&[f64]], centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let a = points
        .iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, ctr) in centers.iter().enumerate() {
                let d = sq_dist(p, ctr);
                if d < best.1 {
                    best = (c, d);
                }
            }
            total += best.1;
            best.0
        })
        .collect();
    (a, total)
}

fn plus_plus(points: &[&[f64]], k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let next = if d2.iter().all(|&x| x == 0.0) {
            // every point coincides with a center; take any unused index
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.below(free.len())]
        } else {
            rng.weighted(&d2)
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points[next]));
        }
    }
    chosen.iter().map(|&i| points[i].to_vec()).collect()
}

/// Lloyd iterations from `centers` until the assignment stops changing.
/// Inertia never increases; an empty cluster restarts at the point farthest from
/// its current center.
pub(crate) fn lloyd(points: &[&[f64]], mut centers: Vec<Vec<f64>>, max_iters: usize) -> (Vec<usize>, Vec<Vec<f64>>, f64, usize) {
    let d = points[0].len();
    let (mut a, mut inertia) = assign(points, &centers);
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        let mut sums = vec![vec![0.0; d]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &c) in points.iter().zip(&a) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for c in 0..centers.len() {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..centers.len() {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .map(|i| (i, sq_dist(points[i], &centers[a[i]])))
                    .fold((0, -1.0), |best, x| if x.1 > best.1 { x } else { best });
                centers[c] = points[far.0].to_vec();
                counts[c] = 1;
            }
        }
        let (na, ni) = assign(points, &centers);
        assert!(
            ni <= inertia + 1e-9 * (1.0 + inertia),
            "k-means inertia rose from {inertia} to {ni}"
        );
        inertia = ni;
        if na == a {
            break;
        }
        a = na;
    }
    (a, centers, inertia, iters)
}

/// Single-point transfers that lower inertia (Hartigan's criterion), with the
/// centers kept as exact cluster means. Returns whether any point moved.
fn transfer_pass(points: &[&[f64]], a: &mut [usize], centers: &mut [Vec<f64>]) -> bool {
    let k = centers.len();
    let mut counts = vec![0usize; k];
    for &c in a.iter() {
        counts[c] += 1;
    }
    let mut moved = false;
    for (i, p) in points.iter().enumerate() {
        let from = a[i];
        let nf = counts[from] as f64;
        if counts[from] < 2 {
            continue;
        }
        let remove = nf / (nf - 1.0) * sq_dist(p, &centers[from]);
        let mut best: Option<(usize, f64)> = None;
        for to in (0..k).filter(|&c| c != from) {
            let nt = counts[to] as f64;
            let add = nt / (nt + 1.0) * sq_dist(p, &centers[to]);
            if add < remove - 1e-12 * (1.0 + remove) && best.is_none_or(|b| add < b.1) {
                best = Some((to, add));
            }
        }
        if let Some((to, _)) = best {
            let nt = counts[to] as f64;
            for (j, &x) in p.iter().enumerate() {
                centers[from][j] = (centers[from][j] * nf - x) / (nf - 1.0);
                centers[to][j] = (centers[to][j] * nt + x) / (nt + 1.0);
            }
            counts[from] -= 1;
            counts[to] += 1;
            a[i] = to;
            moved = true;
        }
    }
    moved
}

/// Lloyd to a fixpoint, then alternate single-point transfers and Lloyd until
/// neither improves. The result is Lloyd-stable, so assignments are nearest-center.
fn refine(points: &[&[f64]], init: Vec<Vec<f64>>, max_iters: usize) -> (Vec<usize>, Vec<Vec<f64>>, f64, usize) {
    let (mut a, mut c, mut inertia, mut iters) = lloyd(points, init, max_iters);
    for _ in 0..max_iters {
        if !transfer_pass(points, &mut a, &mut c) {
            break;
        }
        let (na, nc, ni, it) = lloyd(points, c, max_iters);
        assert!(ni <= inertia + 1e-9 * (1.0 + inertia), "k-means inertia rose from {inertia} to {ni}");
        (a, c, inertia) = (na, nc, ni);
        iters += it;
    }
    (a, c, inertia, iters)
}

/// k-means with k-means++ seeding; the best of [`N_INIT`] seeded restarts.
pub fn kmeans(features: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<ClusterResult> {
    kmeans_with(features, k, max_iters, &RngStream::new(seed, "kmeans"))
}

pub fn kmeans_with(features: &Tensor, k: usize, max_iters: usize, rng: &RngStream) -> Result<ClusterResult> {
    if features.rank() != 2 {
        return Err(Error::BadShape {
            op: "kmeans",
            detail: format!("features must be (n, d), got {:?}", features.shape()),
        });
    }
    let n = features.shape()[0];
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    if !features.all_finite() {
        return Err(Error::NonFinite("kmeans features"));
    }
    let points = rows(features);
    let mut best: Option<ClusterResult> = None;
    for run in 0..N_INIT {
        let mut r = rng.child(format!("init/{run}"));
        let init = plus_plus(&points, k, &mut r);
        let (a, c, inertia, iters) = refine(&points, init, max_iters);
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            let d = features.shape()[1];
            best = Some(ClusterResult {
                assignments: a,
                centers: Tensor::new(&[k, d], c.concat())?,
                inertia,
                iterations_run: iters,
            });
        }
    }
    Ok(best.expect("N_INIT > 0"))
}

/// Centers used for a window of `len` frames.
pub fn window_k(len: usize) -> usize {
    let k = if len >= WINDOW { K_FULL } else { K_PARTIAL };
    k.min(len)
}

/// Cluster consecutive windows of [`WINDOW`] frames of one video; the final window
/// keeps whatever remains.
pub fn cluster_windows(features: &Tensor, seed: u64, video: &str) -> Result<Vec<(Range<usize>, ClusterResult)>> {
    let n = features.shape()[0];
    let d = features.shape().get(1).copied().unwrap_or(0);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + WINDOW).min(n);
        let slice = Tensor::new(&[end - start, d], features.data()[start * d..end * d].to_vec())?;
        let rng = RngStream::new(seed, format!("kmeans/{video}/{start}"));
        out.push((start..end, kmeans_with(&slice, window_k(end - start), MAX_ITERS, &rng)?));
        start = end;
    }
    Ok(out)
}

/// Global optimum by enumerating every labeling with no empty cluster; the
/// inertia of a partition is taken about its own means. Feasible for `k^n` up to
/// a few thousand.
pub fn exhaustive_inertia(features: &Tensor, k: usize) -> f64 {
    let pts = rows(features);
    let n = pts.len();
    let d = features.shape()[1];
    let mut best = f64::INFINITY;
    for code in 0..k.pow(n as u32) {
        let labels: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
        let mut centers = vec![vec![0.0; d]; k];
        let mut counts = vec![0; k];
        for (p, &l) in pts.iter().zip(&labels) {
            counts[l] += 1;
            for (c, x) in centers[l].iter_mut().zip(p.iter()) {
                *c += x;
            }
        }
        if counts.contains(&0) {
            continue;
        }
        for (c, &m) in centers.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|x| *x /= m as f64);
        }
        let total: f64 = pts.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
        best = best.min(total);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_points(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, d], 1.0, &mut RngStream::new(seed, "pts"))
    }

    #[test]
    fn n_equals_k_has_zero_inertia() {
        let f = random_points(5, 3, 1);
        let r = kmeans(&f, 5, 50, 0).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut a = r.assignments.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let f = random_points(20, 3, 2);
        let r = kmeans(&f, 1, 50, 0).unwrap();
        let pts = rows(&f);
        let mean: Vec<f64> = (0..3).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / 20.0).collect();
        let total: f64 = pts.iter().map(|p| sq_dist(p, &mean)).sum();
        assert!(r.centers.data().iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!((r.inertia - total).abs() < 1e-9);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(kmeans(&random_points(2, 2, 0), 3, 10, 0), Err(Error::TooFewPoints { n: 2, k: 3 })));
    }

    #[test]
    fn matches_exhaustive_oracle_on_small_instances() {
        let mut r = RngStream::new(5, "instances");
        for case in 0..400 {
            let k = 1 + r.below(3);
            let n = k + r.below(9 - k);
            let f = random_points(n, 2, 1000 + case);
            let got = kmeans(&f, k, 100, case).unwrap().inertia;
            let want = exhaustive_inertia(&f, k);
            assert!((got - want).abs() <= 1e-9, "case {case} n={n} k={k}: {got} vs {want}");
        }
    }

    #[test]
    fn duplicate_points_are_handled() {
        let f = Tensor::ones(&[6, 2]);
        let r = kmeans(&f, 3, 20, 0).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(r.assignments.iter().all(|&a| a < 3));
    }

    #[test]
    fn window_rule() {
        assert_eq!(window_k(150), 12);
        assert_eq!(window_k(149), 6);
        assert_eq!(window_k(4), 4);
        let w = cluster_windows(&random_points(300, 4, 3), 0, "v").unwrap();
        assert_eq!(w.len(), 2);
        assert!(w.iter().all(|(r, c)| r.len() == 150 && c.k() == 12));
        let w = cluster_windows(&random_points(149, 4, 3), 0, "v").unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].1.k(), 6);
        let w = cluster_windows(&random_points(160, 4, 3), 0, "v").unwrap();
        assert_eq!((w[1].0.clone(), w[1].1.k()), (150..160, 6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn assignments_are_nearest_and_inertia_consistent(n in 3usize..40, k in 1usize..4, seed in 0u64..500) {
            prop_assume!(k <= n);
            let f = random_points(n, 3, seed);
            let r = kmeans(&f, k, 100, seed).unwrap();
            let pts = rows(&f);
            let centers = rows(&r.centers);
            let mut total = 0.0;
            for (p, &a) in pts.iter().zip(&r.assignments) {
                prop_assert!(a < k);
                let da = sq_dist(p, centers[a]);
                for (c, ctr) in centers.iter().enumerate() {
                    let dc = sq_dist(p, ctr);
                    prop_assert!(da < dc || (da == dc && a <= c));
                }
                total += da;
            }
            prop_assert!((total - r.inertia).abs() <= 1e-9);
            prop_assert_eq!(r.clone(), kmeans(&f, k, 100, seed).unwrap());
        }
    }
}

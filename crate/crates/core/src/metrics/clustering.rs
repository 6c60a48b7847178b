//! k-means over document vectors and partition-agreement scores.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KMEANS_MAX_ITERS: usize = 300;
pub const KMEANS_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub ids: Vec<usize>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn new(ids: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= k) {
            return Err(Error::param(format!("cluster id {bad} with k = {k}")));
        }
        Ok(ClusterAssignment { ids, k })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct KmeansResult {
    pub assignment: ClusterAssignment,
    pub centroids: Vec<Vec<f64>>,
    pub sse: f64,
    /// Within-cluster SSE after each Lloyd iteration of the winning restart.
    pub sse_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, lowest index on ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding: returns indices of the chosen points.
///
/// When every remaining point coincides with a chosen center the next pick
/// falls back to a uniform draw, so duplicates are possible on degenerate data.
pub fn kmeans_pp_seed<P: AsRef<[f64]>, R: Rng + ?Sized>(points: &[P], k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_ref(), points[chosen[0]].as_ref()))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // Guard against landing on a zero-weight tail through rounding.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p.as_ref(), points[next].as_ref());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    chosen
}

fn lloyd<P: AsRef<[f64]>>(points: &[P], mut centroids: Vec<Vec<f64>>) -> (Vec<usize>, Vec<Vec<f64>>, f64, Vec<f64>) {
    let dim = centroids[0].len();
    let k = centroids.len();
    let mut ids = vec![0; points.len()];
    let mut trace = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sse = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p.as_ref(), &centroids);
            ids[i] = j;
            sse += d;
        }
        trace.push(sse);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&ids) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p.as_ref()) {
                *s += v;
            }
        }
        let mut moved = 0.0f64;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let c: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            moved = moved.max(sq_dist(&c, &centroids[j]).sqrt());
            centroids[j] = c;
        }
        if moved < KMEANS_TOL {
            break;
        }
    }
    let mut sse = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (j, d) = nearest(p.as_ref(), &centroids);
        ids[i] = j;
        sse += d;
    }
    trace.push(sse);
    (ids, centroids, sse, trace)
}

/// Lloyd's k-means with k-means++ seeding; best of `restarts` by SSE.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], k: usize, seed: u64, restarts: usize) -> Result<KmeansResult> {
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    if k > points.len() {
        return Err(Error::param(format!("k = {k} exceeds {} points", points.len())));
    }
    let dim = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::dim("points have differing dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KmeansResult> = None;
    for _ in 0..restarts.max(1) {
        let seeds = kmeans_pp_seed(points, k, &mut rng);
        let init = seeds.iter().map(|&i| points[i].as_ref().to_vec()).collect();
        let (ids, centroids, sse, sse_trace) = lloyd(points, init);
        if best.as_ref().is_none_or(|b| sse < b.sse) {
            best = Some(KmeansResult {
                assignment: ClusterAssignment { ids, k },
                centroids,
                sse,
                sse_trace,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

fn contingency(pred: &[usize], labels: &[usize]) -> (Vec<Vec<usize>>, usize, usize) {
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kl = labels.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kl]; kp];
    for (&p, &l) in pred.iter().zip(labels) {
        table[p][l] += 1;
    }
    (table, kp, kl)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two entropies.
pub fn nmi(pred: &ClusterAssignment, labels: &[usize]) -> Result<f64> {
    if pred.ids.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} cluster ids vs {} labels",
            pred.ids.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::input("no points to score"));
    }
    let n = labels.len() as f64;
    let (table, kp, kl) = contingency(&pred.ids, labels);
    let row: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<usize> = (0..kl).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let (hp, hl) = (entropy(row.iter().copied(), n), entropy(col.iter().copied(), n));
    if hp == 0.0 && hl == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for i in 0..kp {
        for j in 0..kl {
            let c = table[i][j];
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (pij * n * n / (row[i] as f64 * col[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (hp + hl))).clamp(0.0, 1.0))
}

/// Fraction of points carrying their cluster's majority label.
pub fn purity(pred: &ClusterAssignment, labels: &[usize]) -> Result<f64> {
    if pred.ids.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} cluster ids vs {} labels",
            pred.ids.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::input("no points to score"));
    }
    let (table, _, _) = contingency(&pred.ids, labels);
    let hits: usize = table.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};
    use rand::Rng;

    fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (l, c) in centers.iter().enumerate() {
            for _ in 0..30 {
                pts.push(vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
                labels.push(l);
            }
        }
        (pts, labels)
    }

    #[test]
    fn recovers_separated_blobs() {
        for seed in 0..10 {
            let (pts, labels) = blobs(100 + seed);
            let r = kmeans(&pts, 3, seed, 10).unwrap();
            let a = ClusterAssignment::new(labels, 3).unwrap();
            assert_eq!(nmi(&r.assignment, &a.ids).unwrap(), 1.0);
            assert_eq!(purity(&r.assignment, &a.ids).unwrap(), 1.0);
        }
    }

    #[test]
    fn sse_never_increases_across_iterations() {
        let (pts, _) = blobs(7);
        let r = kmeans(&pts, 5, 3, 4).unwrap();
        for w in r.sse_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", r.sse_trace);
        }
    }

    #[test]
    fn single_cluster_and_identical_points() {
        let (pts, _) = blobs(1);
        let r = kmeans(&pts, 1, 0, 3).unwrap();
        assert!(r.assignment.ids.iter().all(|&i| i == 0));

        let same = vec![vec![2.0, -1.0]; 8];
        let r = kmeans(&same, 2, 9, 10).unwrap();
        assert_eq!(r.sse, 0.0);
        let first = r.assignment.ids[0];
        assert!(r.assignment.ids.iter().all(|&i| i == first));
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(matches!(kmeans(&pts, 3, 0, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn identical_partitions_score_one() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        let pred = ClusterAssignment::new(vec![2, 2, 0, 0, 1, 1], 3).unwrap();
        assert!((nmi(&pred, &labels).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(purity(&pred, &labels).unwrap(), 1.0);
    }

    #[test]
    fn single_cluster_against_two_equal_labels() {
        let pred = ClusterAssignment::new(vec![0; 4], 1).unwrap();
        assert_eq!(purity(&pred, &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(nmi(&pred, &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&pred, &[3, 3, 3, 3]).unwrap(), 1.0);
    }

    // Worksheet: pred = [0,0,0,1,1,1], labels = [0,0,1,1,1,1].
    // Contingency rows (pred) × cols (label): [[2,1],[0,3]].
    // H(pred) = ln 2, H(label) = -(1/3 ln 1/3 + 2/3 ln 2/3),
    // I = 2/6 ln(2·6/(3·2)) + 1/6 ln(1·6/(3·4)) + 3/6 ln(3·6/(3·4)).
    // Evaluated in Python: NMI = 0.47870397138568 (sklearn agrees), purity = 5/6.
    #[test]
    fn hand_worked_six_point_example() {
        let pred = ClusterAssignment::new(vec![0, 0, 0, 1, 1, 1], 2).unwrap();
        let labels = [0, 0, 1, 1, 1, 1];
        assert!((nmi(&pred, &labels).unwrap() - 0.47870397138568).abs() < 1e-9);
        assert!((purity(&pred, &labels).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn independent_partitions_have_near_zero_nmi() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 20_000;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let pred = ClusterAssignment::new(pred, 5).unwrap();
        assert!(nmi(&pred, &labels).unwrap() < 0.05);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let pred = ClusterAssignment::new(vec![0, 1], 2).unwrap();
        assert!(matches!(nmi(&pred, &[0]), Err(Error::Dimension(_))));
        assert!(matches!(purity(&pred, &[0]), Err(Error::Dimension(_))));
    }

    /// Counting oracle: for each cluster, tally labels with a map and take the max.
    fn purity_oracle(pred: &[usize], labels: &[usize]) -> f64 {
        use std::collections::BTreeMap;
        let mut per: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
        for (&p, &l) in pred.iter().zip(labels) {
            *per.entry(p).or_default().entry(l).or_default() += 1;
        }
        let hits: usize = per.values().map(|m| *m.values().max().unwrap()).sum();
        hits as f64 / pred.len() as f64
    }

    proptest! {
        #[test]
        fn scores_are_invariant_to_relabeling(
            pairs in proptest::collection::vec((0usize..4, 0usize..3), 1..60),
            perm_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let (pred, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let mut perm: Vec<usize> = (0..4).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let a = ClusterAssignment::new(pred.clone(), 4).unwrap();
            let b = ClusterAssignment::new(pred.iter().map(|&p| perm[p]).collect(), 4).unwrap();
            prop_assert!((nmi(&a, &labels).unwrap() - nmi(&b, &labels).unwrap()).abs() < 1e-12);
            prop_assert_eq!(purity(&a, &labels).unwrap(), purity(&b, &labels).unwrap());
            prop_assert_eq!(purity(&a, &labels).unwrap(), purity_oracle(&pred, &labels));
            let s = nmi(&a, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}

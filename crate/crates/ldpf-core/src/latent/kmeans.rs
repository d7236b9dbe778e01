//! Lloyd k-means with k-means++ seeding and empty-cluster repair.

use rand::Rng;

use crate::error::{LdpfError, Result};
use crate::rng::RngSeed;

const MAX_ITERS: usize = 300;

/// Output of one clustering run.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid by Euclidean distance, ties to lowest index.
pub fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = squared_distance(point, &centroids[0]);
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Cluster `points` into `k` groups.
///
/// k-means++ initialization from `seed`, then Lloyd iterations until the
/// assignment reaches a fixpoint or [`MAX_ITERS`] passes. An empty cluster is
/// reseeded at the point farthest from its currently assigned centroid.
/// Deterministic for equal inputs and seeds.
pub fn kmeans_cluster(points: &[Vec<f64>], k: usize, seed: RngSeed) -> Result<KmeansResult> {
    let n = points.len();
    if k == 0 {
        return Err(LdpfError::InvalidConfig("k must be at least 1".into()));
    }
    if n < k {
        return Err(LdpfError::InvalidConfig(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(LdpfError::DimensionMismatch(
            "points of unequal dimension".into(),
        ));
    }

    let mut rng = seed.rng();
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut prev_inertia = f64::INFINITY;

    for _ in 0..MAX_ITERS {
        // Assignment step.
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let c = nearest_centroid(p, &centroids);
            inertia += squared_distance(p, &centroids[c]);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        debug_assert!(
            inertia <= prev_inertia * (1.0 + 1e-9) + 1e-12,
            "inertia increased: {prev_inertia} -> {inertia}"
        );
        prev_inertia = inertia;

        // Update step with empty-cluster repair.
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut repaired = false;
        let mut claimed: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed at the point farthest from its assigned centroid.
                let mut far_i = usize::MAX;
                let mut far_d = -1.0;
                for (i, p) in points.iter().enumerate() {
                    if claimed.contains(&i) {
                        continue;
                    }
                    let d = squared_distance(p, &centroids[assignments[i]]);
                    if d > far_d {
                        far_d = d;
                        far_i = i;
                    }
                }
                centroids[c] = points[far_i].clone();
                claimed.push(far_i);
                repaired = true;
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centroids[c][j] = s / counts[c] as f64;
                }
            }
        }

        if !changed && !repaired {
            break;
        }
    }

    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest_centroid(p, &centroids);
        inertia += squared_distance(p, &centroids[assignments[i]]);
    }
    Ok(KmeansResult {
        centroids,
        assignments,
        inertia,
    })
}

fn plus_plus_init(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = (rng.random::<u64>() % n as u64) as usize;
    centroids.push(points[first].clone());
    let mut min_d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = min_d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid; take the first
            // index not yet used so the run stays deterministic.
            (0..n)
                .find(|i| centroids.iter().all(|c| c != &points[*i]))
                .unwrap_or(0)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in min_d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, centroids.last().unwrap());
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn n_equals_k_gives_singleton_clusters_and_zero_inertia() {
        let points = vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]];
        let r = kmeans_cluster(&points, 3, RngSeed::new(0)).unwrap();
        assert!(r.inertia < 1e-18);
        let mut seen: Vec<usize> = r.assignments.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn recovers_well_separated_blobs() {
        let centers = [
            vec![0.0, 0.0, 0.0],
            vec![8.0, 0.0, 0.0],
            vec![0.0, 8.0, 0.0],
        ];
        let mut rng = RngSeed::new(3).rng();
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..50 {
                let p: Vec<f64> = c
                    .iter()
                    .map(|x| x + 0.1 * (rng.random::<f64>() * 2.0 - 1.0))
                    .collect();
                points.push(p);
                truth.push(b);
            }
        }
        let r = kmeans_cluster(&points, 3, RngSeed::new(7)).unwrap();
        // agreement up to permutation: map each cluster to its majority blob
        let mut map = vec![usize::MAX; 3];
        for c in 0..3 {
            let mut counts = [0usize; 3];
            for (a, t) in r.assignments.iter().zip(&truth) {
                if *a == c {
                    counts[*t] += 1;
                }
            }
            map[c] = (0..3).max_by_key(|&i| counts[i]).unwrap();
        }
        let agree = r
            .assignments
            .iter()
            .zip(&truth)
            .filter(|(a, t)| map[**a] == **t)
            .count();
        assert_eq!(agree, points.len(), "blob recovery must be exact");
    }

    #[test]
    fn matches_exhaustive_optimum_on_tiny_instance() {
        // 8 points in 2-D, two clear groups. Brute force over all nonempty
        // 2-part assignments with mean centroids.
        let points = vec![
            vec![0.0, 0.1],
            vec![0.2, -0.1],
            vec![-0.1, 0.0],
            vec![0.1, 0.2],
            vec![4.0, 4.1],
            vec![4.2, 3.9],
            vec![3.9, 4.0],
            vec![4.1, 4.2],
        ];
        let best = brute_force_inertia(&points, 2);
        let r = kmeans_cluster(&points, 2, RngSeed::new(1)).unwrap();
        assert!(
            (r.inertia - best).abs() < 1e-9,
            "kmeans {} vs exhaustive {}",
            r.inertia,
            best
        );
    }

    pub fn brute_force_inertia(points: &[Vec<f64>], k: usize) -> f64 {
        assert_eq!(k, 2);
        let n = points.len();
        let dim = points[0].len();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let mut sums = vec![vec![0.0; dim]; 2];
            let mut counts = [0usize; 2];
            for i in 0..n {
                let g = ((mask >> i) & 1) as usize;
                counts[g] += 1;
                for (s, x) in sums[g].iter_mut().zip(&points[i]) {
                    *s += x;
                }
            }
            let means: Vec<Vec<f64>> = sums
                .iter()
                .zip(counts)
                .map(|(s, c)| s.iter().map(|x| x / c as f64).collect())
                .collect();
            let mut inertia = 0.0;
            for i in 0..n {
                let g = ((mask >> i) & 1) as usize;
                inertia += squared_distance(&points[i], &means[g]);
            }
            if inertia < best {
                best = inertia;
            }
        }
        best
    }

    #[test]
    fn centroid_is_mean_of_its_cluster_at_fixpoint() {
        let mut rng = RngSeed::new(11).rng();
        let points: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..4).map(|_| rng.random::<f64>() * 4.0).collect())
            .collect();
        let r = kmeans_cluster(&points, 3, RngSeed::new(2)).unwrap();
        for c in 0..3 {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&r.assignments)
                .filter(|(_, a)| **a == c)
                .map(|(p, _)| p)
                .collect();
            assert!(!members.is_empty(), "cluster {c} empty after repair");
            for j in 0..4 {
                let mean: f64 =
                    members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                assert!((mean - r.centroids[c][j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let mut rng = RngSeed::new(5).rng();
        let points: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
            .collect();
        let a = kmeans_cluster(&points, 4, RngSeed::new(9)).unwrap();
        let b = kmeans_cluster(&points, 4, RngSeed::new(9)).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.inertia, b.inertia);
    }

    #[test]
    fn rejects_more_clusters_than_points() {
        let points = vec![vec![0.0], vec![1.0]];
        assert!(kmeans_cluster(&points, 3, RngSeed::new(0)).is_err());
    }

    #[test]
    fn survives_duplicate_points() {
        let points = vec![vec![1.0, 1.0]; 6];
        let r = kmeans_cluster(&points, 2, RngSeed::new(0)).unwrap();
        assert!(r.inertia < 1e-18);
    }
}

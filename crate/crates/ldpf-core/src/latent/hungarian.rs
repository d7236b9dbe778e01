//! Minimum-cost assignment (Kuhn-Munkres) used to keep cluster identities
//! stable across re-clustering rounds.

use crate::error::{LdpfError, Result};
use crate::latent::kmeans::squared_distance;

/// Solve the square assignment problem: returns `perm` with `perm[row] = col`
/// minimizing `sum_r cost[r][perm[r]]`. O(n^3) shortest-augmenting-path
/// formulation with row/column potentials.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if cost.iter().any(|row| row.len() != n) {
        return Err(LdpfError::DimensionMismatch(
            "cost matrix must be square".into(),
        ));
    }
    if cost
        .iter()
        .any(|row| row.iter().any(|c| !c.is_finite()))
    {
        return Err(LdpfError::InvalidScalar(
            "cost matrix entries must be finite".into(),
        ));
    }

    // 1-indexed internals; p[j] is the row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    Ok(perm)
}

/// Match new centroids to previous ones: returns the permutation `pi`
/// minimizing `sum_s |prev[s] - new[pi[s]]|^2`, so relabeling the new
/// clustering by `pi` keeps each domain identity (and its domain-specific
/// prompt) attached to the same region of feature space.
pub fn stabilize_assignment(
    prev_centroids: &[Vec<f64>],
    new_centroids: &[Vec<f64>],
) -> Result<Vec<usize>> {
    if prev_centroids.len() != new_centroids.len() {
        return Err(LdpfError::DimensionMismatch(format!(
            "{} previous vs {} new centroids",
            prev_centroids.len(),
            new_centroids.len()
        )));
    }
    let dim = prev_centroids.first().map(|c| c.len()).unwrap_or(0);
    if prev_centroids
        .iter()
        .chain(new_centroids)
        .any(|c| c.len() != dim)
    {
        return Err(LdpfError::DimensionMismatch(
            "centroid matrices of unequal dimension".into(),
        ));
    }
    let cost: Vec<Vec<f64>> = prev_centroids
        .iter()
        .map(|p| new_centroids.iter().map(|q| squared_distance(p, q)).collect())
        .collect();
    min_cost_assignment(&cost)
}

/// Total cost of a permutation under a cost matrix.
pub fn assignment_cost(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::RngSeed;

    /// All permutations of 0..n via Heap's algorithm (test oracle only).
    pub fn permutations(n: usize) -> Vec<Vec<usize>> {
        let mut items: Vec<usize> = (0..n).collect();
        let mut out = Vec::new();
        fn heap(k: usize, items: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k == 1 {
                out.push(items.clone());
                return;
            }
            for i in 0..k {
                heap(k - 1, items, out);
                if k % 2 == 0 {
                    items.swap(i, k - 1);
                } else {
                    items.swap(0, k - 1);
                }
            }
        }
        heap(n, &mut items, &mut out);
        out
    }

    fn brute_force(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
        let mut best_perm = Vec::new();
        let mut best = f64::INFINITY;
        for perm in permutations(cost.len()) {
            let c = assignment_cost(cost, &perm);
            if c < best {
                best = c;
                best_perm = perm;
            }
        }
        (best_perm, best)
    }

    #[test]
    fn identical_centroid_sets_give_identity() {
        let c = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        assert_eq!(stabilize_assignment(&c, &c).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn swapped_pair_gives_transposition() {
        let prev = vec![vec![0.0, 0.0], vec![5.0, 5.0]];
        let new = vec![vec![5.0, 5.0], vec![0.0, 0.0]];
        assert_eq!(stabilize_assignment(&prev, &new).unwrap(), vec![1, 0]);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = RngSeed::new(21).rng();
        for n in 1..=5 {
            for _ in 0..40 {
                let cost: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..n).map(|_| rng.random::<f64>() * 10.0).collect())
                    .collect();
                let got = min_cost_assignment(&cost).unwrap();
                let (want_perm, want_cost) = brute_force(&cost);
                let got_cost = assignment_cost(&cost, &got);
                assert!(
                    (got_cost - want_cost).abs() < 1e-9,
                    "n={n}: {got_cost} vs {want_cost}"
                );
                assert_eq!(got, want_perm, "n={n}");
            }
        }
    }

    #[test]
    fn result_is_a_bijection() {
        let mut rng = RngSeed::new(8).rng();
        for n in 1..=6 {
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
                .collect();
            let perm = min_cost_assignment(&cost).unwrap();
            let mut seen = vec![false; n];
            for &c in &perm {
                assert!(!seen[c]);
                seen[c] = true;
            }
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let a = vec![vec![0.0, 0.0]];
        let b = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        assert!(stabilize_assignment(&a, &b).is_err());
        let ragged = vec![vec![0.0, 1.0], vec![2.0]];
        assert!(min_cost_assignment(&ragged).is_err());
    }
}

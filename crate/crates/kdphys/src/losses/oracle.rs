//! Brute-force alignment oracles.
//!
//! For small k every monotone warp path can be enumerated, which gives
//! independent reference values for soft-DTW (log-sum-exp over path costs),
//! hard DTW (minimum path cost), and the Gibbs path-membership expectation.
//! The dynamic-programming implementations in the parent module are tested
//! against these, and the CLI exposes the same comparison as `oracle-check`.

use super::omega_matrix;
use crate::error::{Error, Result};

/// Every monotone contiguous alignment path for a k x k cost matrix.
pub struct WarpPathSet {
    pub k: usize,
    /// Paths as (row, col) cell lists from (0,0) to (k-1,k-1).
    pub paths: Vec<Vec<(usize, usize)>>,
}

impl WarpPathSet {
    /// Binary membership matrix of one path.
    pub fn as_matrix(&self, idx: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.k * self.k];
        for &(i, j) in &self.paths[idx] {
            m[i * self.k + j] = 1.0;
        }
        m
    }
}

/// Enumerate all warp paths by depth-first search over the moves
/// {down, right, diagonal}. The path count is a Delannoy number, so k is
/// capped where exhaustive enumeration stays trivial.
pub fn enumerate_paths(k: usize) -> Result<WarpPathSet> {
    if !(2..=6).contains(&k) {
        return Err(Error::Parameter(format!(
            "path enumeration supports 2 <= k <= 6, got {k}"
        )));
    }
    let mut paths = Vec::new();
    let mut current = vec![(0usize, 0usize)];
    walk(k, &mut current, &mut paths);
    Ok(WarpPathSet { k, paths })
}

fn walk(k: usize, current: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
    let &(i, j) = current.last().unwrap();
    if i == k - 1 && j == k - 1 {
        out.push(current.clone());
        return;
    }
    for (ni, nj) in [(i + 1, j), (i, j + 1), (i + 1, j + 1)] {
        if ni < k && nj < k {
            current.push((ni, nj));
            walk(k, current, out);
            current.pop();
        }
    }
}

/// Validate monotonicity and continuity: starts at (0,0), ends at (k-1,k-1),
/// and each step is one of {down, right, diagonal}.
pub fn is_valid_path(path: &[(usize, usize)], k: usize) -> bool {
    if path.first() != Some(&(0, 0)) || path.last() != Some(&(k - 1, k - 1)) {
        return false;
    }
    path.windows(2).all(|w| {
        let (di, dj) = (w[1].0 as isize - w[0].0 as isize, w[1].1 as isize - w[0].1 as isize);
        matches!((di, dj), (1, 0) | (0, 1) | (1, 1))
    })
}

/// Cost of one path: the sum of delta over its cells.
pub fn path_cost(path: &[(usize, usize)], delta: &[f64], k: usize) -> f64 {
    path.iter().map(|&(i, j)| delta[i * k + j]).sum()
}

fn all_path_costs(delta: &[f64], k: usize) -> Result<Vec<(Vec<(usize, usize)>, f64)>> {
    if delta.len() != k * k {
        return Err(Error::Dimension(format!(
            "delta must be {k}x{k}, got {} entries",
            delta.len()
        )));
    }
    let set = enumerate_paths(k)?;
    Ok(set
        .paths
        .into_iter()
        .map(|p| {
            let c = path_cost(&p, delta, k);
            (p, c)
        })
        .collect())
}

/// Reference soft-DTW: `-gamma * ln(sum_p exp(-cost_p / gamma))`, evaluated
/// with a min-shift for stability.
pub fn soft_dtw_brute(delta: &[f64], k: usize, gamma: f64) -> Result<f64> {
    if gamma <= 0.0 {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    let costs = all_path_costs(delta, k)?;
    let m = costs.iter().map(|&(_, c)| c).fold(f64::INFINITY, f64::min);
    let lse: f64 = costs.iter().map(|&(_, c)| ((m - c) / gamma).exp()).sum();
    Ok(m - gamma * lse.ln())
}

/// Reference hard DTW: the minimum path cost.
pub fn hard_dtw_brute(delta: &[f64], k: usize) -> Result<f64> {
    let costs = all_path_costs(delta, k)?;
    Ok(costs.iter().map(|&(_, c)| c).fold(f64::INFINITY, f64::min))
}

/// Reference Gibbs expectation of cell membership:
/// `E(i,j) = sum_{p containing (i,j)} exp(-cost_p/gamma) / Z`.
pub fn gibbs_matrix_brute(delta: &[f64], k: usize, gamma: f64) -> Result<Vec<f64>> {
    if gamma <= 0.0 {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    let costs = all_path_costs(delta, k)?;
    let m = costs.iter().map(|&(_, c)| c).fold(f64::INFINITY, f64::min);
    let mut e = vec![0.0; k * k];
    let mut z = 0.0;
    for (path, c) in &costs {
        let w = ((m - c) / gamma).exp();
        z += w;
        for &(i, j) in path {
            e[i * k + j] += w;
        }
    }
    for v in e.iter_mut() {
        *v /= z;
    }
    Ok(e)
}

/// Reference temporal term: `(1/Z) * sum_p <A_p, Omega> exp(-cost_p/gamma)`.
pub fn temporal_brute(delta: &[f64], k: usize, gamma: f64) -> Result<f64> {
    let e = gibbs_matrix_brute(delta, k, gamma)?;
    let omega = omega_matrix(k);
    Ok(e.iter().zip(&omega).map(|(a, b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_counts_are_delannoy_numbers() {
        for (k, expect) in [(2, 3), (3, 13), (4, 63), (5, 321), (6, 1683)] {
            let set = enumerate_paths(k).unwrap();
            assert_eq!(set.paths.len(), expect, "k = {k}");
        }
    }

    #[test]
    fn every_emitted_path_is_valid() {
        for k in 2..=5 {
            let set = enumerate_paths(k).unwrap();
            for (idx, p) in set.paths.iter().enumerate() {
                assert!(is_valid_path(p, k), "path {idx} of k={k} invalid: {p:?}");
            }
        }
    }

    #[test]
    fn paths_are_distinct() {
        let set = enumerate_paths(4).unwrap();
        let mut seen: Vec<Vec<(usize, usize)>> = Vec::new();
        for p in &set.paths {
            assert!(!seen.contains(p), "duplicate path {p:?}");
            seen.push(p.clone());
        }
    }

    #[test]
    fn membership_matrix_has_unit_corners() {
        let set = enumerate_paths(3).unwrap();
        for idx in 0..set.paths.len() {
            let m = set.as_matrix(idx);
            assert_eq!(m[0], 1.0);
            assert_eq!(m[8], 1.0);
        }
    }

    #[test]
    fn rejects_out_of_range_k() {
        assert!(enumerate_paths(1).is_err());
        assert!(enumerate_paths(7).is_err());
    }

    #[test]
    fn validator_rejects_broken_paths() {
        assert!(!is_valid_path(&[(0, 0), (2, 0), (2, 2)], 3), "jump");
        assert!(!is_valid_path(&[(0, 0), (1, 1)], 3), "wrong endpoint");
        assert!(!is_valid_path(&[(0, 1), (1, 1), (2, 2)], 3), "wrong start");
        assert!(is_valid_path(&[(0, 0), (1, 1), (2, 2)], 3), "diagonal is fine");
    }

    #[test]
    fn gibbs_corners_are_always_one() {
        // Every path passes through both corners.
        let delta: Vec<f64> = (0..9).map(|v| v as f64 * 0.1).collect();
        let e = gibbs_matrix_brute(&delta, 3, 0.5).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12);
        assert!((e[8] - 1.0).abs() < 1e-12);
        for &v in &e {
            assert!((0.0..=1.0 + 1e-12).contains(&v), "membership out of range: {v}");
        }
    }

    #[test]
    fn hard_dtw_of_zero_costs_is_zero() {
        assert_eq!(hard_dtw_brute(&vec![0.0; 16], 4).unwrap(), 0.0);
    }
}

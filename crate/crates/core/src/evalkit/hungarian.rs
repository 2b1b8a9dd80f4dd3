//! Exact linear assignment by shortest augmenting paths, O(n³).

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Assignment `perm[row] = col` minimizing `Σ cost[row, perm[row]]` over a
/// square matrix.
pub fn min_cost_assignment(cost: &Array) -> Result<Vec<usize>> {
    if cost.ndim() != 2 || cost.rows() != cost.cols() {
        return Err(Error::shape("min_cost_assignment", format!("need a square matrix, got {:?}", cost.shape())));
    }
    if !cost.all_finite() {
        return Err(Error::Domain("assignment costs must be finite".into()));
    }
    let n = cost.rows();
    // 1-based potentials; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get2(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// Assignment maximizing `Σ score[row, perm[row]]`.
pub fn max_score_assignment(score: &Array) -> Result<Vec<usize>> {
    min_cost_assignment(&score.map(|x| -x))
}

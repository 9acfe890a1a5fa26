//! Particle path ensembles and the empirical W₁ distance between them on
//! path space (sup-norm ground cost).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Largest ensemble accepted by [`path_distance`]; the assignment is O(N³).
pub const MAX_ASSIGNMENT: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub time_grid: TimeGrid,
    /// positions[i][k], k = 0..=n_steps.
    pub positions: Vec<Vec<f64>>,
    /// increments[i][k] = B(t_{k+1}) − B(t_k), k = 0..n_steps.
    pub increments: Vec<Vec<f64>>,
    pub seed: u64,
}

impl PathEnsemble {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The driving paths ω_i(t_k) = X_i(0) + B_i(t_k), as a new ensemble.
    pub fn noise_paths(&self) -> PathEnsemble {
        let positions = self
            .positions
            .iter()
            .zip(&self.increments)
            .map(|(x, db)| {
                let mut w = Vec::with_capacity(x.len());
                let mut acc = x[0];
                w.push(acc);
                for d in db {
                    acc += d;
                    w.push(acc);
                }
                w
            })
            .collect();
        PathEnsemble {
            time_grid: self.time_grid,
            positions,
            increments: self.increments.clone(),
            seed: self.seed,
        }
    }

    pub fn marginal(&self, k: usize) -> Vec<f64> {
        self.positions.iter().map(|p| p[k]).collect()
    }
}

/// Empirical W₁ on path space: min over assignments of the mean sup-norm gap.
pub fn path_distance(e1: &PathEnsemble, e2: &PathEnsemble) -> Result<f64> {
    let n = e1.len();
    if n != e2.len() {
        return Err(Error::SizeMismatch(n, e2.len()));
    }
    if n > MAX_ASSIGNMENT {
        return Err(Error::TooLarge(n, MAX_ASSIGNMENT));
    }
    if e1.time_grid != e2.time_grid {
        return Err(Error::GridMismatch);
    }
    if n == 0 {
        return Ok(0.0);
    }
    let cost: Vec<Vec<f64>> = e1
        .positions
        .iter()
        .map(|a| {
            e2.positions
                .iter()
                .map(|b| a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs())))
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, j)| cost[i][*j]).sum();
    Ok(total / n as f64)
}

/// Minimum-cost perfect matching on a square matrix (potentials form of the
/// Hungarian method). Returns `col[i]` assigned to row `i`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0, as in the classical formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
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
    let mut col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

//! Sample-quality metrics between two point clouds.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Largest batch accepted by the exact assignment solver.
pub const EXACT_LIMIT: usize = 2048;

/// Minimum-cost perfect matching on a dense `n × n` cost matrix
/// (shortest augmenting paths with potentials). Returns `assignment[row] = col`.
pub fn min_cost_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut min_to = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        min_to.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let row = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < min_to[j] {
                        min_to[j] = cur;
                        way[j] = j0;
                    }
                    if min_to[j] < delta {
                        delta = min_to[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if col_row[j] > 0 {
            assignment[col_row[j] - 1] = j - 1;
        }
    }
    assignment
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_pair(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let (a, b) = (a.as_matrix(), b.as_matrix());
    if a.cols() != b.cols() {
        return Err(dim_err(format!("samples have {} dims, reference {}", a.cols(), b.cols())));
    }
    Ok((a, b))
}

/// Exact empirical 2-Wasserstein distance between equal-size batches.
pub fn wasserstein2(samples: &Tensor<f64>, reference: &Tensor<f64>) -> Result<f64> {
    let (a, b) = check_pair(samples, reference)?;
    let n = a.rows();
    if n != b.rows() {
        return Err(dim_err(format!("exact W2 needs equal batch sizes, got {n} and {}", b.rows())));
    }
    if n > EXACT_LIMIT {
        return Err(dim_err(format!("exact W2 supports at most {EXACT_LIMIT} points, got {n}")));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut cost = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            cost.push(sq_dist(a.row(i), b.row(j)));
        }
    }
    let assignment = min_cost_assignment(n, &cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

/// Unbiased squared MMD with a Gaussian kernel of bandwidth `sigma`.
pub fn mmd_rbf(samples: &Tensor<f64>, reference: &Tensor<f64>, sigma: f64) -> Result<f64> {
    let (a, b) = check_pair(samples, reference)?;
    let (n, m) = (a.rows(), b.rows());
    if n < 2 || m < 2 {
        return Err(dim_err("MMD needs at least two points per batch"));
    }
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) / (2.0 * sigma * sigma)).exp();
    let within = |t: &Tensor<f64>| {
        let r = t.rows();
        let mut s = 0.0;
        for i in 0..r {
            for j in 0..r {
                if i != j {
                    s += k(t.row(i), t.row(j));
                }
            }
        }
        s / (r * (r - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += k(a.row(i), b.row(j));
        }
    }
    Ok(within(&a) + within(&b) - 2.0 * cross / (n * m) as f64)
}

/// Both metrics for one comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleQuality {
    pub w2: f64,
    pub mmd: f64,
}

/// Exact W2 plus an MMD cross-check with unit bandwidth.
pub fn sample_quality(samples: &Tensor<f64>, reference: &Tensor<f64>) -> Result<SampleQuality> {
    Ok(SampleQuality { w2: wasserstein2(samples, reference)?, mmd: mmd_rbf(samples, reference, 1.0)? })
}

//! Minimum-cost rectangular assignment (Kuhn-Munkres with potentials).

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row; `min(rows, cols)` of them.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Solves the assignment problem for a `rows × cols` matrix of finite costs.
///
/// # Panics
///
/// On ragged rows or non-finite entries.
pub fn hungarian(cost: &[Vec<f64>]) -> Assignment {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    assert!(cost.iter().all(|r| r.len() == m), "cost matrix rows must have equal length");
    assert!(cost.iter().flatten().all(|c| c.is_finite()), "cost entries must be finite");
    if n == 0 || m == 0 {
        return Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        };
    }
    let mut pairs = if n <= m {
        solve(n, m, |i, j| cost[i][j])
    } else {
        let mut t = solve(m, n, |i, j| cost[j][i]);
        t.iter_mut().for_each(|p| *p = (p.1, p.0));
        t
    };
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Assignment { pairs, cost: total }
}

/// Requires `n <= m`. Every row gets a column.
fn solve(n: usize, m: usize, c: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based; column 0 is a virtual start node
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}

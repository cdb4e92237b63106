//! Minimum-cost bipartite assignment (shortest augmenting path with
//! potentials, O(n²m)) on dense float cost matrices.

use crate::math::Matrix;

/// Injective, cost-minimal pairing of rows to columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// (row, column) pairs, sorted by row; min(n, m) of them.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    fn empty(rows: usize, cols: usize) -> Self {
        Assignment {
            pairs: Vec::new(),
            unmatched_rows: (0..rows).collect(),
            unmatched_cols: (0..cols).collect(),
            total_cost: 0.0,
        }
    }

    pub fn column_for_row(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|(r, _)| *r == row).map(|(_, c)| *c)
    }
}

/// Minimum-total-cost assignment of min(n, m) pairs. All costs must be
/// finite. Ties resolve by fixed scan order, so results are deterministic.
pub fn hungarian(cost: &Matrix) -> Assignment {
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return Assignment::empty(n, m);
    }
    let row_to_col = if n <= m {
        solve(n, m, |i, j| cost[(i, j)])
    } else {
        // transpose so rows <= cols, then invert the pairing
        let col_to_row = solve(m, n, |i, j| cost[(j, i)]);
        let mut inv = vec![None; n];
        for (c, r) in col_to_row.iter().enumerate() {
            if let Some(r) = r {
                inv[*r] = Some(c);
            }
        }
        inv
    };

    let mut pairs = Vec::new();
    let mut used_cols = vec![false; m];
    let mut total = 0.0;
    for (r, c) in row_to_col.iter().enumerate() {
        if let Some(c) = c {
            pairs.push((r, *c));
            used_cols[*c] = true;
            total += cost[(r, *c)];
        }
    }
    let unmatched_rows = row_to_col
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.is_none().then_some(r))
        .collect();
    let unmatched_cols = used_cols
        .iter()
        .enumerate()
        .filter_map(|(c, used)| (!used).then_some(c))
        .collect();
    Assignment {
        pairs,
        unmatched_rows,
        unmatched_cols,
        total_cost: total,
    }
}

/// Core solver for n <= m; returns the matched column per row.
fn solve(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // p[j] = row (1-based) currently assigned to column j; column 0 is virtual
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = NONE;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
        // unwind the augmenting path
        while j0 != 0 {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }

    let mut result = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            result[p[j] - 1] = Some(j - 1);
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injections of rows into columns. Sums in
    /// row order, the same accumulation order `hungarian` uses, so an equal
    /// assignment yields a bitwise-equal total.
    pub(crate) fn brute_force_min(cost: &Matrix) -> f64 {
        let (n, m) = (cost.rows(), cost.cols());
        if n == 0 || m == 0 {
            return 0.0;
        }
        if n <= m {
            (0..m)
                .permutations(n)
                .map(|cols| cols.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum())
                .fold(f64::INFINITY, f64::min)
        } else {
            (0..n)
                .permutations(m)
                .map(|rows| {
                    let mut pairs: Vec<(usize, usize)> =
                        rows.iter().enumerate().map(|(c, &r)| (r, c)).collect();
                    pairs.sort_unstable();
                    pairs.iter().map(|&(r, c)| cost[(r, c)]).sum()
                })
                .fold(f64::INFINITY, f64::min)
        }
    }

    #[test]
    fn diagonal_preference() {
        let cost = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let a = hungarian(&cost);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn anti_diagonal_preference() {
        let cost = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = hungarian(&cost);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn rectangular_leaves_leftovers() {
        let cost = Matrix::from_rows(&[vec![5.0, 1.0, 3.0]]).unwrap();
        let a = hungarian(&cost);
        assert_eq!(a.pairs, vec![(0, 1)]);
        assert_eq!(a.unmatched_cols, vec![0, 2]);
        let tall = Matrix::from_rows(&[vec![5.0], vec![1.0], vec![3.0]]).unwrap();
        let a = hungarian(&tall);
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.unmatched_rows, vec![0, 2]);
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..1000 {
            let n = rng.random_range(1..=5);
            let m = rng.random_range(1..=5);
            let mut cost = Matrix::zeros(n, m);
            for v in cost.data_mut() {
                *v = rng.random_range(-10.0..10.0);
            }
            let fast = hungarian(&cost);
            let slow = brute_force_min(&cost);
            assert_eq!(
                fast.total_cost, slow,
                "trial {trial}: hungarian {} vs brute force {}",
                fast.total_cost, slow
            );
            // injectivity both ways
            let rows: Vec<usize> = fast.pairs.iter().map(|(r, _)| *r).collect();
            let cols: Vec<usize> = fast.pairs.iter().map(|(_, c)| *c).collect();
            assert_eq!(rows.iter().collect::<std::collections::HashSet<_>>().len(), rows.len());
            assert_eq!(cols.iter().collect::<std::collections::HashSet<_>>().len(), cols.len());
            assert_eq!(fast.pairs.len(), n.min(m));
        }
    }

    #[test]
    fn empty_matrix() {
        let a = hungarian(&Matrix::zeros(0, 3));
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_cols, vec![0, 1, 2]);
    }
}

//! Minimum-cost bipartite assignment of ground-truth rows to prediction columns.

use crate::error::{Error, Result};

/// `pairs[i] = (row, column)` sorted by row; every row is assigned to a distinct column.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl Assignment {
    pub fn column_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

/// Kuhn–Munkres with row/column potentials, `O(rows²·cols)`. `cost` is row-major
/// `rows × cols` and needs `rows ≤ cols`.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Assignment> {
    if cost.len() != rows * cols {
        return Err(Error::dim("hungarian", &[cost.len()], &[rows, cols]));
    }
    if rows > cols {
        return Err(Error::Capacity { k: rows, n: cols });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite { op: "hungarian" });
    }
    if rows == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        });
    }
    // 1-based with a virtual column 0 holding the row being inserted.
    let a = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
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
            for j in 0..=cols {
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
    let mut pairs: Vec<(usize, usize)> = (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum();
    Ok(Assignment { pairs, cost: total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        let one = hungarian(&[3.5], 1, 1).unwrap();
        assert_eq!(one.pairs, vec![(0, 0)]);
        let diag = hungarian(&[1.0, 10.0, 10.0, 1.0], 2, 2).unwrap();
        assert_eq!(diag.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(diag.cost, 2.0);
        let rect = hungarian(&[5.0, 1.0, 4.0], 1, 3).unwrap();
        assert_eq!(rect.pairs, vec![(0, 1)]);
        assert!(matches!(hungarian(&[0.0; 6], 3, 2), Err(Error::Capacity { k: 3, n: 2 })));
        assert!(hungarian(&[], 0, 4).unwrap().pairs.is_empty());
    }
}

//! Minimum-cost linear assignment (Hungarian algorithm with potentials).
//!
//! Non-finite cells (and cells at or above [`FORBIDDEN_THRESHOLD`]) are treated as
//! missing edges rather than large numbers, so `+∞` sentinels never pollute the
//! potentials. Rectangular problems with `rows <= cols` are solved directly, which is
//! equivalent to padding the matrix square with zero-cost dummy rows.

use crate::error::{Error, Result};

/// Cells at or above this value are forbidden.
pub const FORBIDDEN_THRESHOLD: f64 = 1e17;

#[inline]
pub fn is_forbidden(c: f64) -> bool {
    !c.is_finite() || c >= FORBIDDEN_THRESHOLD
}

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, fill: f64) -> Self {
        Self { rows, cols, data: vec![fill; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut m = Self::new(r, c, f64::INFINITY);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged cost matrix");
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::new(self.cols, self.rows, 0.0);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// Square copy padded with zero-cost dummy rows or columns.
    pub fn padded_square(&self) -> Self {
        let n = self.rows.max(self.cols);
        let mut m = Self::new(n, n, 0.0);
        for r in 0..self.rows {
            for c in 0..self.cols {
                m.set(r, c, self.get(r, c));
            }
        }
        m
    }
}

/// Result of a linear assignment: `row_to_col[r]` is the column matched to row `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAssignment {
    pub row_to_col: Vec<usize>,
    pub cost: f64,
}

impl LinearAssignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_to_col.iter().copied().enumerate()
    }
}

/// Solves the minimum-cost assignment of every row (when `rows <= cols`) or every
/// column (when `rows > cols`). Returns [`Error::Infeasible`] when no assignment
/// avoids forbidden cells.
pub fn solve_assignment(c: &CostMatrix) -> Result<LinearAssignment> {
    if c.rows == 0 || c.cols == 0 {
        return Ok(LinearAssignment { row_to_col: vec![usize::MAX; c.rows], cost: 0.0 });
    }
    if c.rows <= c.cols {
        let row_to_col = solve_wide(c)?;
        let cost = row_to_col.iter().enumerate().map(|(r, &col)| c.get(r, col)).sum();
        Ok(LinearAssignment { row_to_col, cost })
    } else {
        let t = c.transpose();
        let col_to_row = solve_wide(&t)?;
        let mut row_to_col = vec![usize::MAX; c.rows];
        for (col, &row) in col_to_row.iter().enumerate() {
            row_to_col[row] = col;
        }
        let cost = col_to_row.iter().enumerate().map(|(col, &r)| c.get(r, col)).sum();
        Ok(LinearAssignment { row_to_col, cost })
    }
}

/// Shortest augmenting path with row/column potentials; requires `rows <= cols`.
fn solve_wide(c: &CostMatrix) -> Result<Vec<usize>> {
    let n = c.rows;
    let m = c.cols;
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // p[j]: row (1-based) matched to column j (1-based); 0 = free.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![f64::INFINITY; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = NONE;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cell = c.get(i0 - 1, j - 1);
                if !is_forbidden(cell) {
                    let cur = cell - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if j1 == NONE || !delta.is_finite() {
                return Err(Error::Infeasible);
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else if minv[j].is_finite() {
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

    let mut row_to_col = vec![NONE; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    Ok(row_to_col)
}

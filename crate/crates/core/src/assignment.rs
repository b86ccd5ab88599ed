//! Rectangular minimum-cost assignment.
//!
//! Rows are matched to distinct columns (`rows <= cols`) with the
//! shortest-augmenting-path form of the Hungarian method, keeping dual
//! potentials for both sides. One augmentation per row, each `O(n·m)`.

use crate::error::{Error, Result};

/// Dense row-major cost matrix with finite entries and `rows <= cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::invalid("cost matrix needs at least one row"));
        }
        if rows > cols {
            return Err(Error::invalid(format!(
                "more rows ({rows}) than columns ({cols})"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "cost entry ({}, {})",
                i / cols,
                i % cols
            )));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Total cost of assigning row `i` to `cols[i]`.
    pub fn cost_of(&self, cols: &[usize]) -> f64 {
        cols.iter().enumerate().map(|(r, &c)| self.get(r, c)).sum()
    }
}

/// Injective row → column assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Column chosen for each row.
    pub cols: Vec<usize>,
    pub cost: f64,
}

pub fn hungarian(c: &CostMatrix) -> Assignment {
    let (n, m) = (c.rows, c.cols);
    // 1-based with a virtual column 0 holding the row being inserted
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0f64; m + 1];
    let mut used = vec![false; m + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
        // flip the augmenting path
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut cols = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            cols[owner[j] - 1] = j - 1;
        }
    }
    let cost = c.cost_of(&cols);
    Assignment { cols, cost }
}

/// Exhaustive minimum over all injective maps; for testing on tiny inputs.
pub fn brute_force_assignment(c: &CostMatrix) -> Result<Assignment> {
    if c.rows > 7 || c.cols > 7 {
        return Err(Error::Budget(format!(
            "brute force limited to 7x7, got {}x{}",
            c.rows, c.cols
        )));
    }
    fn search(
        c: &CostMatrix,
        row: usize,
        used: &mut [bool],
        cur: &mut Vec<usize>,
        acc: f64,
        best: &mut Option<Assignment>,
    ) {
        if row == c.rows {
            if best.as_ref().map_or(true, |b| acc < b.cost) {
                *best = Some(Assignment {
                    cols: cur.clone(),
                    cost: acc,
                });
            }
            return;
        }
        for col in 0..c.cols {
            if !used[col] {
                used[col] = true;
                cur.push(col);
                search(c, row + 1, used, cur, acc + c.get(row, col), best);
                cur.pop();
                used[col] = false;
            }
        }
    }
    let mut best = None;
    search(
        c,
        0,
        &mut vec![false; c.cols],
        &mut Vec::new(),
        0.0,
        &mut best,
    );
    let mut best = best.expect("rows <= cols admits an assignment");
    best.cost = c.cost_of(&best.cols);
    Ok(best)
}

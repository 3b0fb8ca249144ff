//! Dense two-phase simplex for the small linear programs behind support
//! functions, feasibility probes and redundancy removal.
//!
//! Solves `max cᵀx  s.t.  A x ≤ b` with free `x`. Free variables are split
//! into nonnegative pairs, rows with negative right-hand side get an
//! artificial variable in phase one. Dantzig pricing with a switch to Bland's
//! rule after a run of degenerate pivots.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Outcome of a linear program.
#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal { x: DVector<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

const EPS_PIVOT: f64 = 1e-11;
const DEGENERATE_STREAK: usize = 40;

struct Tableau {
    /// m rows of coefficients plus trailing rhs column.
    t: DMatrix<f64>,
    /// Objective row: reduced costs plus trailing objective value.
    obj: DVector<f64>,
    basis: Vec<usize>,
    blocked: Vec<bool>,
    n_cols: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.t[(row, col)];
        for j in 0..=self.n_cols {
            self.t[(row, j)] /= piv;
        }
        for i in 0..self.t.nrows() {
            if i == row {
                continue;
            }
            let factor = self.t[(i, col)];
            if factor.abs() > 0.0 {
                for j in 0..=self.n_cols {
                    let v = self.t[(row, j)];
                    self.t[(i, j)] -= factor * v;
                }
            }
        }
        let factor = self.obj[col];
        if factor.abs() > 0.0 {
            for j in 0..=self.n_cols {
                self.obj[j] -= factor * self.t[(row, j)];
            }
        }
        self.basis[row] = col;
    }

    /// Runs the simplex loop until no improving column remains.
    ///
    /// Returns `None` on success and the entering column on unboundedness.
    fn solve(&mut self) -> Result<Option<usize>> {
        let m = self.t.nrows();
        let max_iter = 10_000 + 200 * (m + self.n_cols);
        let mut bland = false;
        let mut degenerate_streak = 0usize;
        for _ in 0..max_iter {
            let mut col = None;
            if bland {
                for j in 0..self.n_cols {
                    if !self.blocked[j] && self.obj[j] > EPS_PIVOT {
                        col = Some(j);
                        break;
                    }
                }
            } else {
                let mut best = EPS_PIVOT;
                for j in 0..self.n_cols {
                    if !self.blocked[j] && self.obj[j] > best {
                        best = self.obj[j];
                        col = Some(j);
                    }
                }
            }
            let Some(col) = col else {
                return Ok(None);
            };
            let mut row = None;
            let mut best_ratio = f64::INFINITY;
            for i in 0..m {
                let coef = self.t[(i, col)];
                if coef > EPS_PIVOT {
                    let ratio = self.t[(i, self.n_cols)] / coef;
                    if ratio < best_ratio - EPS_PIVOT
                        || (ratio < best_ratio + EPS_PIVOT
                            && row.is_some_and(|r: usize| self.basis[i] < self.basis[r]))
                    {
                        best_ratio = ratio;
                        row = Some(i);
                    }
                }
            }
            let Some(row) = row else {
                return Ok(Some(col));
            };
            if best_ratio.abs() <= EPS_PIVOT {
                degenerate_streak += 1;
                if degenerate_streak > DEGENERATE_STREAK {
                    bland = true;
                }
            } else {
                degenerate_streak = 0;
            }
            self.pivot(row, col);
        }
        Err(Error::Internal("simplex iteration cap exceeded".into()))
    }
}

/// Maximizes `cᵀx` over `{x : A x ≤ b}`.
pub fn maximize(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<LpOutcome> {
    let (m, d) = (a.nrows(), a.ncols());
    if c.len() != d {
        return Err(Error::DimensionMismatch {
            what: "lp objective",
            expected: d,
            got: c.len(),
        });
    }
    if b.len() != m {
        return Err(Error::DimensionMismatch {
            what: "lp right-hand side",
            expected: m,
            got: b.len(),
        });
    }

    // Columns: x⁺ (d), x⁻ (d), slacks (m), artificials for negated rows.
    let negated: Vec<bool> = (0..m).map(|i| b[i] < 0.0).collect();
    let n_art = negated.iter().filter(|&&v| v).count();
    let n_cols = 2 * d + m + n_art;
    let mut t = DMatrix::<f64>::zeros(m, n_cols + 1);
    let mut basis = vec![0usize; m];
    let mut art_idx = 0usize;
    for i in 0..m {
        let sign = if negated[i] { -1.0 } else { 1.0 };
        for j in 0..d {
            t[(i, j)] = sign * a[(i, j)];
            t[(i, d + j)] = -sign * a[(i, j)];
        }
        t[(i, 2 * d + i)] = sign;
        t[(i, n_cols)] = sign * b[i];
        if negated[i] {
            let col = 2 * d + m + art_idx;
            t[(i, col)] = 1.0;
            basis[i] = col;
            art_idx += 1;
        } else {
            basis[i] = 2 * d + i;
        }
    }

    let mut blocked = vec![false; n_cols];
    for j in 2 * d + m..n_cols {
        blocked[j] = true;
    }

    let mut tab = Tableau {
        t,
        obj: DVector::zeros(n_cols + 1),
        basis,
        blocked,
        n_cols,
    };

    let feas_tol = 1e-9 * (1.0 + b.amax());

    if n_art > 0 {
        // Phase one: drive the artificial variables to zero.
        for i in 0..m {
            if negated[i] {
                for j in 0..=n_cols {
                    tab.obj[j] += tab.t[(i, j)];
                }
            }
        }
        for j in 2 * d + m..n_cols {
            tab.obj[j] = 0.0;
        }
        if tab.solve()?.is_some() {
            return Err(Error::Internal("phase one reported unbounded".into()));
        }
        if tab.obj[n_cols] > feas_tol {
            return Ok(LpOutcome::Infeasible);
        }
        // Pivot leftover artificials out of the basis where possible.
        let mut drop_rows = Vec::new();
        for i in 0..m {
            if tab.basis[i] >= 2 * d + m {
                let col = (0..2 * d + m).find(|&j| tab.t[(i, j)].abs() > EPS_PIVOT);
                match col {
                    Some(j) => tab.pivot(i, j),
                    None => drop_rows.push(i),
                }
            }
        }
        if !drop_rows.is_empty() {
            let keep: Vec<usize> = (0..m).filter(|i| !drop_rows.contains(i)).collect();
            let mut nt = DMatrix::<f64>::zeros(keep.len(), n_cols + 1);
            let mut nb = Vec::with_capacity(keep.len());
            for (ni, &oi) in keep.iter().enumerate() {
                for j in 0..=n_cols {
                    nt[(ni, j)] = tab.t[(oi, j)];
                }
                nb.push(tab.basis[oi]);
            }
            tab.t = nt;
            tab.basis = nb;
        }
    }

    // Phase two objective: reduced costs of max cᵀ(x⁺ − x⁻).
    let cost = |j: usize| -> f64 {
        if j < d {
            c[j]
        } else if j < 2 * d {
            -c[j - d]
        } else {
            0.0
        }
    };
    tab.obj.fill(0.0);
    for j in 0..n_cols {
        tab.obj[j] = cost(j);
    }
    for i in 0..tab.t.nrows() {
        let cb = cost(tab.basis[i]);
        if cb != 0.0 {
            for j in 0..=n_cols {
                tab.obj[j] -= cb * tab.t[(i, j)];
            }
        }
    }
    // The objective row's rhs slot carries −(objective value) under this
    // update; track the value separately for clarity.
    if tab.solve()?.is_some() {
        return Ok(LpOutcome::Unbounded);
    }

    let mut x = DVector::<f64>::zeros(d);
    for i in 0..tab.t.nrows() {
        let bcol = tab.basis[i];
        let v = tab.t[(i, n_cols)];
        if bcol < d {
            x[bcol] += v;
        } else if bcol < 2 * d {
            x[bcol - d] -= v;
        }
    }
    let value = c.dot(&x);
    Ok(LpOutcome::Optimal { x, value })
}

/// Phase-one feasibility probe for `{x : A x ≤ b}`.
pub fn is_feasible(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<bool> {
    match maximize(&DVector::zeros(a.ncols()), a, b)? {
        LpOutcome::Infeasible => Ok(false),
        _ => Ok(true),
    }
}

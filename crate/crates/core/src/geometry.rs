//! Polytopes in H-representation, norm balls and their intersections: the
//! geometric substrate for the sampled feasibility domain and the region of
//! admissible deviations around an equilibrium.
//!
//! All sets are immutable after construction and safe to share across
//! threads; the LP scratch space is per call.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{self, LpOutcome};
use crate::qp;

/// Tolerance below which a constraint row counts as identically zero.
pub const ZERO_ROW_TOL: f64 = 1e-14;
/// Unit-norm tolerance for normalized rows.
pub const NORMALIZATION_TOL: f64 = 1e-12;
/// Default tolerance for facet-intersection and membership decisions.
pub const DEFAULT_FACET_TOL: f64 = 1e-9;
/// Margin used when a row counts as redundant.
pub const REDUNDANCY_TOL: f64 = 1e-9;

/// Axis-aligned box `{x : lower ≤ x ≤ upper}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                what: "box bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for i in 0..lower.len() {
            if !(lower[i] <= upper[i]) {
                return Err(Error::OutOfRange(format!(
                    "box bound {i}: lower {} > upper {}",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| x[i].clamp(self.lower[i], self.upper[i]))
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (0..self.dim()).all(|i| x[i] >= self.lower[i] - tol && x[i] <= self.upper[i] + tol)
    }

    /// All `2^d` corners; intended for small dimensions only.
    pub fn vertices(&self) -> Result<Vec<DVector<f64>>> {
        let d = self.dim();
        if d > 20 {
            return Err(Error::OutOfRange(format!(
                "vertex enumeration of a {d}-dimensional box"
            )));
        }
        let mut out = Vec::with_capacity(1 << d);
        for mask in 0u32..(1 << d) {
            out.push(DVector::from_fn(d, |i, _| {
                if mask >> i & 1 == 1 {
                    self.upper[i]
                } else {
                    self.lower[i]
                }
            }));
        }
        Ok(out)
    }

    /// H-representation with unit rows: `x_i ≤ u_i` then `−x_i ≤ −l_i`.
    pub fn to_polytope(&self) -> Polytope {
        let d = self.dim();
        let mut a = DMatrix::<f64>::zeros(2 * d, d);
        let mut b = DVector::<f64>::zeros(2 * d);
        for i in 0..d {
            a[(i, i)] = 1.0;
            b[i] = self.upper[i];
            a[(d + i, i)] = -1.0;
            b[d + i] = -self.lower[i];
        }
        Polytope {
            a,
            b,
            row_normalized: true,
        }
    }
}

/// Supported ball norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormOrder {
    One,
    Two,
    Inf,
}

/// Ball `{y : ‖y − center‖_p ≤ radius}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormBall {
    pub center: DVector<f64>,
    pub radius: f64,
    pub norm: NormOrder,
}

impl NormBall {
    pub fn new(center: DVector<f64>, radius: f64, norm: NormOrder) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::OutOfRange(format!("ball radius {radius}")));
        }
        Ok(Self {
            center,
            radius,
            norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Radius factor of the Euclidean sphere circumscribing this ball:
    /// 1 for p ≤ 2 and √d for the ∞-norm.
    pub fn circumscription_factor(&self) -> f64 {
        match self.norm {
            NormOrder::One | NormOrder::Two => 1.0,
            NormOrder::Inf => (self.dim() as f64).sqrt(),
        }
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let d = x - &self.center;
        let dist = match self.norm {
            NormOrder::One => d.iter().map(|v| v.abs()).sum::<f64>(),
            NormOrder::Two => d.norm(),
            NormOrder::Inf => d.amax(),
        };
        dist <= self.radius + tol
    }

    /// Same ball with the radius reduced by `margin`.
    pub fn shrunk(&self, margin: f64) -> Result<Self> {
        Self::new(self.center.clone(), self.radius - margin, self.norm)
    }

    /// Exact half-space representation; defined for the 1- and ∞-norms.
    pub fn to_halfspaces(&self) -> Result<Polytope> {
        let d = self.dim();
        match self.norm {
            NormOrder::Inf => {
                let shifted = BoxSet::new(
                    self.center.map(|c| c - self.radius),
                    self.center.map(|c| c + self.radius),
                )?;
                Ok(shifted.to_polytope())
            }
            NormOrder::One => {
                if d > 16 {
                    return Err(Error::OutOfRange(format!(
                        "1-norm ball half-space conversion in dimension {d}"
                    )));
                }
                let rows = 1usize << d;
                let scale = 1.0 / (d as f64).sqrt();
                let mut a = DMatrix::<f64>::zeros(rows, d);
                let mut b = DVector::<f64>::zeros(rows);
                for mask in 0..rows {
                    let mut dot_c = 0.0;
                    for j in 0..d {
                        let s = if mask >> j & 1 == 1 { 1.0 } else { -1.0 };
                        a[(mask, j)] = s * scale;
                        dot_c += s * self.center[j];
                    }
                    b[mask] = (self.radius + dot_c) * scale;
                }
                Ok(Polytope {
                    a,
                    b,
                    row_normalized: true,
                })
            }
            NormOrder::Two => Err(Error::UnsupportedKind(
                "a 2-norm ball has no exact half-space representation",
            )),
        }
    }
}

/// Polytope `{x : A x ≤ b}` with rows of unit Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    a: DMatrix<f64>,
    b: DVector<f64>,
    row_normalized: bool,
}

/// Normalizes each row of `(A, b)` by its Euclidean row norm.
///
/// The represented set is unchanged; rows with norm below [`ZERO_ROW_TOL`]
/// are rejected.
pub fn normalize_rows(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Polytope> {
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "polytope rows",
            expected: a.nrows(),
            got: b.len(),
        });
    }
    let mut an = a.clone();
    let mut bn = b.clone();
    for i in 0..a.nrows() {
        let norm = a.row(i).norm();
        if norm < ZERO_ROW_TOL {
            return Err(Error::ZeroRow { row: i, norm });
        }
        for j in 0..a.ncols() {
            an[(i, j)] /= norm;
        }
        bn[i] /= norm;
    }
    Ok(Polytope {
        a: an,
        b: bn,
        row_normalized: true,
    })
}

impl Polytope {
    /// Empty row set in a given ambient dimension (the whole space).
    pub fn unconstrained(dim: usize) -> Self {
        Polytope {
            a: DMatrix::zeros(0, dim),
            b: DVector::zeros(0),
            row_normalized: true,
        }
    }

    pub fn from_rows(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        normalize_rows(&a, &b)
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn is_row_normalized(&self) -> bool {
        self.row_normalized
    }

    /// Keeps only the rows at `indices`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut a = DMatrix::<f64>::zeros(indices.len(), self.dim());
        let mut b = DVector::<f64>::zeros(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            for j in 0..self.dim() {
                a[(k, j)] = self.a[(i, j)];
            }
            b[k] = self.b[i];
        }
        Polytope {
            a,
            b,
            row_normalized: self.row_normalized,
        }
    }

    pub fn stack(&self, other: &Polytope) -> Result<Polytope> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                what: "stacked polytopes",
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let m = self.num_rows() + other.num_rows();
        let mut a = DMatrix::<f64>::zeros(m, self.dim());
        let mut b = DVector::<f64>::zeros(m);
        a.view_mut((0, 0), (self.num_rows(), self.dim()))
            .copy_from(&self.a);
        a.view_mut((self.num_rows(), 0), (other.num_rows(), self.dim()))
            .copy_from(&other.a);
        b.rows_mut(0, self.num_rows()).copy_from(&self.b);
        b.rows_mut(self.num_rows(), other.num_rows())
            .copy_from(&other.b);
        Ok(Polytope {
            a,
            b,
            row_normalized: self.row_normalized && other.row_normalized,
        })
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.max_violation(x) <= tol
    }

    /// Largest row residual `aᵀx − b` (negative means strictly inside).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        if self.num_rows() == 0 {
            return 0.0;
        }
        let resid = &self.a * x - &self.b;
        for v in resid.iter() {
            worst = worst.max(*v);
        }
        worst
    }

    /// `max_{x ∈ P} directionᵀx` by linear programming.
    pub fn support(&self, direction: &DVector<f64>) -> Result<f64> {
        match lp::maximize(direction, &self.a, &self.b)? {
            LpOutcome::Optimal { value, .. } => Ok(value),
            LpOutcome::Infeasible => Err(Error::Infeasible),
            LpOutcome::Unbounded => Err(Error::Unbounded),
        }
    }

    pub fn is_feasible(&self) -> Result<bool> {
        lp::is_feasible(&self.a, &self.b)
    }

    /// Shifts the right-hand side inward by `t` (componentwise `b − t`).
    ///
    /// Fails with [`Error::EmptyAfterTightening`] if the shifted set is empty.
    pub fn tightened(&self, t: &DVector<f64>) -> Result<Polytope> {
        if t.len() != self.num_rows() {
            return Err(Error::DimensionMismatch {
                what: "tightening vector",
                expected: self.num_rows(),
                got: t.len(),
            });
        }
        let out = Polytope {
            a: self.a.clone(),
            b: &self.b - t,
            row_normalized: self.row_normalized,
        };
        if !out.is_feasible()? {
            let untightened = (0..t.len()).filter(|&i| t[i] == 0.0).collect();
            return Err(Error::EmptyAfterTightening { untightened });
        }
        Ok(out)
    }

    /// Removes rows implied by the others with margin [`REDUNDANCY_TOL`].
    ///
    /// Exactly parallel rows are first reduced to the one with the smallest
    /// right-hand side; the surviving rows then go through one LP test each
    /// against the currently kept set. Returns the pruned polytope and the
    /// kept row indices (ascending).
    pub fn pruned(&self, tol: f64) -> Result<(Polytope, Vec<usize>)> {
        use std::collections::HashMap;
        let m = self.num_rows();
        let mut kept: Vec<usize> = Vec::with_capacity(m);
        // Parallel-direction pass on exact bit patterns.
        let mut best: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut order: Vec<Vec<u64>> = Vec::new();
        for i in 0..m {
            let key: Vec<u64> = (0..self.dim()).map(|j| self.a[(i, j)].to_bits()).collect();
            match best.get(&key) {
                Some(&prev) if self.b[prev] <= self.b[i] + tol => {}
                _ => {
                    if !best.contains_key(&key) {
                        order.push(key.clone());
                    }
                    best.insert(key, i);
                }
            }
        }
        // Keep near-ties of the per-direction minimum as well, but exact
        // bit-for-bit duplicates collapse to their first occurrence.
        let mut seen: std::collections::HashSet<Vec<u64>> = std::collections::HashSet::new();
        for i in 0..m {
            let mut key: Vec<u64> = (0..self.dim()).map(|j| self.a[(i, j)].to_bits()).collect();
            let rep = best[&key];
            key.push(self.b[i].to_bits());
            if self.b[i] <= self.b[rep] + tol && seen.insert(key) {
                kept.push(i);
            }
        }
        kept.sort_unstable();
        kept.dedup();

        // LP pass against the currently kept rows.
        let mut alive: Vec<usize> = kept;
        let mut idx = 0;
        while idx < alive.len() {
            let row = alive[idx];
            let others: Vec<usize> = alive
                .iter()
                .copied()
                .filter(|&r| r != row)
                .collect();
            let sub = self.select_rows(&others);
            let dir = self.a.row(row).transpose();
            let redundant = match lp::maximize(&dir, sub.rows(), sub.rhs())? {
                LpOutcome::Optimal { value, .. } => value <= self.b[row] - tol,
                LpOutcome::Unbounded => false,
                LpOutcome::Infeasible => false,
            };
            if redundant {
                alive.remove(idx);
            } else {
                idx += 1;
            }
        }
        Ok((self.select_rows(&alive), alive))
    }
}

/// Intersection of a polytope with a ball of strategic deviations.
#[derive(Debug, Clone)]
pub struct Region {
    pub base: Polytope,
    pub ball: NormBall,
}

impl Region {
    pub fn new(base: Polytope, ball: NormBall) -> Result<Self> {
        if base.dim() != ball.dim() {
            return Err(Error::DimensionMismatch {
                what: "region",
                expected: base.dim(),
                got: ball.dim(),
            });
        }
        Ok(Self { base, ball })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Exact stacked half-space form; defined for 1- and ∞-norm balls.
    pub fn to_polytope(&self) -> Result<Polytope> {
        self.base.stack(&self.ball.to_halfspaces()?)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.base.contains(x, tol) && self.ball.contains(x, tol)
    }

    pub fn is_empty(&self) -> Result<bool> {
        match self.ball.norm {
            NormOrder::One | NormOrder::Inf => Ok(!self.to_polytope()?.is_feasible()?),
            NormOrder::Two => match self.nearest_to_center()? {
                Some((dist, _)) => Ok(dist > self.ball.radius + 1e-12),
                None => Ok(true),
            },
        }
    }

    /// `max_{x ∈ base ∩ ball} directionᵀx`.
    ///
    /// 1- and ∞-norm balls go through the exact half-space stack and one LP;
    /// 2-norm balls are handled by a convex subproblem (dual bisection on the
    /// ball multiplier with an inner quadratic program over the base rows).
    pub fn support(&self, direction: &DVector<f64>) -> Result<f64> {
        match self.ball.norm {
            NormOrder::One | NormOrder::Inf => self.to_polytope()?.support(direction),
            NormOrder::Two => self.support_euclidean_ball(direction),
        }
    }

    /// Euclidean distance from the ball center to the base polytope and the
    /// attaining point, or `None` if the base itself is empty.
    fn nearest_to_center(&self) -> Result<Option<(f64, DVector<f64>)>> {
        let start = match lp::maximize(
            &DVector::zeros(self.dim()),
            self.base.rows(),
            self.base.rhs(),
        )? {
            LpOutcome::Optimal { x, .. } => x,
            _ => return Ok(None),
        };
        let n = self.dim();
        let h = DMatrix::<f64>::identity(n, n) * 2.0;
        let g = -2.0 * &self.ball.center;
        let x = qp::minimize(&h, &g, self.base.rows(), self.base.rhs(), start)?;
        Ok(Some(((&x - &self.ball.center).norm(), x)))
    }

    fn support_euclidean_ball(&self, direction: &DVector<f64>) -> Result<f64> {
        let c = &self.ball.center;
        let r = self.ball.radius;
        let near = match self.nearest_to_center()? {
            None => return Err(Error::Infeasible),
            Some((dist, _)) if dist > r + 1e-12 => return Err(Error::Infeasible),
            Some((_, point)) => point,
        };
        // Plain LP over the base: if its maximizer is inside the ball the
        // ball constraint is slack.
        if let LpOutcome::Optimal { x, value } =
            lp::maximize(direction, self.base.rows(), self.base.rhs())?
        {
            if (&x - c).norm() <= r + 1e-12 {
                return Ok(value);
            }
        }
        let (_, value) = qp::maximize_over_ball_intersection(
            direction,
            self.base.rows(),
            self.base.rhs(),
            c,
            r,
            near,
        )?;
        Ok(value)
    }
}

/// Indices of facets `a_ℓᵀx = b_ℓ` of `p` attained on `p ∩ ball`.
///
/// The decision per facet maximizes `a_ℓᵀx` over the intersection and tests
/// whether the maximum reaches `b_ℓ − tol`; a touching facet therefore
/// counts. Callers that want open-ball semantics pass a ball shrunk by a
/// margin exceeding their solver tolerance.
pub fn facets_intersecting_ball(
    p: &Polytope,
    ball: &NormBall,
    tol: f64,
) -> Result<Vec<usize>> {
    if p.dim() != ball.dim() {
        return Err(Error::DimensionMismatch {
            what: "facet test",
            expected: p.dim(),
            got: ball.dim(),
        });
    }
    let violation = p.max_violation(&ball.center);
    if violation > tol.max(DEFAULT_FACET_TOL) {
        return Err(Error::CenterOutside {
            violation,
            tol: tol.max(DEFAULT_FACET_TOL),
        });
    }
    let region = Region::new(p.clone(), ball.clone())?;
    let mut out = Vec::new();
    for l in 0..p.num_rows() {
        let dir = p.rows().row(l).transpose();
        let max = region.support(&dir)?;
        if max >= p.rhs()[l] - tol {
            out.push(l);
        }
    }
    Ok(out)
}

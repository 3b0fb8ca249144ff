//! The constraint-tightening primal-dual iteration: repeated skewed
//! projections of `y − D⁻¹T(y)` onto `X × ℳ` until the step norm falls
//! below the stopping tolerance.
//!
//! `T` stacks the pseudo-gradient with the (tightened) constraint residuals;
//! `D` is the asymmetric step matrix whose symmetric part must be positive
//! definite, which pins `τ‖A‖ < 1`. The projection is solved per multiplier
//! piece by alternating exact block minimization: the box block is a clamp,
//! the multiplier block a chain projection, and the alternation contracts
//! with factor `(τ‖A‖)²` — the same condition that makes `D_s ≻ 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::ViMap;
use crate::geometry::{BoxSet, NormBall, NormOrder, Polytope, Region};
use crate::multipliers::{MultiplierDomain, ProjectionMode};
use crate::tightening::{tightening_mask, tightening_vector};

const TAU_SAFETY: f64 = 0.9;
const SPECTRAL_GUARD: f64 = 0.99;
/// Feasibility tolerance for iterate membership in `X × ℳ`.
pub const ITERATE_MEMBERSHIP_TOL: f64 = 1e-9;

/// Step-size selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauMode {
    /// Trust the caller.
    Explicit(f64),
    /// `0.9 × min(monotonicity bound, jump bound, 0.99/‖A‖)`.
    FromBounds,
}

/// Everything the iteration consumes besides the game and the domain.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub tau: TauMode,
    /// Deviation radius of the ball around the equilibrium, in the solve
    /// space.
    pub rho: f64,
    /// Number of facets the deviation ball may intersect.
    pub m_budget: usize,
    /// Multiplier separation of ℳ.
    pub zeta: f64,
    /// Stopping tolerance on the unweighted step norm.
    pub xi: f64,
    pub ball_norm: NormOrder,
    /// Coordinate cap of ℳ (compactness device).
    pub cap: f64,
    pub max_iter: usize,
    pub projection: ProjectionMode,
    pub record_trace: bool,
    /// Probe emptiness of every tightened row combination up front.
    pub check_tightened_combos: bool,
}

impl SolverConfig {
    pub fn new(rho: f64, m_budget: usize, zeta: f64) -> Self {
        Self {
            tau: TauMode::FromBounds,
            rho,
            m_budget,
            zeta,
            xi: 1e-8,
            ball_norm: NormOrder::One,
            cap: 1e6,
            max_iter: 200_000,
            projection: ProjectionMode::Auto,
            record_trace: false,
            check_tightened_combos: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::OutOfRange(format!("rho {}", self.rho)));
        }
        if !(self.xi > 0.0) {
            return Err(Error::OutOfRange(format!("xi {}", self.xi)));
        }
        if self.max_iter == 0 {
            return Err(Error::OutOfRange("max_iter must be at least 1".into()));
        }
        if let TauMode::Explicit(t) = self.tau {
            if !(t > 0.0) {
                return Err(Error::OutOfRange(format!("tau {t}")));
            }
        }
        Ok(())
    }

    /// Circumscribed-sphere factor for a ball of this norm living in a
    /// `dim`-dimensional space.
    pub fn circumscription_factor(&self, dim: usize) -> f64 {
        match self.ball_norm {
            NormOrder::One | NormOrder::Two => 1.0,
            NormOrder::Inf => (dim as f64).sqrt(),
        }
    }
}

/// Stacked primal-dual iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub x: DVector<f64>,
    pub mu: DVector<f64>,
    pub kappa: usize,
}

/// One recorded iterate of the trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub kappa: usize,
    pub x: DVector<f64>,
    pub mu: DVector<f64>,
    pub step_norm: f64,
    pub mask: Vec<bool>,
}

/// How the jump-bound supremum was estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RBarMode {
    VertexEnumeration,
    RandomSampling,
}

#[derive(Debug, Clone, Copy)]
pub struct RBarEstimate {
    pub value: f64,
    pub mode: RBarMode,
}

/// Result of a solve.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub state: IterateState,
    /// `Π_K ∩ B(x*, ρ)` with the untightened domain.
    pub region: Region,
    /// `true` for rows tightened at the final iterate.
    pub tightened_mask: Vec<bool>,
    /// Norm of the final step.
    pub residual: f64,
    /// `‖y* − proj(y* − D⁻¹T(y*))‖` recomputed at the final iterate.
    pub fixed_point_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub tau_used: f64,
    pub c_factor: f64,
    pub norm_a: f64,
    pub trace: Option<Vec<TraceRow>>,
    pub r_bar: Option<RBarEstimate>,
}

/// Largest singular value (zero for an empty matrix).
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// The asymmetric step matrix `D = [(1/τ)I, 0; −2A, (1/τ)I]` and its
/// symmetric part `D_s = [(1/τ)I, −Aᵀ; −A, (1/τ)I]`.
///
/// `D_s ≻ 0` iff `τ‖A‖₂ < 1` (Schur complement of the top-left block).
pub fn build_d(tau: f64, a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::OutOfRange(format!("tau {tau}")));
    }
    let norm_a = spectral_norm(a);
    let product = tau * norm_a;
    if product >= 1.0 {
        return Err(Error::NotPositiveDefinite {
            tau,
            norm_a,
            product,
        });
    }
    let (m, n) = (a.nrows(), a.ncols());
    let total = n + m;
    let mut d = DMatrix::<f64>::zeros(total, total);
    let mut d_s = DMatrix::<f64>::zeros(total, total);
    for i in 0..total {
        d[(i, i)] = 1.0 / tau;
        d_s[(i, i)] = 1.0 / tau;
    }
    for r in 0..m {
        for c in 0..n {
            d[(n + r, c)] = -2.0 * a[(r, c)];
            d_s[(n + r, c)] = -a[(r, c)];
            d_s[(c, n + r)] = -a[(r, c)];
        }
    }
    Ok((d, d_s))
}

/// Monotonicity/continuity step bound: the smaller of the two admissible
/// ranges derived from strong monotonicity and from the tightening-map
/// discontinuity gap.
///
/// Returns the +∞ sentinel with a warning when `‖A‖ = 0` (both ranges are
/// vacuous without coupling rows).
pub fn tau_bound_lemma3(l_f: f64, alpha: f64, norm_a: f64, rho: f64, zeta: f64) -> Result<f64> {
    for (name, v) in [
        ("l_f", l_f),
        ("alpha", alpha),
        ("rho", rho),
        ("zeta", zeta),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::DegenerateInput(format!("{name} = {v}")));
        }
    }
    if norm_a < 0.0 || !norm_a.is_finite() {
        return Err(Error::DegenerateInput(format!("norm_a = {norm_a}")));
    }
    if norm_a == 0.0 {
        log::warn!("step bound requested with ‖A‖ = 0; the bound is vacuous");
        return Ok(f64::INFINITY);
    }
    let a2 = norm_a * norm_a;
    let term1 = (-l_f.powi(2) + (l_f.powi(4) + 4.0 * alpha.powi(2) * a2).sqrt())
        / (2.0 * alpha * a2);
    let term2 = (-rho * (1.0 + a2)
        + ((rho * (1.0 + a2)).powi(2) + 16.0 * zeta.powi(2) * a2).sqrt())
        / (4.0 * zeta * a2);
    Ok(term1.min(term2))
}

/// Piece-jump step bound `(−(C̄+R̄) + √((C̄+R̄)² + 2ζR̄)) / (2R̄)`.
pub fn tau_bound_thm2(r_bar: f64, c_bar: f64, zeta: f64) -> Result<f64> {
    if !(r_bar > 0.0) || !r_bar.is_finite() {
        return Err(Error::DegenerateInput(format!("r_bar = {r_bar}")));
    }
    if c_bar < 0.0 || !(zeta > 0.0) {
        return Err(Error::DegenerateInput(format!(
            "c_bar = {c_bar}, zeta = {zeta}"
        )));
    }
    let s = c_bar + r_bar;
    Ok((-s + (s * s + 2.0 * zeta * r_bar).sqrt()) / (2.0 * r_bar))
}

/// Estimates `R̄ = max{ sup ‖2A(F(x)+Aᵀμ)‖, sup ‖Ax−b‖ }` over `X × [0,cap]^m`.
///
/// For affine maps in low dimension the suprema are attained at the vertices
/// of the product and enumerated exactly; otherwise 1000 seeded random
/// points are evaluated and the maximum inflated by 2.
pub fn estimate_r_bar(
    map: &ViMap,
    x_box: &BoxSet,
    coupling: &Polytope,
    cap: f64,
) -> Result<RBarEstimate> {
    let dim = x_box.dim();
    let m = coupling.num_rows();
    let a = coupling.rows();
    let b = coupling.rhs();
    let eval_at = |x: &DVector<f64>, mu: &DVector<f64>| -> Result<(f64, f64)> {
        let fx = map.eval(x)?;
        let inner = &fx + a.transpose() * mu;
        let first = (2.0 * (a * inner)).norm();
        let second = (a * x - b).norm();
        Ok((first, second))
    };
    if map.linear_operator().is_some() && dim + m <= 20 {
        let mut worst = 0.0f64;
        let x_vertices = x_box.vertices()?;
        for xv in &x_vertices {
            for mask in 0u32..(1 << m) {
                let mu = DVector::from_fn(m, |i, _| {
                    if mask >> i & 1 == 1 {
                        cap
                    } else {
                        0.0
                    }
                });
                let (f1, f2) = eval_at(xv, &mu)?;
                worst = worst.max(f1).max(f2);
            }
        }
        Ok(RBarEstimate {
            value: worst,
            mode: RBarMode::VertexEnumeration,
        })
    } else {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0x5eed);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let x = DVector::from_fn(dim, |i, _| {
                let t: f64 = rng.random();
                x_box.lower[i] + t * (x_box.upper[i] - x_box.lower[i])
            });
            let mu = DVector::from_fn(m, |_, _| rng.random::<f64>() * cap);
            let (f1, f2) = eval_at(&x, &mu)?;
            worst = worst.max(f1).max(f2);
        }
        Ok(RBarEstimate {
            value: 2.0 * worst,
            mode: RBarMode::RandomSampling,
        })
    }
}

/// The primal-dual map `T(y, ρ, M) = [F(x) + Aᵀμ; −(Ax − b + Q(μ,M)𝛒)]`.
pub fn t_eval(
    map: &ViMap,
    coupling: &Polytope,
    x: &DVector<f64>,
    mu: &DVector<f64>,
    m_budget: usize,
    c: f64,
    rho: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let a = coupling.rows();
    if mu.len() != coupling.num_rows() {
        return Err(Error::DimensionMismatch {
            what: "multiplier vector",
            expected: coupling.num_rows(),
            got: mu.len(),
        });
    }
    let fx = map.eval(x)?;
    let top = &fx + a.transpose() * mu;
    let bottom = if coupling.num_rows() == 0 {
        DVector::zeros(0)
    } else {
        let q = tightening_vector(mu, m_budget, c, rho)?;
        -(a * x - coupling.rhs() + q)
    };
    Ok((top, bottom))
}

/// Skewed projection of a point onto `X × ℳ` in the `D_s` metric.
///
/// Per candidate piece of ℳ the coupled quadratic is minimized by
/// alternating exact block solves (box clamp / chain projection), which
/// contract with factor `(τ‖A‖)² < 1`; pieces are compared by their exact
/// `D_s` objective with ties to the earliest piece.
pub struct SkewedProjector<'a> {
    pub tau: f64,
    pub coupling: &'a Polytope,
    pub x_box: &'a BoxSet,
    pub mdom: &'a MultiplierDomain,
    pub mode: ProjectionMode,
    contraction: f64,
}

impl<'a> SkewedProjector<'a> {
    pub fn new(
        tau: f64,
        coupling: &'a Polytope,
        x_box: &'a BoxSet,
        mdom: &'a MultiplierDomain,
        mode: ProjectionMode,
        norm_a: f64,
    ) -> Self {
        let contraction = (tau * norm_a).powi(2);
        Self {
            tau,
            coupling,
            x_box,
            mdom,
            mode,
            contraction,
        }
    }

    /// D_s-objective `(1/τ)‖x−px‖² − 2(μ−pμ)ᵀA(x−px) + (1/τ)‖μ−pμ‖²`.
    fn objective(&self, x: &DVector<f64>, mu: &DVector<f64>, px: &DVector<f64>, pmu: &DVector<f64>) -> f64 {
        let dx = x - px;
        let dmu = mu - pmu;
        let cross = if self.coupling.num_rows() == 0 {
            0.0
        } else {
            dmu.dot(&(self.coupling.rows() * &dx))
        };
        (dx.norm_squared() + dmu.norm_squared()) / self.tau - 2.0 * cross
    }

    pub fn project(&self, px: &DVector<f64>, pmu: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let m = self.coupling.num_rows();
        if m == 0 {
            return Ok((self.x_box.clamp(px), DVector::zeros(0)));
        }
        let a = self.coupling.rows();
        let a_t = a.transpose();
        let candidates = self.mdom.candidate_pieces(pmu, self.mode);
        if candidates.is_empty() {
            return Err(Error::NoFeasiblePiece);
        }
        let q = self.contraction;
        let tol = 1e-13 * (1.0 + px.norm() + pmu.norm());
        // Iterations to push the geometric tail below tol.
        let max_inner = if q < 1e-12 {
            3
        } else {
            let bound = (tol.ln() - 10f64.ln()) / q.ln();
            (bound.ceil().max(3.0) as usize).min(20_000)
        };
        let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
        for piece in candidates {
            let mut mu = self.mdom.project_piece(&piece, pmu);
            let mut x = self.x_box.clamp(&(px + self.tau * (&a_t * (&mu - pmu))));
            for _ in 0..max_inner {
                let mu_next = self
                    .mdom
                    .project_piece(&piece, &(pmu + self.tau * (a * (&x - px))));
                let step = (&mu_next - &mu).norm();
                mu = mu_next;
                x = self.x_box.clamp(&(px + self.tau * (&a_t * (&mu - pmu))));
                if step <= tol {
                    break;
                }
            }
            let obj = self.objective(&x, &mu, px, pmu);
            if best.as_ref().is_none_or(|(b, _, _)| obj < *b) {
                best = Some((obj, x, mu));
            }
        }
        let (_, x, mu) = best.expect("nonempty candidate set");
        Ok((x, mu))
    }
}

/// One update of the fixed-point iteration.
///
/// The step solves the strongly monotone subproblem
/// `VI(X × ℳ_j, T(y) + D(· − y))` per candidate piece; the lower-triangular
/// off-diagonal of `D` makes it forward-substitutable: the primal block is
/// the box projection of the forward step, the multiplier block the
/// Euclidean piece projection of the argument with the reflected primal term
/// `A(2x⁺ − x)`. The winning piece minimizes the `D_s` distance from
/// `y − D⁻¹T(y)`; at a fixed point every block satisfies the plain VI, so no
/// step-size bias is introduced.
struct StepOperator<'a> {
    tau: f64,
    coupling: &'a Polytope,
    x_box: &'a BoxSet,
    mdom: &'a MultiplierDomain,
    mode: ProjectionMode,
    /// Piece list reused across iterations when the candidate set does not
    /// depend on the query point.
    cached_pieces: Option<Vec<crate::multipliers::Piece>>,
}

impl<'a> StepOperator<'a> {
    fn new(
        tau: f64,
        coupling: &'a Polytope,
        x_box: &'a BoxSet,
        mdom: &'a MultiplierDomain,
        mode: ProjectionMode,
    ) -> Self {
        let exhaustive = matches!(mode, ProjectionMode::Exhaustive)
            || mdom.dim <= crate::multipliers::EXHAUSTIVE_DIM_LIMIT;
        Self {
            tau,
            coupling,
            x_box,
            mdom,
            mode,
            cached_pieces: exhaustive.then(|| mdom.pieces()),
        }
    }

    /// Applies one update at `(x, μ)` with the map values `t_x`, `t_mu`.
    fn advance(
        &self,
        x: &DVector<f64>,
        mu: &DVector<f64>,
        t_x: &DVector<f64>,
        t_mu: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let tau = self.tau;
        let x_next = self.x_box.clamp(&(x - tau * t_x));
        let m = self.coupling.num_rows();
        if m == 0 {
            return Ok((x_next, DVector::zeros(0)));
        }
        let a = self.coupling.rows();
        // −T_μ = Ax − b + Q(μ,M)𝛒; the reflected primal enters through
        // 2A(x⁺ − x).
        let arg_mu = mu - tau * t_mu + 2.0 * tau * (a * (&x_next - x));
        // Reference point y − D⁻¹T(y) for the piece selection.
        let u_x = x - tau * t_x;
        let u_mu = mu - tau * t_mu - 2.0 * tau * tau * (a * t_x);
        let pruned;
        let candidates: &[crate::multipliers::Piece] = match &self.cached_pieces {
            Some(pieces) => pieces,
            None => {
                pruned = self.mdom.candidate_pieces(&arg_mu, self.mode);
                &pruned
            }
        };
        if candidates.is_empty() {
            return Err(Error::NoFeasiblePiece);
        }
        let dx = &x_next - &u_x;
        let a_dx = a * &dx;
        let mut cand = DVector::<f64>::zeros(m);
        let mut best_mu = DVector::<f64>::zeros(m);
        let mut best_obj = f64::INFINITY;
        for piece in candidates {
            self.mdom.project_piece_into(piece, &arg_mu, &mut cand);
            let mut obj = 0.0;
            for i in 0..m {
                let dmu = cand[i] - u_mu[i];
                obj += dmu * dmu / tau - 2.0 * dmu * a_dx[i];
            }
            if obj < best_obj {
                best_obj = obj;
                best_mu.copy_from(&cand);
            }
        }
        Ok((x_next, best_mu))
    }
}

fn resolve_tau(
    map: &ViMap,
    x_box: &BoxSet,
    coupling: &Polytope,
    config: &SolverConfig,
    norm_a: f64,
    c: f64,
) -> Result<(f64, Option<RBarEstimate>)> {
    match config.tau {
        TauMode::Explicit(t) => Ok((t, None)),
        TauMode::FromBounds => {
            let m = coupling.num_rows();
            if m == 0 || norm_a < 1e-14 {
                if map.alpha > 0.0 {
                    // Classical forward-backward step for a strongly
                    // monotone map without coupling rows.
                    return Ok((TAU_SAFETY * map.alpha / map.lipschitz.powi(2), None));
                }
                return Err(Error::DegenerateInput(
                    "no coupling rows and no strong monotonicity; pick tau explicitly".into(),
                ));
            }
            if map.alpha <= 0.0 {
                return Err(Error::DegenerateInput(
                    "map is not strongly monotone; the step bound needs an explicit tau".into(),
                ));
            }
            let lemma = tau_bound_lemma3(map.lipschitz, map.alpha, norm_a, config.rho, config.zeta)?;
            let r_bar = estimate_r_bar(map, x_box, coupling, config.cap)?;
            let c_bar = c * config.rho * ((m - config.m_budget.min(m)) as f64).sqrt();
            let jump = tau_bound_thm2(r_bar.value, c_bar, config.zeta)?;
            let tau = TAU_SAFETY * lemma.min(jump).min(SPECTRAL_GUARD / norm_a);
            Ok((tau, Some(r_bar)))
        }
    }
}

fn check_tightened_combinations(
    x_box: &BoxSet,
    coupling: &Polytope,
    m_budget: usize,
    amount: f64,
) -> Result<()> {
    use itertools::Itertools;
    let m = coupling.num_rows();
    if m == 0 {
        return Ok(());
    }
    let combos = (0..m).combinations(m_budget);
    let box_poly = x_box.to_polytope();
    let mut checked = 0usize;
    for untightened in combos {
        checked += 1;
        if checked > 5000 {
            log::warn!("skipping remaining tightened-combination probes after 5000");
            break;
        }
        let t = DVector::from_fn(m, |i, _| {
            if untightened.contains(&i) {
                0.0
            } else {
                amount
            }
        });
        let tightened = Polytope::from_rows(
            coupling.rows().clone(),
            coupling.rhs() - &t,
        )?;
        let stacked = box_poly.stack(&tightened)?;
        if !stacked.is_feasible()? {
            return Err(Error::EmptyAfterTightening { untightened });
        }
    }
    Ok(())
}

/// Runs the fixed-point iteration from `y0` (default: box midpoint and zero
/// multipliers) until the step norm falls below `ξ` or `max_iter` is hit.
///
/// Returns `converged = false` on iteration exhaustion rather than an error;
/// the best iterate is still reported.
pub fn run(
    map: &ViMap,
    x_box: &BoxSet,
    coupling: &Polytope,
    config: &SolverConfig,
    y0: Option<IterateState>,
) -> Result<SolveResult> {
    config.validate()?;
    let dim = map.decision_len();
    if x_box.dim() != dim {
        return Err(Error::DimensionMismatch {
            what: "box dimension",
            expected: dim,
            got: x_box.dim(),
        });
    }
    if coupling.num_rows() > 0 && coupling.dim() != dim {
        return Err(Error::DimensionMismatch {
            what: "coupling dimension",
            expected: dim,
            got: coupling.dim(),
        });
    }
    if !coupling.is_row_normalized() {
        return Err(Error::Internal("coupling rows must be normalized".into()));
    }
    let m = coupling.num_rows();
    let m_budget = if config.m_budget > m {
        log::warn!(
            "facet budget {} clamped to the {} coupling rows",
            config.m_budget,
            m
        );
        m
    } else {
        config.m_budget
    };
    let c = config.circumscription_factor(dim);
    let norm_a = spectral_norm(coupling.rows());
    let (tau, r_bar) = resolve_tau(map, x_box, coupling, config, norm_a, c)?;
    if !(tau > 0.0) || tau * norm_a >= 1.0 {
        return Err(Error::NotPositiveDefinite {
            tau,
            norm_a,
            product: tau * norm_a,
        });
    }
    if config.check_tightened_combos && m > 0 && c * config.rho > 0.0 {
        check_tightened_combinations(x_box, coupling, m_budget, c * config.rho)?;
    }
    let mdom = MultiplierDomain::new(m, config.zeta, config.cap)?;
    let stepper = StepOperator::new(tau, coupling, x_box, &mdom, config.projection);

    let (mut x, mut mu) = match y0 {
        Some(state) => {
            if state.x.len() != dim || state.mu.len() != m {
                return Err(Error::DimensionMismatch {
                    what: "initial iterate",
                    expected: dim + m,
                    got: state.x.len() + state.mu.len(),
                });
            }
            let x = x_box.clamp(&state.x);
            let mu = if m > 0 {
                mdom.project(&state.mu, config.projection)?.0
            } else {
                DVector::zeros(0)
            };
            (x, mu)
        }
        None => (x_box.midpoint(), DVector::zeros(m)),
    };

    let advance = |x: &DVector<f64>,
                   mu: &DVector<f64>|
     -> Result<(DVector<f64>, DVector<f64>)> {
        let (t_x, t_mu) = t_eval(map, coupling, x, mu, m_budget, c, config.rho)?;
        stepper.advance(x, mu, &t_x, &t_mu)
    };

    let mut trace: Option<Vec<TraceRow>> = config.record_trace.then(Vec::new);
    if let Some(t) = trace.as_mut() {
        t.push(TraceRow {
            kappa: 0,
            x: x.clone(),
            mu: mu.clone(),
            step_norm: f64::NAN,
            mask: tightening_mask(&mu, m_budget)?,
        });
    }

    let mut converged = false;
    let mut residual = f64::INFINITY;
    let mut kappa = 0usize;
    while kappa < config.max_iter {
        let (x_next, mu_next) = advance(&x, &mu)?;
        let step = ((&x_next - &x).norm_squared() + (&mu_next - &mu).norm_squared()).sqrt();
        if !step.is_finite() {
            return Err(Error::NonFiniteOutput {
                what: "iteration step",
            });
        }
        if !x_box.contains(&x_next, ITERATE_MEMBERSHIP_TOL)
            || (m > 0 && !mdom.contains(&mu_next, ITERATE_MEMBERSHIP_TOL))
        {
            return Err(Error::Internal(
                "projected iterate left X × M beyond tolerance".into(),
            ));
        }
        x = x_next;
        mu = mu_next;
        kappa += 1;
        residual = step;
        if let Some(t) = trace.as_mut() {
            t.push(TraceRow {
                kappa,
                x: x.clone(),
                mu: mu.clone(),
                step_norm: step,
                mask: tightening_mask(&mu, m_budget)?,
            });
        }
        if step <= config.xi {
            converged = true;
            break;
        }
    }

    // Fixed-point certificate at the final iterate.
    let (px, pmu) = advance(&x, &mu)?;
    let fixed_point_residual =
        ((&px - &x).norm_squared() + (&pmu - &mu).norm_squared()).sqrt();

    let tightened_mask = tightening_mask(&mu, m_budget)?;
    let region = Region::new(
        x_box.to_polytope().stack(coupling)?,
        NormBall::new(x.clone(), config.rho, config.ball_norm)?,
    )?;
    if !converged {
        log::warn!("iteration cap {} reached with step {residual:e}", config.max_iter);
    }
    for (i, &v) in mu.iter().enumerate() {
        if v >= 0.99 * config.cap {
            log::warn!("multiplier {i} is within 1% of the cap {}", config.cap);
        }
    }
    Ok(SolveResult {
        state: IterateState { x, mu, kappa },
        region,
        tightened_mask,
        residual,
        fixed_point_residual,
        iterations: kappa,
        converged,
        tau_used: tau,
        c_factor: c,
        norm_a,
        trace,
        r_bar,
    })
}

/// Complementarity diagnostics at a solve result.
#[derive(Debug, Clone)]
pub struct KktReport {
    /// Worst |residual| of (tightened) rows with multiplier ≥ ζ.
    pub max_active_residual: f64,
    /// Worst positive violation of (tightened) rows with zero multiplier.
    pub max_inactive_violation: f64,
    /// Whether some consecutive sorted nonzero multipliers sit at the ζ gap,
    /// i.e. the ℳ-geometry (not complementarity) pins them.
    pub gap_binding: bool,
}

/// Checks approximate complementarity of `result` against the tightened rows.
pub fn check_kkt(
    coupling: &Polytope,
    config: &SolverConfig,
    result: &SolveResult,
) -> Result<KktReport> {
    let m = coupling.num_rows();
    let mu = &result.state.mu;
    let x = &result.state.x;
    let c = result.c_factor;
    let mut max_active = 0.0f64;
    let mut max_inactive = 0.0f64;
    if m > 0 {
        let resid = coupling.rows() * x - coupling.rhs();
        for l in 0..m {
            let shift = if result.tightened_mask[l] {
                c * config.rho
            } else {
                0.0
            };
            let r = resid[l] + shift;
            if mu[l] >= config.zeta - ITERATE_MEMBERSHIP_TOL {
                max_active = max_active.max(r.abs());
            } else {
                max_inactive = max_inactive.max(r);
            }
        }
    }
    let mut sorted: Vec<f64> = mu.iter().cloned().filter(|v| *v > config.zeta / 2.0).collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let gap_binding = sorted
        .windows(2)
        .any(|w| (w[0] - w[1] - config.zeta).abs() <= 1e-6 * (1.0 + config.zeta));
    Ok(KktReport {
        max_active_residual: max_active,
        max_inactive_violation: max_inactive,
        gap_binding,
    })
}

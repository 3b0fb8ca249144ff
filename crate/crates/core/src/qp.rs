//! Small dense strictly convex quadratic programs
//! `min ½ xᵀH x + gᵀx  s.t.  G x ≤ h`, solved by an infeasible-start
//! primal-dual interior point iteration.
//!
//! The problems this crate generates have a handful of variables; the
//! reduced Newton system is formed densely and factored from scratch each
//! step. Degenerate or near-parallel rows pose no combinatorial trouble on
//! this path.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

// Degenerate cases (weakly active constraints) converge slowly but each
// iteration is a tiny dense solve.
const MAX_ITER: usize = 2000;
const GAP_TOL: f64 = 1e-12;
const RESID_TOL: f64 = 1e-10;

/// Minimizes `½ xᵀH x + gᵀx` over `{x : G x ≤ h}` starting near `x0`.
pub fn minimize(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    g_ineq: &DMatrix<f64>,
    h_ineq: &DVector<f64>,
    x0: DVector<f64>,
) -> Result<DVector<f64>> {
    let n = h.nrows();
    let m = g_ineq.nrows();
    if h.ncols() != n || g.len() != n || g_ineq.ncols() != n || h_ineq.len() != m {
        return Err(Error::DimensionMismatch {
            what: "qp blocks",
            expected: n,
            got: g_ineq.ncols(),
        });
    }
    if m == 0 {
        return h
            .clone()
            .full_piv_lu()
            .solve(&(-g))
            .ok_or_else(|| Error::Internal("singular unconstrained qp".into()));
    }

    let scale = 1.0 + g.amax().max(h_ineq.amax());
    let mut x = x0;
    let mut s = DVector::<f64>::from_fn(m, |i, _| {
        (h_ineq[i] - g_ineq.row(i).dot(&x.transpose())).max(1.0)
    });
    let mut lambda = DVector::<f64>::from_element(m, 1.0);

    for _ in 0..MAX_ITER {
        let r_dual = h * &x + g + g_ineq.transpose() * &lambda;
        let r_primal = g_ineq * &x + &s - h_ineq;
        let mu = s.dot(&lambda) / m as f64;
        if r_dual.amax() <= RESID_TOL * scale
            && r_primal.amax() <= RESID_TOL * scale
            && mu <= GAP_TOL * scale
        {
            return Ok(x);
        }
        let sigma = 0.1;
        // Reduced system: (H + Gᵀ diag(λ/s) G) dx = −r_d − Gᵀ((rc + Λ r_p)/s)
        // with rc = σμ1 − s∘λ.
        let mut reduced = h.clone();
        for i in 0..m {
            let w = lambda[i] / s[i];
            for r in 0..n {
                for c in 0..n {
                    reduced[(r, c)] += w * g_ineq[(i, r)] * g_ineq[(i, c)];
                }
            }
        }
        let rc = DVector::<f64>::from_fn(m, |i, _| sigma * mu - s[i] * lambda[i]);
        let aux = DVector::<f64>::from_fn(m, |i, _| (rc[i] + lambda[i] * r_primal[i]) / s[i]);
        let rhs = -&r_dual - g_ineq.transpose() * &aux;
        let Some(dx) = reduced.full_piv_lu().solve(&rhs) else {
            return Err(Error::Internal("singular reduced qp system".into()));
        };
        let ds = -&r_primal - g_ineq * &dx;
        let dlambda = DVector::<f64>::from_fn(m, |i, _| (rc[i] - lambda[i] * ds[i]) / s[i]);
        // Fraction-to-boundary step keeping s, λ strictly positive.
        let mut alpha = 1.0f64;
        for i in 0..m {
            if ds[i] < 0.0 {
                alpha = alpha.min(-0.995 * s[i] / ds[i]);
            }
            if dlambda[i] < 0.0 {
                alpha = alpha.min(-0.995 * lambda[i] / dlambda[i]);
            }
        }
        x += alpha * &dx;
        s += alpha * &ds;
        lambda += alpha * &dlambda;
    }
    Err(Error::Internal(
        "qp interior point iteration cap exceeded".into(),
    ))
}

/// Maximizes `dᵀx` over `{x : G x ≤ h, ‖x − center‖₂ ≤ radius}` by a
/// primal-dual interior point iteration with one quadratic constraint.
///
/// `x0` should be a point of the polytope near the ball (any feasible point
/// works; infeasibility in the ball constraint is absorbed by the start).
pub fn maximize_over_ball_intersection(
    d: &DVector<f64>,
    g_ineq: &DMatrix<f64>,
    h_ineq: &DVector<f64>,
    center: &DVector<f64>,
    radius: f64,
    x0: DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let n = d.len();
    let m = g_ineq.nrows();
    let scale = 1.0 + d.amax().max(h_ineq.amax()).max(radius * radius);
    let mut x = x0;
    let mut s = DVector::<f64>::from_fn(m, |i, _| {
        (h_ineq[i] - g_ineq.row(i).dot(&x.transpose())).max(0.1 * (1.0 + h_ineq[i].abs()))
    });
    let mut lambda = DVector::<f64>::from_element(m, 1.0);
    let r2 = radius * radius;
    let mut sigma = (r2 - (&x - center).norm_squared()).max(0.1 * r2);
    let mut nu = 1.0f64;
    // Fallback iterate for degenerate faces where the strict tolerance is
    // out of reach: the best duality-certified point seen.
    let mut best: Option<(f64, DVector<f64>)> = None;

    for _ in 0..MAX_ITER {
        let xc = &x - center;
        let r_dual = -d + g_ineq.transpose() * &lambda + 2.0 * nu * &xc;
        let r_primal = g_ineq * &x + &s - h_ineq;
        let r_ball = xc.norm_squared() + sigma - r2;
        let gap = (s.dot(&lambda) + sigma * nu) / (m as f64 + 1.0);
        if !gap.is_finite() || !r_dual.amax().is_finite() {
            break;
        }
        if r_dual.amax() <= RESID_TOL * scale
            && r_primal.amax() <= RESID_TOL * scale
            && r_ball.abs() <= RESID_TOL * scale
            && gap <= GAP_TOL * scale
        {
            return Ok((x.clone(), d.dot(&x)));
        }
        let quality = (r_dual.amax() / 1e-6)
            .max(r_primal.amax() / 1e-9)
            .max(r_ball.abs() / 1e-9)
            .max(gap / 1e-9)
            / scale;
        if best.as_ref().is_none_or(|(q, _)| quality < *q) {
            best = Some((quality, x.clone()));
        }
        let t = 0.1 * gap;
        // Reduced system over dx, with a relative ridge so that a
        // rank-deficient weight pattern (degenerate optimal face) keeps the
        // Newton solve well posed.
        let mut reduced = DMatrix::<f64>::identity(n, n) * (2.0 * nu);
        for i in 0..m {
            let w = lambda[i] / s[i];
            for r in 0..n {
                for c in 0..n {
                    reduced[(r, c)] += w * g_ineq[(i, r)] * g_ineq[(i, c)];
                }
            }
        }
        let w_ball = 4.0 * nu / sigma;
        for r in 0..n {
            for c in 0..n {
                reduced[(r, c)] += w_ball * xc[r] * xc[c];
            }
        }
        let ridge = 1e-12 * (1.0 + reduced.amax());
        for r in 0..n {
            reduced[(r, r)] += ridge;
        }
        let aux = DVector::<f64>::from_fn(m, |i, _| {
            (t - s[i] * lambda[i] + lambda[i] * r_primal[i]) / s[i]
        });
        let ball_aux = (t - sigma * nu + nu * r_ball) / sigma;
        let rhs = -&r_dual - g_ineq.transpose() * &aux - 2.0 * ball_aux * &xc;
        let Some(dx) = reduced.full_piv_lu().solve(&rhs) else {
            return Err(Error::Internal("singular reduced qcqp system".into()));
        };
        let ds = -&r_primal - g_ineq * &dx;
        let dsigma = -r_ball - 2.0 * xc.dot(&dx);
        let dlambda =
            DVector::<f64>::from_fn(m, |i, _| (t - s[i] * lambda[i] - lambda[i] * ds[i]) / s[i]);
        let dnu = (t - sigma * nu - nu * dsigma) / sigma;
        let mut alpha = 1.0f64;
        for i in 0..m {
            if ds[i] < 0.0 {
                alpha = alpha.min(-0.995 * s[i] / ds[i]);
            }
            if dlambda[i] < 0.0 {
                alpha = alpha.min(-0.995 * lambda[i] / dlambda[i]);
            }
        }
        if dsigma < 0.0 {
            alpha = alpha.min(-0.995 * sigma / dsigma);
        }
        if dnu < 0.0 {
            alpha = alpha.min(-0.995 * nu / dnu);
        }
        // Keep the complementarity products in an N_∞ neighborhood of the
        // central path; unbalanced products otherwise send the ball
        // multiplier into a runaway.
        const GAMMA: f64 = 1e-3;
        for _ in 0..60 {
            let mut min_p = f64::INFINITY;
            let mut sum_p = 0.0;
            for i in 0..m {
                let p = (s[i] + alpha * ds[i]) * (lambda[i] + alpha * dlambda[i]);
                min_p = min_p.min(p);
                sum_p += p;
            }
            let pb = (sigma + alpha * dsigma) * (nu + alpha * dnu);
            min_p = min_p.min(pb);
            sum_p += pb;
            let mean = sum_p / (m as f64 + 1.0);
            if min_p >= GAMMA * mean || alpha < 1e-10 {
                break;
            }
            alpha *= 0.7;
        }
        x += alpha * &dx;
        s += alpha * &ds;
        lambda += alpha * &dlambda;
        sigma += alpha * dsigma;
        nu += alpha * dnu;
    }
    match best {
        Some((quality, x)) if quality <= 1.0 => Ok((x.clone(), d.dot(&x))),
        _ => Err(Error::Internal(
            "qcqp interior point iteration did not certify".into(),
        )),
    }
}

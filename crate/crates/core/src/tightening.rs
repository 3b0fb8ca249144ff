//! Multiplier-driven constraint tightening: ranking the multipliers, picking
//! the `M` rows allowed to stay untightened, and shifting every other row
//! inward by the circumscribed-sphere distance `cρ`.
//!
//! The hot path works with orders and masks; the permutation and selection
//! matrices are materialized only for assertions against their displayed
//! block forms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::Polytope;

/// Indices of the entries of `mu` in decreasing order; ties broken by
/// ascending original index.
///
/// Position `r` of the result holds the original index of the `r`-th largest
/// multiplier, so indexing `mu` by the result yields a nonincreasing vector.
pub fn permutation_of(mu: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mu.len()).collect();
    order.sort_by(|&i, &j| {
        mu[j]
            .partial_cmp(&mu[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// The permutation matrix `P` with `(P μ)_r = μ_{order[r]}`.
pub fn permutation_matrix(order: &[usize]) -> DMatrix<f64> {
    let m = order.len();
    let mut p = DMatrix::<f64>::zeros(m, m);
    for (r, &c) in order.iter().enumerate() {
        p[(r, c)] = 1.0;
    }
    p
}

/// Selection matrix `R(M) = [0_{m×M} | (0_{M×(m−M)}; I_{m−M})]`: applied to a
/// sorted vector it zeroes the `M` leading entries and keeps the rest.
pub fn selection_matrix(m_budget: usize, m: usize) -> Result<DMatrix<f64>> {
    if m_budget > m {
        return Err(Error::OutOfRange(format!(
            "facet budget {m_budget} exceeds row count {m}"
        )));
    }
    let mut r = DMatrix::<f64>::zeros(m, m);
    for i in m_budget..m {
        r[(i, i)] = 1.0;
    }
    Ok(r)
}

/// Per-row tightening flags: `true` for tightened rows, `false` for the rows
/// holding the `M` largest multipliers (stable ties).
pub fn tightening_mask(mu: &DVector<f64>, m_budget: usize) -> Result<Vec<bool>> {
    let m = mu.len();
    if m_budget > m {
        return Err(Error::OutOfRange(format!(
            "facet budget {m_budget} exceeds row count {m}"
        )));
    }
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteOutput {
            what: "multiplier vector",
        });
    }
    let order = permutation_of(mu);
    let mut mask = vec![true; m];
    for &idx in order.iter().take(m_budget) {
        mask[idx] = false;
    }
    Ok(mask)
}

/// The vector `Q(μ, M) 𝛒 = Pᵀ(μ) R(M) 𝛒` with `𝛒 = cρ 𝟏`.
///
/// Component `ℓ` is zero iff row `ℓ` carries one of the `M` largest
/// multipliers, and `cρ` otherwise.
pub fn tightening_vector(
    mu: &DVector<f64>,
    m_budget: usize,
    c: f64,
    rho: f64,
) -> Result<DVector<f64>> {
    if !(rho > 0.0) || !(c > 0.0) {
        return Err(Error::OutOfRange(format!(
            "tightening scale cρ with c={c}, rho={rho}"
        )));
    }
    let mask = tightening_mask(mu, m_budget)?;
    Ok(DVector::from_fn(
        mu.len(),
        |i, _| if mask[i] { c * rho } else { 0.0 },
    ))
}

/// Shifts the polytope rows inward by the tightening vector `t`, whose
/// entries must be `0` or a common positive amount.
pub fn apply_tightening(p: &Polytope, t: &DVector<f64>) -> Result<Polytope> {
    let mut amount = None;
    for v in t.iter() {
        if *v == 0.0 {
            continue;
        }
        if !(*v > 0.0) {
            return Err(Error::OutOfRange(format!("tightening entry {v}")));
        }
        match amount {
            None => amount = Some(*v),
            Some(a) if (a - *v).abs() <= 1e-12 * a.max(1.0) => {}
            Some(a) => {
                return Err(Error::OutOfRange(format!(
                    "mixed tightening amounts {a} and {v}"
                )))
            }
        }
    }
    p.tightened(t)
}

/// A resolved tightening decision for one multiplier vector.
#[derive(Debug, Clone)]
pub struct TighteningPlan {
    pub m: usize,
    pub m_budget: usize,
    pub c: f64,
    pub rho: f64,
    /// Original row index of the r-th largest multiplier.
    pub order: Vec<usize>,
    /// `true` for tightened rows.
    pub mask: Vec<bool>,
}

impl TighteningPlan {
    pub fn new(mu: &DVector<f64>, m_budget: usize, c: f64, rho: f64) -> Result<Self> {
        let mask = tightening_mask(mu, m_budget)?;
        Ok(Self {
            m: mu.len(),
            m_budget: m_budget.min(mu.len()),
            c,
            rho,
            order: permutation_of(mu),
            mask,
        })
    }

    pub fn vector(&self) -> DVector<f64> {
        DVector::from_fn(
            self.m,
            |i, _| if self.mask[i] { self.c * self.rho } else { 0.0 },
        )
    }

    pub fn untightened_rows(&self) -> Vec<usize> {
        (0..self.m).filter(|&i| !self.mask[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn worked_three_row_example() {
        // μ₂ > μ₁ > μ₃ with M = 1.
        let mu = DVector::from_vec(vec![2.0, 3.0, 1.0]);
        let order = permutation_of(&mu);
        assert_eq!(order, vec![1, 0, 2]);
        let p = permutation_matrix(&order);
        let expected_p = DMatrix::from_row_slice(3, 3, &[
            0.0, 1.0, 0.0, //
            1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0,
        ]);
        assert_eq!(p, expected_p);
        let r = selection_matrix(1, 3).unwrap();
        let expected_r = DMatrix::from_row_slice(3, 3, &[
            0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0,
        ]);
        assert_eq!(r, expected_r);
        let c = 0.7;
        let rho = 1.3;
        let t = tightening_vector(&mu, 1, c, rho).unwrap();
        assert_relative_eq!(t[0], c * rho);
        assert_relative_eq!(t[1], 0.0);
        assert_relative_eq!(t[2], c * rho);
        // Matrix route agrees: Pᵀ R 𝛒.
        let rho_vec = DVector::from_element(3, c * rho);
        let via_matrices = p.transpose() * &r * &rho_vec;
        assert_relative_eq!((t - via_matrices).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn sorted_input_gives_identity_permutation() {
        let mu = DVector::from_vec(vec![3.0, 2.0, 1.0]);
        assert_eq!(permutation_of(&mu), vec![0, 1, 2]);
        assert_eq!(
            permutation_matrix(&permutation_of(&mu)),
            DMatrix::identity(3, 3)
        );
    }

    #[test]
    fn selection_matrix_edge_budgets() {
        // M = 0 keeps everything: R(0) = I.
        assert_eq!(selection_matrix(0, 3).unwrap(), DMatrix::identity(3, 3));
        // M = m zeroes everything.
        assert_eq!(selection_matrix(3, 3).unwrap(), DMatrix::zeros(3, 3));
        assert!(selection_matrix(4, 3).is_err());
    }

    #[test]
    fn budget_extremes_for_tightening_vector() {
        let mu = DVector::from_vec(vec![0.3, 0.9, 0.1, 0.5]);
        let all = tightening_vector(&mu, 0, 1.0, 0.2).unwrap();
        assert!(all.iter().all(|&v| v == 0.2));
        let none = tightening_vector(&mu, 4, 1.0, 0.2).unwrap();
        assert!(none.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stable_tie_break_prefers_lower_index() {
        let mu = DVector::from_vec(vec![1.0, 1.0, 0.5]);
        assert_eq!(permutation_of(&mu), vec![0, 1, 2]);
        let mask = tightening_mask(&mu, 1).unwrap();
        assert_eq!(mask, vec![false, true, true]);
    }

    #[test]
    fn identity_rmp_equals_rp() {
        // R(M) P(μ) 𝛒 = R(M) 𝛒 because all components of 𝛒 are equal.
        let mut rng_state = 88u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for m_budget in 0..=4 {
            let mu = DVector::from_fn(4, |_, _| next() * 5.0);
            let p = permutation_matrix(&permutation_of(&mu));
            let r = selection_matrix(m_budget, 4).unwrap();
            let rho_vec = DVector::from_element(4, 0.7);
            let lhs = &r * &p * &rho_vec;
            let rhs = &r * &rho_vec;
            assert_relative_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn near_tie_perturbations_keep_the_mask() {
        // Values separated by more than the perturbation scale produce the
        // same mask after sub-tolerance noise.
        let base = DVector::from_vec(vec![0.9, 0.3, 0.6, 0.0]);
        let mask = tightening_mask(&base, 2).unwrap();
        for k in 0..10 {
            let eps = 1e-13 * k as f64;
            let perturbed = DVector::from_vec(vec![0.9 + eps, 0.3 - eps, 0.6 + eps, 0.0]);
            assert_eq!(tightening_mask(&perturbed, 2).unwrap(), mask);
        }
    }

    proptest! {
        #[test]
        fn permutation_sorts_decreasing(values in proptest::collection::vec(-1e6f64..1e6, 1..12)) {
            let mu = DVector::from_vec(values);
            let order = permutation_of(&mu);
            let mut seen = vec![false; mu.len()];
            for &i in &order {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
            for w in order.windows(2) {
                prop_assert!(mu[w[0]] >= mu[w[1]]);
            }
        }

        #[test]
        fn tightening_vector_counts(
            values in proptest::collection::vec(0.0f64..10.0, 1..10),
            budget_frac in 0.0f64..=1.0,
        ) {
            let mu = DVector::from_vec(values);
            let m = mu.len();
            let m_budget = ((m as f64) * budget_frac).floor() as usize;
            let t = tightening_vector(&mu, m_budget.min(m), 1.0, 0.5).unwrap();
            let tightened = t.iter().filter(|&&v| v == 0.5).count();
            let kept = t.iter().filter(|&&v| v == 0.0).count();
            prop_assert_eq!(tightened + kept, m);
            prop_assert_eq!(kept, m_budget.min(m));
        }
    }
}

//! Probabilistic feasibility certificates: binomial-tail confidence bounds,
//! their bisection inverses, the equal-split a posteriori violation level,
//! support-sample counting by leave-one-out reruns, and Monte Carlo
//! estimation of the violation probability of a region.
//!
//! The a posteriori level follows the equal-split convention
//! `ε(k) = 1 − ((β/K) / C(K,k))^{1/(K−k)}`, which makes every term of the
//! defining sum equal to `β/K`; the boundary case `ε(K) = 1` is kept as
//! printed. All certificates are distribution-free.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::Region;
use crate::scenario::{draw_multisample_with_seed, Domain, RowOrigin, SampleSet, UncertaintyModel};

/// Leave-one-out movement beyond this distance marks a draw as a support
/// sample.
pub const SUPPORT_MOVE_TOL: f64 = 1e-6;
/// Maximum deviation of the baseline rerun from the reference equilibrium.
pub const BASELINE_REPRODUCTION_TOL: f64 = 1e-9;

/// `Σ_{i=0}^{d−1} C(K,i) εⁱ(1−ε)^{K−i}`, evaluated in log space with
/// compensated summation.
pub fn binom_tail(d: usize, k_samples: usize, eps: f64) -> Result<f64> {
    if d > k_samples {
        return Err(Error::OutOfRange(format!(
            "dimension bound {d} exceeds sample count {k_samples}"
        )));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::OutOfRange(format!("violation level {eps}")));
    }
    if d == 0 {
        return Ok(0.0);
    }
    if eps == 0.0 {
        return Ok(1.0);
    }
    if eps == 1.0 {
        // Every term below i = K carries a factor (1−ε)^{K−i} = 0.
        return Ok(if d > k_samples { 1.0 } else { 0.0 });
    }
    let ln_eps = eps.ln();
    let ln_one_minus = (-eps).ln_1p();
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..d {
        let ln_term = ln_binomial(k_samples as u64, i as u64)
            + i as f64 * ln_eps
            + (k_samples - i) as f64 * ln_one_minus;
        let term = ln_term.exp();
        let y = term - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    Ok(sum.clamp(0.0, 1.0))
}

/// Which support-rank bound feeds the a priori certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportRankRule {
    /// `d = nN + M`: the decision dimension plus the facet budget.
    General,
    /// `d = n + M − 1` when every coupling constraint acts on the aggregate.
    Aggregate,
}

impl SupportRankRule {
    /// The dimension bound fed into the binomial tail.
    pub fn dimension_bound(&self, dim: usize, m_budget: usize) -> Result<usize> {
        let d = match self {
            SupportRankRule::General => dim + m_budget,
            SupportRankRule::Aggregate => (dim + m_budget).checked_sub(1).unwrap_or(0),
        };
        if d == 0 {
            return Err(Error::OutOfRange(
                "dimension bound must be at least 1".into(),
            ));
        }
        Ok(d)
    }
}

/// Confidence `1 − Σ_{i=0}^{d−1} C(K,i) ε̄ⁱ(1−ε̄)^{K−i}` that the violation
/// of the returned region stays below `eps_bar`.
///
/// Returns 0 with a warning when the dimension bound exceeds `K` (the bound
/// is vacuous).
pub fn apriori_confidence(
    dim: usize,
    m_budget: usize,
    rule: SupportRankRule,
    k_samples: usize,
    eps_bar: f64,
) -> Result<f64> {
    let d = rule.dimension_bound(dim, m_budget)?;
    if !(0.0..=1.0).contains(&eps_bar) {
        return Err(Error::OutOfRange(format!("violation level {eps_bar}")));
    }
    if d > k_samples {
        log::warn!(
            "dimension bound {d} exceeds the sample count {k_samples}; the certificate is vacuous"
        );
        return Ok(0.0);
    }
    Ok(1.0 - binom_tail(d, k_samples, eps_bar)?)
}

/// Smallest `ε̄` whose binomial tail is at most `beta`, by bisection to
/// absolute tolerance 1e−12.
pub fn eps_required(d: usize, k_samples: usize, beta: f64) -> Result<f64> {
    if !(0.0 < beta && beta < 1.0) {
        return Err(Error::OutOfRange(format!("confidence parameter {beta}")));
    }
    if d == 0 || d > k_samples {
        return Err(Error::OutOfRange(format!(
            "dimension bound {d} outside 1..={k_samples}"
        )));
    }
    if d == k_samples {
        log::warn!("dimension bound equals the sample count; the required level is near 1");
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if binom_tail(d, k_samples, mid)? <= beta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Equal-split a posteriori violation level
/// `ε(k) = 1 − ((β/K)/C(K,k))^{1/(K−k)}`, with `ε(K) = 1`.
pub fn eps_aposteriori(k_support: usize, k_samples: usize, beta: f64) -> Result<f64> {
    if !(0.0 < beta && beta < 1.0) {
        return Err(Error::OutOfRange(format!("confidence parameter {beta}")));
    }
    if k_support > k_samples || k_samples == 0 {
        return Err(Error::OutOfRange(format!(
            "support count {k_support} outside 0..={k_samples}"
        )));
    }
    if k_support == k_samples {
        return Ok(1.0);
    }
    let ln_ratio = (beta / k_samples as f64).ln() - ln_binomial(k_samples as u64, k_support as u64);
    let eps = 1.0 - (ln_ratio / (k_samples - k_support) as f64).exp();
    Ok(eps.clamp(0.0, 1.0))
}

/// Certificate provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertificateKind {
    APriori,
    APosteriori,
}

/// An ε/confidence pair with the arithmetic behind it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub kind: CertificateKind,
    /// Violation level ε (a priori: prescribed ε̄; a posteriori: ε(s*+M)).
    pub epsilon: f64,
    /// A priori: the confidence `1 − Σ…`; a posteriori: the prescribed β.
    pub beta_or_confidence: f64,
    pub k_samples: usize,
    /// Support samples of the equilibrium, when counted.
    pub support_count: Option<usize>,
    /// Facet term: budget `M` (a priori) or observed intersecting facets.
    pub facet_term: usize,
    /// The `d` used in the binomial tail.
    pub dimension_bound: usize,
}

/// Builds the a priori certificate for a prescribed violation level.
pub fn apriori_certificate(
    dim: usize,
    m_budget: usize,
    rule: SupportRankRule,
    k_samples: usize,
    eps_bar: f64,
) -> Result<Certificate> {
    let d = rule.dimension_bound(dim, m_budget)?;
    let confidence = apriori_confidence(dim, m_budget, rule, k_samples, eps_bar)?;
    Ok(Certificate {
        kind: CertificateKind::APriori,
        epsilon: eps_bar,
        beta_or_confidence: confidence,
        k_samples,
        support_count: None,
        facet_term: m_budget,
        dimension_bound: d,
    })
}

/// Builds the a posteriori certificate `ε(s* + M_observed)` at confidence β.
pub fn aposteriori_certificate(
    support_count: usize,
    observed_facets: usize,
    k_samples: usize,
    beta: f64,
) -> Result<Certificate> {
    let d = (support_count + observed_facets).min(k_samples);
    let epsilon = eps_aposteriori(d, k_samples, beta)?;
    Ok(Certificate {
        kind: CertificateKind::APosteriori,
        epsilon,
        beta_or_confidence: beta,
        k_samples,
        support_count: Some(support_count),
        facet_term: observed_facets,
        dimension_bound: d,
    })
}

/// How a support count was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupportMethod {
    /// Exact per the definition: rerun the pipeline without each draw.
    LeaveOneOut,
    /// Fast estimate from the rows active at the equilibrium.
    ActiveRowHeuristic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportCount {
    pub count: usize,
    pub indices: Vec<usize>,
    pub method: SupportMethod,
}

/// Counts the draws whose removal moves the equilibrium by more than
/// [`SUPPORT_MOVE_TOL`], by rerunning the full pipeline `K` times
/// (embarrassingly parallel).
///
/// The pipeline must first reproduce `x_star` from the full multisample
/// within [`BASELINE_REPRODUCTION_TOL`].
pub fn count_support_of_equilibrium<F>(
    pipeline: &F,
    samples: &SampleSet,
    x_star: &DVector<f64>,
) -> Result<SupportCount>
where
    F: Fn(&SampleSet) -> Result<DVector<f64>> + Sync,
{
    let baseline = pipeline(samples)?;
    let deviation = (&baseline - x_star).norm();
    if deviation > BASELINE_REPRODUCTION_TOL {
        return Err(Error::NonReproduciblePipeline { deviation });
    }
    let moved: Vec<Result<bool>> = exec::map_range(samples.len(), |k| {
        let reduced = samples.without_draw(k);
        pipeline(&reduced).map(|x| (&x - x_star).norm() > SUPPORT_MOVE_TOL)
    });
    let mut indices = Vec::new();
    for (k, r) in moved.into_iter().enumerate() {
        if r? {
            indices.push(k);
        }
    }
    Ok(SupportCount {
        count: indices.len(),
        indices,
        method: SupportMethod::LeaveOneOut,
    })
}

/// Fast support estimate: draws owning a row active at `x_star` within
/// `tol`. Flagged as heuristic — activity is necessary but not sufficient.
pub fn estimate_support_active(
    domain: &Domain,
    x_star: &DVector<f64>,
    tol: f64,
) -> SupportCount {
    let resid = domain.polytope.rows() * x_star - domain.polytope.rhs();
    let mut indices: Vec<usize> = Vec::new();
    for (i, origin) in domain.origins.iter().enumerate() {
        if let RowOrigin::Sample { draw, .. } = origin {
            if resid[i].abs() <= tol && !indices.contains(draw) {
                indices.push(*draw);
            }
        }
    }
    indices.sort_unstable();
    SupportCount {
        count: indices.len(),
        indices,
        method: SupportMethod::ActiveRowHeuristic,
    }
}

/// Boundary margin when deciding containment failure.
const CONTAINMENT_EPS: f64 = 1e-9;

/// Monte Carlo estimate of `𝕍(region) = ℙ{δ : region ⊄ C_δ}` from
/// `n_fresh` i.i.d. draws under `seed`.
///
/// Containment per half-space is decided exactly by one support LP; for a
/// sampled half-space `aᵀx ≤ b` the region violates δ iff its support in
/// direction `a` exceeds `b`. Identical directions share one LP through a
/// bit-exact cache, so band models cost `2n` LPs regardless of `n_fresh`.
pub fn empirical_violation(
    region: &Region,
    model: &UncertaintyModel,
    n_fresh: usize,
    seed: u64,
) -> Result<f64> {
    if region.is_empty()? {
        return Err(Error::EmptyRegion);
    }
    if n_fresh == 0 {
        return Err(Error::OutOfRange("n_fresh must be positive".into()));
    }
    let sample_dim = model.sample_dim();
    if region.dim() % sample_dim != 0 {
        return Err(Error::DimensionMismatch {
            what: "region vs sample dimension",
            expected: sample_dim,
            got: region.dim(),
        });
    }
    let agents = region.dim() / sample_dim;
    let fresh = draw_multisample_with_seed(model, n_fresh, seed)?;
    let rows = fresh.decision_rows(agents);

    // Unique directions in first-occurrence order, keyed on exact bits.
    use std::collections::HashMap;
    let mut key_of: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut unique: Vec<DVector<f64>> = Vec::new();
    let mut row_dir: Vec<usize> = Vec::with_capacity(rows.len());
    for (a, _, _) in &rows {
        let key: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
        let idx = *key_of.entry(key).or_insert_with(|| {
            unique.push(a.clone());
            unique.len() - 1
        });
        row_dir.push(idx);
    }
    let supports: Vec<Result<f64>> = exec::map_collect(&unique, |dir| region.support(dir));
    let mut support_of = Vec::with_capacity(supports.len());
    for s in supports {
        support_of.push(s?);
    }

    let mut violated = vec![false; n_fresh];
    for (r, (_, b, draw)) in rows.iter().enumerate() {
        if support_of[row_dir[r]] > *b + CONTAINMENT_EPS {
            violated[*draw] = true;
        }
    }
    let count = violated.iter().filter(|&&v| v).count();
    Ok(count as f64 / n_fresh as f64)
}

//! End-to-end reproduction of the aggregative benchmark: the M-sweep with
//! potential traces and facet counts, and the statistical validation
//! campaign comparing empirical violations against the binomial-tail budget.
//!
//! Trials are independent and run concurrently over read-only plans; every
//! number carries its seed for replay.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::certificates::{
    apriori_certificate, binom_tail, empirical_violation, eps_required, Certificate,
    SupportMethod, SupportRankRule,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::game::{GameSpec, MapKind};
use crate::geometry::{facets_intersecting_ball, NormBall, DEFAULT_FACET_TOL};
use crate::multipliers::ProjectionMode;
use crate::scenario::{
    build_domain, draw_multisample_with_seed, reduce_to_aggregate, Domain, DomainOptions,
    RowOrigin, UncertaintyModel,
};
use crate::solver::{self, SolverConfig, TauMode};

/// Radius margin that turns the facet-attainment test into an open-ball
/// decision: a tightened constraint active at the equilibrium sits exactly
/// `cρ` from its facet, and the shrunk ball no longer reaches it while any
/// genuinely crossed facet still is. Must exceed the solver tolerance.
pub const FACET_MECHANISM_MARGIN: f64 = 1e-6;

/// In which space the iteration runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveSpace {
    /// Solve over `σ` (exact for Wardrop quadratic-aggregative games with
    /// band constraints; the deviation radius becomes `ρ/N`).
    Aggregate,
    /// Solve over the stacked decision vector.
    Full,
}

/// Everything one benchmark run needs.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub game: GameSpec,
    pub uncertainty: UncertaintyModel,
    pub k_samples: usize,
    /// Deviation radius in full decision space.
    pub rho: f64,
    pub zeta: f64,
    pub beta: f64,
    /// Prescribed violation level; derived from `beta` via the tail inverse
    /// when absent.
    pub eps_bar: Option<f64>,
    pub m_values: Vec<usize>,
    pub trials: usize,
    pub n_fresh: usize,
    pub base_seed: u64,
    pub solve_space: SolveSpace,
    pub rank_rule: SupportRankRule,
    pub tau: TauMode,
    pub xi: f64,
    pub max_iter: usize,
    pub cap: f64,
    pub projection: ProjectionMode,
    pub record_potential_trace: bool,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.m_values.is_empty() {
            return Err(Error::OutOfRange("empty facet-budget list".into()));
        }
        if self.trials == 0 || self.n_fresh == 0 {
            return Err(Error::OutOfRange(
                "trials and n_fresh must be positive".into(),
            ));
        }
        if !(self.rho > 0.0) || !(self.zeta > 0.0) {
            return Err(Error::OutOfRange("rho and zeta must be positive".into()));
        }
        if !(0.0 < self.beta && self.beta < 1.0) {
            return Err(Error::OutOfRange(format!("beta {}", self.beta)));
        }
        Ok(())
    }
}

/// Splitmix-style seed derivation: one deterministic stream per trial.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const FRESH_STREAM_OFFSET: u64 = 0x0BAD_5EED;

/// One successful (trial, M) record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub trial_seed: u64,
    pub fresh_seed: u64,
    pub m_budget: usize,
    pub m_rows: usize,
    pub sigma_star: Vec<f64>,
    pub potential: f64,
    /// Sampled facets the open deviation ball crosses (mechanism count).
    pub facets_strict: usize,
    /// Sampled facets attained including touches (certificate count).
    pub facets_touch: usize,
    pub s_star: usize,
    pub s_star_method: SupportMethod,
    pub certificate: Certificate,
    pub empirical_violation: f64,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub potential_trace: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub m_budget: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub k_samples: usize,
    pub rho: f64,
    pub zeta: f64,
    pub beta: f64,
    pub eps_bar: f64,
    pub m_values: Vec<usize>,
    pub trials: usize,
    pub n_fresh: usize,
    pub base_seed: u64,
    pub solve_space: SolveSpace,
    pub rank_rule: SupportRankRule,
    /// One draw of the uncertainty counts as one sample regardless of how
    /// many rows it contributes.
    pub sample_counting: &'static str,
    pub rows: Vec<TrialRow>,
    pub failures: Vec<TrialFailure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub campaign: Option<CampaignSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub eps_bar: f64,
    /// Binomial-tail budget `Σ_{i=0}^{d−1} C(K,i) ε̄ⁱ(1−ε̄)^{K−i}`.
    pub theorem_budget: f64,
    pub dimension_bound: usize,
    pub violating_fraction: f64,
    pub violating_trials: usize,
}

struct TrialSetup {
    x_box: crate::geometry::BoxSet,
    coupling: crate::geometry::Polytope,
    domain: Domain,
    map: crate::game::ViMap,
    rho_solve: f64,
    sigma_dim: usize,
}

fn prepare_trial(plan: &ExperimentPlan, trial_seed: u64) -> Result<TrialSetup> {
    let samples = draw_multisample_with_seed(&plan.uncertainty, plan.k_samples, trial_seed)?;
    match plan.solve_space {
        SolveSpace::Aggregate => {
            let reduced_game = plan.game.aggregate_game()?;
            let red = reduce_to_aggregate(
                &plan.game.lower,
                &plan.game.upper,
                &samples,
                DomainOptions::default(),
            )?;
            let (coupling, _) = red.domain.coupling();
            Ok(TrialSetup {
                x_box: red.x_box,
                coupling,
                domain: red.domain,
                map: reduced_game.vi_map()?,
                rho_solve: plan.rho / plan.game.agents as f64,
                sigma_dim: plan.game.dim,
            })
        }
        SolveSpace::Full => {
            let x_box = plan.game.stacked_box();
            let domain = build_domain(
                &x_box,
                &samples,
                plan.game.agents,
                DomainOptions::default(),
            )?;
            let (coupling, _) = domain.coupling();
            Ok(TrialSetup {
                x_box,
                coupling,
                domain,
                map: plan.game.vi_map()?,
                rho_solve: plan.rho,
                sigma_dim: plan.game.dim,
            })
        }
    }
}

fn solver_config(plan: &ExperimentPlan, rho_solve: f64, m_budget: usize) -> SolverConfig {
    SolverConfig {
        tau: plan.tau,
        rho: rho_solve,
        m_budget,
        zeta: plan.zeta,
        xi: plan.xi,
        ball_norm: crate::geometry::NormOrder::One,
        cap: plan.cap,
        max_iter: plan.max_iter,
        projection: plan.projection,
        record_trace: plan.record_potential_trace,
        check_tightened_combos: true,
    }
}

/// Active-row support estimate aware of the final tightening: a sampled row
/// counts if it is active at `x` either at its own facet or at the
/// `cρ`-shifted one.
fn tightened_active_support(domain: &Domain, x: &DVector<f64>, shift: f64, tol: f64) -> Vec<usize> {
    let resid = domain.polytope.rows() * x - domain.polytope.rhs();
    let mut draws: Vec<usize> = Vec::new();
    for (i, origin) in domain.origins.iter().enumerate() {
        if let RowOrigin::Sample { draw, .. } = origin {
            if resid[i].abs() <= tol || (resid[i] + shift).abs() <= tol {
                if !draws.contains(draw) {
                    draws.push(*draw);
                }
            }
        }
    }
    draws.sort_unstable();
    draws
}

fn run_trial_for_budget(
    plan: &ExperimentPlan,
    setup: &TrialSetup,
    trial: usize,
    trial_seed: u64,
    eps_bar: f64,
    m_requested: usize,
) -> Result<TrialRow> {
    let m_rows = setup.coupling.num_rows();
    let m_budget = m_requested.min(m_rows);
    if m_budget < m_requested {
        log::warn!("trial {trial}: facet budget {m_requested} clamped to {m_budget}");
    }
    let config = solver_config(plan, setup.rho_solve, m_budget);
    let result = solver::run(&setup.map, &setup.x_box, &setup.coupling, &config, None)?;
    let x_star = &result.state.x;
    let sigma_star = match plan.solve_space {
        SolveSpace::Aggregate => x_star.clone(),
        SolveSpace::Full => plan.game.aggregate(x_star)?,
    };
    let potential = match plan.solve_space {
        SolveSpace::Aggregate => {
            let sym_cost = |s: &DVector<f64>| -> Result<f64> {
                let crate::game::CostModel::QuadraticAggregative { c, d } = &plan.game.cost
                else {
                    return Err(Error::UnsupportedModel);
                };
                Ok((s.transpose() * c * s)[(0, 0)] + d.dot(s))
            };
            sym_cost(&sigma_star)?
        }
        SolveSpace::Full => plan.game.potential(x_star)?,
    };

    // Facet counts against the sampled rows only, both with touch-counting
    // and with open-ball semantics via the shrunk radius.
    let ball_full = NormBall::new(
        x_star.clone(),
        setup.rho_solve,
        crate::geometry::NormOrder::One,
    )?;
    let ball_shrunk = ball_full.shrunk(FACET_MECHANISM_MARGIN)?;
    let facets_touch =
        facets_intersecting_ball(&setup.coupling, &ball_full, DEFAULT_FACET_TOL)?.len();
    let facets_strict =
        facets_intersecting_ball(&setup.coupling, &ball_shrunk, DEFAULT_FACET_TOL)?.len();

    let certificate = apriori_certificate(
        setup.sigma_dim,
        m_budget,
        plan.rank_rule,
        plan.k_samples,
        eps_bar,
    )?;

    let fresh_seed = derive_seed(trial_seed, FRESH_STREAM_OFFSET);
    let violation =
        empirical_violation(&result.region, &plan.uncertainty, plan.n_fresh, fresh_seed)?;

    let support =
        tightened_active_support(&setup.domain, x_star, result.c_factor * setup.rho_solve, 1e-6);

    let potential_trace = match (&result.trace, plan.solve_space) {
        (Some(trace), SolveSpace::Aggregate) => {
            let crate::game::CostModel::QuadraticAggregative { c, d } = &plan.game.cost else {
                return Err(Error::UnsupportedModel);
            };
            Some(
                trace
                    .iter()
                    .map(|row| (row.x.transpose() * c * &row.x)[(0, 0)] + d.dot(&row.x))
                    .collect(),
            )
        }
        (Some(trace), SolveSpace::Full) => Some(
            trace
                .iter()
                .map(|row| plan.game.potential(&row.x))
                .collect::<Result<Vec<f64>>>()?,
        ),
        (None, _) => None,
    };

    Ok(TrialRow {
        trial,
        trial_seed,
        fresh_seed,
        m_budget,
        m_rows,
        sigma_star: sigma_star.iter().cloned().collect(),
        potential,
        facets_strict,
        facets_touch,
        s_star: support.len(),
        s_star_method: SupportMethod::ActiveRowHeuristic,
        certificate,
        empirical_violation: violation,
        converged: result.converged,
        iterations: result.iterations,
        residual: result.residual,
        potential_trace,
    })
}

fn resolve_eps_bar(plan: &ExperimentPlan, m_budget: usize) -> Result<f64> {
    match plan.eps_bar {
        Some(e) => Ok(e),
        None => {
            let d = plan
                .rank_rule
                .dimension_bound(plan.game.dim, m_budget)?
                .min(plan.k_samples);
            eps_required(d, plan.k_samples, plan.beta)
        }
    }
}

/// Runs the M-sweep over independent trials: per (trial, M) one solve, the
/// potential, both facet counts, the a priori certificate, and the
/// out-of-sample violation estimate (fresh draws shared across M within a
/// trial).
pub fn run_example(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    plan.validate()?;
    if plan.solve_space == SolveSpace::Aggregate && plan.game.map_kind != MapKind::We {
        return Err(Error::UnsupportedKind(
            "aggregate-space solves require the Wardrop map",
        ));
    }
    let eps_bar = resolve_eps_bar(plan, *plan.m_values.iter().min().unwrap())?;
    let outcomes: Vec<(Vec<TrialRow>, Vec<TrialFailure>)> =
        exec::map_range(plan.trials, |trial| {
            let trial_seed = derive_seed(plan.base_seed, trial as u64);
            let mut rows = Vec::new();
            let mut failures = Vec::new();
            match prepare_trial(plan, trial_seed) {
                Ok(setup) => {
                    for &m in &plan.m_values {
                        match run_trial_for_budget(plan, &setup, trial, trial_seed, eps_bar, m) {
                            Ok(row) => rows.push(row),
                            Err(e) => failures.push(TrialFailure {
                                trial,
                                m_budget: m,
                                message: e.to_string(),
                            }),
                        }
                    }
                }
                Err(e) => failures.push(TrialFailure {
                    trial,
                    m_budget: usize::MAX,
                    message: e.to_string(),
                }),
            }
            (rows, failures)
        });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in outcomes {
        rows.extend(r);
        failures.extend(f);
    }
    Ok(ExperimentReport {
        k_samples: plan.k_samples,
        rho: plan.rho,
        zeta: plan.zeta,
        beta: plan.beta,
        eps_bar,
        m_values: plan.m_values.clone(),
        trials: plan.trials,
        n_fresh: plan.n_fresh,
        base_seed: plan.base_seed,
        solve_space: plan.solve_space,
        rank_rule: plan.rank_rule,
        sample_counting: "one draw = one sample",
        rows,
        failures,
        campaign: None,
    })
}

/// Runs `trials` independent multisamples at the first facet budget and
/// reports the fraction of trials whose empirical violation exceeds `ε̄`
/// against the binomial-tail budget.
pub fn run_validation_campaign(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    plan.validate()?;
    let m_budget = plan.m_values[0];
    let eps_bar = resolve_eps_bar(plan, m_budget)?;
    let d = plan
        .rank_rule
        .dimension_bound(plan.game.dim, m_budget)?
        .min(plan.k_samples);
    let theorem_budget = binom_tail(d, plan.k_samples, eps_bar)?;

    let mut single = plan.clone();
    single.m_values = vec![m_budget];
    let mut report = run_example(&single)?;
    let violating_trials = report
        .rows
        .iter()
        .filter(|r| r.empirical_violation > eps_bar)
        .count();
    let fraction = violating_trials as f64 / plan.trials as f64;
    report.campaign = Some(CampaignSummary {
        eps_bar,
        theorem_budget,
        dimension_bound: d,
        violating_fraction: fraction,
        violating_trials,
    });
    Ok(report)
}

/// Formats a float with 17 significant digits (round-trippable).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the per-trial table: `trial, M, sigma_star_1..n, potential,
/// facets, s_star, eps, confidence, empirical_violation`.
pub fn write_per_trial_csv<W: std::io::Write>(
    report: &ExperimentReport,
    sigma_dim: usize,
    out: &mut W,
) -> std::io::Result<()> {
    write!(out, "trial,M")?;
    for j in 1..=sigma_dim {
        write!(out, ",sigma_star_{j}")?;
    }
    writeln!(
        out,
        ",potential,facets,s_star,eps,confidence,empirical_violation"
    )?;
    for row in &report.rows {
        write!(out, "{},{}", row.trial, row.m_budget)?;
        for v in &row.sigma_star {
            write!(out, ",{}", fmt_f64(*v))?;
        }
        writeln!(
            out,
            ",{},{},{},{},{},{}",
            fmt_f64(row.potential),
            row.facets_strict,
            row.s_star,
            fmt_f64(row.certificate.epsilon),
            fmt_f64(row.certificate.beta_or_confidence),
            fmt_f64(row.empirical_violation),
        )?;
    }
    Ok(())
}

/// Writes the campaign table: one row per trial with the exceedance flag.
pub fn write_campaign_csv<W: std::io::Write>(
    report: &ExperimentReport,
    out: &mut W,
) -> std::io::Result<()> {
    let eps_bar = report
        .campaign
        .as_ref()
        .map(|c| c.eps_bar)
        .unwrap_or(report.eps_bar);
    writeln!(out, "trial,trial_seed,empirical_violation,eps_bar,exceeded")?;
    for row in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.trial,
            row.trial_seed,
            fmt_f64(row.empirical_violation),
            fmt_f64(eps_bar),
            u8::from(row.empirical_violation > eps_bar),
        )?;
    }
    Ok(())
}

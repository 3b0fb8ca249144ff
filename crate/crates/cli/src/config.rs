//! Run configuration: a human-editable TOML file with an explicit schema
//! version. Unknown keys are rejected; defaults are materialized at parse
//! time so the emitted documents always carry the full effective
//! configuration.

use anyhow::{bail, Context};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use scenario_games::certificates::SupportRankRule;
use scenario_games::experiment::{ExperimentPlan, SolveSpace};
use scenario_games::game::{CostModel, GameSpec, MapKind};
use scenario_games::geometry::NormOrder;
use scenario_games::multipliers::ProjectionMode;
use scenario_games::scenario::{BoundFixup, DirectionLaw, PerturbationLaw, UncertaintyModel};
use scenario_games::solver::{SolverConfig, TauMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub game: GameSection,
    pub uncertainty: UncertaintySection,
    pub sampling: SamplingSection,
    pub solver: SolverSection,
    pub certificates: CertificateSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSection {
    pub agents: usize,
    pub dim: usize,
    pub map: MapKind,
    pub cost_c: Vec<Vec<f64>>,
    pub cost_d: Vec<f64>,
    /// Identical per-agent bounds.
    pub box_lower: Vec<f64>,
    pub box_upper: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum UncertaintySection {
    AggregateBand {
        seed: u64,
        lower_nominal: Vec<f64>,
        upper_nominal: Vec<f64>,
        lower_law: PerturbationLaw,
        upper_law: PerturbationLaw,
        #[serde(default = "default_fixup")]
        bound_fixup: BoundFixup,
    },
    GenericAffine {
        seed: u64,
        /// `"sphere"` or a fixed direction vector.
        direction: DirectionSpec,
        offset_nominal: f64,
        offset_law: PerturbationLaw,
    },
}

fn default_fixup() -> BoundFixup {
    BoundFixup::Resample
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirectionSpec {
    Named(String),
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_space")]
    pub space: SolveSpace,
    pub m_budget: usize,
    pub rho: f64,
    #[serde(default = "default_ball_norm")]
    pub ball_norm: NormOrder,
    pub zeta: f64,
    #[serde(default = "default_xi")]
    pub xi: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    pub tau_mode: TauModeSpec,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "default_cap")]
    pub cap: f64,
}

fn default_space() -> SolveSpace {
    SolveSpace::Aggregate
}
fn default_ball_norm() -> NormOrder {
    NormOrder::One
}
fn default_xi() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    200_000
}
fn default_cap() -> f64 {
    1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauModeSpec {
    Explicit,
    FromBounds,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSection {
    pub beta: f64,
    #[serde(default)]
    pub eps_bar: Option<f64>,
    #[serde(default = "default_rank_rule")]
    pub dimension_rule: SupportRankRule,
    #[serde(default = "default_fresh")]
    pub fresh_samples: usize,
}

fn default_rank_rule() -> SupportRankRule {
    SupportRankRule::Aggregate
}
fn default_fresh() -> usize {
    10_000
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default)]
    pub m_values: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_trials() -> usize {
    1
}

impl RunConfig {
    pub fn from_path(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let config: RunConfig = toml::from_str(text).context("parsing config")?;
        if config.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                config.schema_version
            );
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let g = &self.game;
        if g.cost_c.len() != g.dim || g.cost_c.iter().any(|r| r.len() != g.dim) {
            bail!("cost_c must be a {0}×{0} matrix", g.dim);
        }
        if g.cost_d.len() != g.dim || g.box_lower.len() != g.dim || g.box_upper.len() != g.dim {
            bail!("cost_d and box bounds must have length {}", g.dim);
        }
        if self.solver.tau_mode == TauModeSpec::Explicit && self.solver.tau.is_none() {
            bail!("tau_mode = \"explicit\" requires a tau value");
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        match &self.uncertainty {
            UncertaintySection::AggregateBand { seed, .. } => *seed,
            UncertaintySection::GenericAffine { seed, .. } => *seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out.uncertainty {
            UncertaintySection::AggregateBand { seed: s, .. } => *s = seed,
            UncertaintySection::GenericAffine { seed: s, .. } => *s = seed,
        }
        out
    }

    pub fn game_spec(&self) -> anyhow::Result<GameSpec> {
        let g = &self.game;
        let c = DMatrix::from_fn(g.dim, g.dim, |i, j| g.cost_c[i][j]);
        let d = DVector::from_vec(g.cost_d.clone());
        GameSpec::uniform_box(
            g.agents,
            g.dim,
            DVector::from_vec(g.box_lower.clone()),
            DVector::from_vec(g.box_upper.clone()),
            CostModel::QuadraticAggregative { c, d },
            g.map,
        )
        .map_err(Into::into)
    }

    pub fn uncertainty_model(&self) -> anyhow::Result<UncertaintyModel> {
        match &self.uncertainty {
            UncertaintySection::AggregateBand {
                seed,
                lower_nominal,
                upper_nominal,
                lower_law,
                upper_law,
                bound_fixup,
            } => Ok(UncertaintyModel::AggregateBand {
                dim: self.game.dim,
                lower_nominal: DVector::from_vec(lower_nominal.clone()),
                upper_nominal: DVector::from_vec(upper_nominal.clone()),
                lower_law: lower_law.clone(),
                upper_law: upper_law.clone(),
                fixup: *bound_fixup,
                seed: *seed,
            }),
            UncertaintySection::GenericAffine {
                seed,
                direction,
                offset_nominal,
                offset_law,
            } => {
                let direction = match direction {
                    DirectionSpec::Named(name) if name == "sphere" => DirectionLaw::Sphere,
                    DirectionSpec::Named(other) => {
                        bail!("unknown direction law `{other}` (expected \"sphere\" or a vector)")
                    }
                    DirectionSpec::Fixed(v) => DirectionLaw::Fixed(DVector::from_vec(v.clone())),
                };
                Ok(UncertaintyModel::GenericAffine {
                    dim: self.game.agents * self.game.dim,
                    direction,
                    offset_nominal: *offset_nominal,
                    offset_law: offset_law.clone(),
                })
            }
        }
        .map(|m| match m {
            UncertaintyModel::GenericAffine { .. } | UncertaintyModel::AggregateBand { .. } => m,
        })
    }

    pub fn tau_mode(&self) -> TauMode {
        match self.solver.tau_mode {
            TauModeSpec::Explicit => TauMode::Explicit(self.solver.tau.unwrap_or(0.0)),
            TauModeSpec::FromBounds => TauMode::FromBounds,
        }
    }

    /// Solver configuration with the deviation radius expressed in the
    /// solve space (`ρ/N` for aggregate solves).
    pub fn solver_config(&self, exhaustive_projection: bool, trace: bool) -> SolverConfig {
        let rho_solve = match self.solver.space {
            SolveSpace::Aggregate => self.solver.rho / self.game.agents as f64,
            SolveSpace::Full => self.solver.rho,
        };
        SolverConfig {
            tau: self.tau_mode(),
            rho: rho_solve,
            m_budget: self.solver.m_budget,
            zeta: self.solver.zeta,
            xi: self.solver.xi,
            ball_norm: self.solver.ball_norm,
            cap: self.solver.cap,
            max_iter: self.solver.max_iter,
            projection: if exhaustive_projection {
                ProjectionMode::Exhaustive
            } else {
                ProjectionMode::Auto
            },
            record_trace: trace,
            check_tightened_combos: true,
        }
    }

    pub fn experiment_plan(
        &self,
        exhaustive_projection: bool,
        trace: bool,
    ) -> anyhow::Result<ExperimentPlan> {
        Ok(ExperimentPlan {
            game: self.game_spec()?,
            uncertainty: self.uncertainty_model()?,
            k_samples: self.sampling.count,
            rho: self.solver.rho,
            zeta: self.solver.zeta,
            beta: self.certificates.beta,
            eps_bar: self.certificates.eps_bar,
            m_values: self.experiment.m_values.clone(),
            trials: self.experiment.trials,
            n_fresh: self.certificates.fresh_samples,
            base_seed: self.seed(),
            solve_space: self.solver.space,
            rank_rule: self.certificates.dimension_rule,
            tau: self.tau_mode(),
            xi: self.solver.xi,
            max_iter: self.solver.max_iter,
            cap: self.solver.cap,
            projection: if exhaustive_projection {
                ProjectionMode::Exhaustive
            } else {
                ProjectionMode::Auto
            },
            record_potential_trace: trace,
        })
    }
}

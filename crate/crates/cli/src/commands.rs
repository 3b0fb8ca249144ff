//! The four subcommands. Every emitted document embeds the effective
//! configuration and the seeds, so re-running a document's config
//! reproduces it bit for bit (modulo the `runtime` block).

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use scenario_games::certificates::{
    aposteriori_certificate, apriori_certificate, count_support_of_equilibrium, eps_required,
    Certificate, SupportCount,
};
use scenario_games::experiment::{
    fmt_f64, run_example, run_validation_campaign, ExperimentReport, SolveSpace,
};
use scenario_games::game::ViMap;
use scenario_games::geometry::{facets_intersecting_ball, BoxSet, NormOrder, Polytope,
    DEFAULT_FACET_TOL};
use scenario_games::scenario::{
    build_domain, draw_multisample_with_seed, reduce_to_aggregate, Domain, DomainOptions,
    SampleSet,
};
use scenario_games::solver::{self, SolveResult};
use scenario_games::Error as CoreError;

use crate::config::RunConfig;

/// Facet-counting margin for the open-ball mechanism count.
const FACET_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CliOptions {
    pub out_dir: PathBuf,
    pub seed_override: Option<u64>,
    pub trace: bool,
    pub exhaustive_projection: bool,
}

#[derive(Serialize)]
struct RuntimeSection {
    elapsed_ms: u128,
    version: &'static str,
}

impl RuntimeSection {
    fn since(start: Instant) -> Self {
        Self {
            elapsed_ms: start.elapsed().as_millis(),
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

#[derive(Serialize)]
struct SeedSection {
    uncertainty: u64,
}

#[derive(Serialize, Deserialize)]
struct RegionSection {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    ball_center: Vec<f64>,
    ball_radius: f64,
    ball_norm: NormOrder,
}

#[derive(Serialize, Deserialize)]
struct SolveSection {
    converged: bool,
    iterations: usize,
    residual: f64,
    fixed_point_residual: f64,
    tau_used: f64,
    norm_a: f64,
    c_factor: f64,
    space: SolveSpace,
    m_rows: usize,
    m_budget_effective: usize,
    x_star: Vec<f64>,
    mu_star: Vec<f64>,
    sigma_star: Vec<f64>,
    /// One character per coupling row: 1 tightened, 0 untightened.
    tightened_mask: String,
    potential: f64,
    region: RegionSection,
}

#[derive(Serialize)]
struct SolveDocument {
    schema_version: u32,
    command: &'static str,
    effective_config: RunConfig,
    seeds: SeedSection,
    result: SolveSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace_path: Option<String>,
    runtime: RuntimeSection,
}

#[derive(Serialize)]
struct CertifyDocument {
    schema_version: u32,
    command: &'static str,
    effective_config: RunConfig,
    seeds: SeedSection,
    source_result: String,
    replay_deviation: f64,
    support: SupportCount,
    /// Facets attained by the closed deviation ball (touches count).
    observed_facets_touch: usize,
    /// Facets crossed by the open deviation ball.
    observed_facets_strict: usize,
    apriori: Certificate,
    aposteriori: Certificate,
    runtime: RuntimeSection,
}

#[derive(Serialize)]
struct ReportDocument {
    schema_version: u32,
    command: &'static str,
    effective_config: RunConfig,
    seeds: SeedSection,
    report: ExperimentReport,
    csv_path: String,
    runtime: RuntimeSection,
}

struct SolveSetup {
    samples: SampleSet,
    map: ViMap,
    x_box: BoxSet,
    coupling: Polytope,
    domain: Domain,
}

fn build_setup(config: &RunConfig) -> anyhow::Result<SolveSetup> {
    let game = config.game_spec()?;
    let model = config.uncertainty_model()?.with_seed(config.seed());
    let samples = draw_multisample_with_seed(&model, config.sampling.count, config.seed())?;
    setup_from_samples(config, &samples)
}

fn setup_from_samples(config: &RunConfig, samples: &SampleSet) -> anyhow::Result<SolveSetup> {
    let game = config.game_spec()?;
    match config.solver.space {
        SolveSpace::Aggregate => {
            let red =
                reduce_to_aggregate(&game.lower, &game.upper, samples, DomainOptions::default())?;
            let (coupling, _) = red.domain.coupling();
            Ok(SolveSetup {
                samples: samples.clone(),
                map: game.aggregate_game()?.vi_map()?,
                x_box: red.x_box,
                coupling,
                domain: red.domain,
            })
        }
        SolveSpace::Full => {
            let x_box = game.stacked_box();
            let domain = build_domain(&x_box, samples, game.agents, DomainOptions::default())?;
            let (coupling, _) = domain.coupling();
            Ok(SolveSetup {
                samples: samples.clone(),
                map: game.vi_map()?,
                x_box,
                coupling,
                domain,
            })
        }
    }
}

fn solve_setup(
    config: &RunConfig,
    setup: &SolveSetup,
    opts: &CliOptions,
    trace: bool,
) -> anyhow::Result<SolveResult> {
    let solver_config = config.solver_config(opts.exhaustive_projection, trace);
    solver::run(&setup.map, &setup.x_box, &setup.coupling, &solver_config, None)
        .map_err(Into::into)
}

fn sigma_of(config: &RunConfig, x: &DVector<f64>) -> anyhow::Result<DVector<f64>> {
    match config.solver.space {
        SolveSpace::Aggregate => Ok(x.clone()),
        SolveSpace::Full => Ok(config.game_spec()?.aggregate(x)?),
    }
}

fn potential_of(config: &RunConfig, sigma: &DVector<f64>) -> f64 {
    let g = &config.game;
    let mut quad = 0.0;
    for i in 0..g.dim {
        for j in 0..g.dim {
            quad += sigma[i] * g.cost_c[i][j] * sigma[j];
        }
    }
    quad + (0..g.dim).map(|i| g.cost_d[i] * sigma[i]).sum::<f64>()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_trace_csv(path: &Path, result: &SolveResult) -> anyhow::Result<()> {
    use std::io::Write;
    let trace = result.trace.as_ref().expect("trace recorded");
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = result.state.x.len();
    let m = result.state.mu.len();
    write!(out, "kappa")?;
    for j in 1..=dim {
        write!(out, ",x_{j}")?;
    }
    for j in 1..=m {
        write!(out, ",mu_{j}")?;
    }
    writeln!(out, ",step_norm,mask")?;
    for row in trace {
        write!(out, "{}", row.kappa)?;
        for v in row.x.iter() {
            write!(out, ",{}", fmt_f64(*v))?;
        }
        for v in row.mu.iter() {
            write!(out, ",{}", fmt_f64(*v))?;
        }
        let mask: String = row.mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
        writeln!(out, ",{},{}", fmt_f64(row.step_norm), mask)?;
    }
    Ok(())
}

fn effective_config(config: &RunConfig, opts: &CliOptions) -> RunConfig {
    match opts.seed_override {
        Some(seed) => config.with_seed(seed),
        None => config.clone(),
    }
}

/// Runs one solve and writes `solve.json` (plus `trace.csv` with `--trace`).
///
/// Returns the document path and whether the iteration converged.
pub fn cmd_solve(config: &RunConfig, opts: &CliOptions) -> anyhow::Result<(PathBuf, bool)> {
    let start = Instant::now();
    let config = effective_config(config, opts);
    let setup = build_setup(&config)?;
    let result = solve_setup(&config, &setup, opts, opts.trace)?;
    let sigma = sigma_of(&config, &result.state.x)?;
    std::fs::create_dir_all(&opts.out_dir)?;
    let trace_path = if opts.trace {
        let path = opts.out_dir.join("trace.csv");
        write_trace_csv(&path, &result)?;
        Some(path.display().to_string())
    } else {
        None
    };
    let mask: String = result
        .tightened_mask
        .iter()
        .map(|&b| if b { '1' } else { '0' })
        .collect();
    let document = SolveDocument {
        schema_version: crate::config::SCHEMA_VERSION,
        command: "solve",
        seeds: SeedSection {
            uncertainty: config.seed(),
        },
        result: SolveSection {
            converged: result.converged,
            iterations: result.iterations,
            residual: result.residual,
            fixed_point_residual: result.fixed_point_residual,
            tau_used: result.tau_used,
            norm_a: result.norm_a,
            c_factor: result.c_factor,
            space: config.solver.space,
            m_rows: setup.coupling.num_rows(),
            m_budget_effective: config.solver.m_budget.min(setup.coupling.num_rows()),
            x_star: result.state.x.iter().cloned().collect(),
            mu_star: result.state.mu.iter().cloned().collect(),
            sigma_star: sigma.iter().cloned().collect(),
            tightened_mask: mask,
            potential: potential_of(&config, &sigma),
            region: RegionSection {
                rows: (0..result.region.base.num_rows())
                    .map(|i| result.region.base.rows().row(i).iter().cloned().collect())
                    .collect(),
                rhs: result.region.base.rhs().iter().cloned().collect(),
                ball_center: result.region.ball.center.iter().cloned().collect(),
                ball_radius: result.region.ball.radius,
                ball_norm: result.region.ball.norm,
            },
        },
        effective_config: config,
        trace_path,
        runtime: RuntimeSection::since(start),
    };
    let path = opts.out_dir.join("solve.json");
    write_json(&path, &document)?;
    Ok((path, result.converged))
}

/// Recomputes the pipeline behind a solve document and attaches the a priori
/// and a posteriori certificates side by side.
pub fn cmd_certify(
    config: &RunConfig,
    result_path: &Path,
    opts: &CliOptions,
) -> anyhow::Result<PathBuf> {
    let start = Instant::now();
    let config = effective_config(config, opts);
    let source: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(result_path)
            .with_context(|| format!("reading result {}", result_path.display()))?,
    )?;
    let stored_sigma: Vec<f64> = serde_json::from_value(
        source
            .pointer("/result/sigma_star")
            .context("result document lacks /result/sigma_star")?
            .clone(),
    )?;

    let setup = build_setup(&config)?;
    let result = solve_setup(&config, &setup, opts, false)?;
    let sigma = sigma_of(&config, &result.state.x)?;
    let replay_deviation = stored_sigma
        .iter()
        .zip(sigma.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if replay_deviation > 1e-9 {
        bail!(CoreError::NonReproduciblePipeline {
            deviation: replay_deviation
        });
    }

    // Leave-one-out support count over full pipeline reruns.
    let x_star = result.state.x.clone();
    let pipeline = |samples: &SampleSet| -> scenario_games::Result<DVector<f64>> {
        let setup = setup_from_samples(&config, samples)
            .map_err(|e| CoreError::Internal(e.to_string()))?;
        let solved = solve_setup(&config, &setup, opts, false)
            .map_err(|e| CoreError::Internal(e.to_string()))?;
        Ok(solved.state.x)
    };
    let support = count_support_of_equilibrium(&pipeline, &setup.samples, &x_star)?;

    let ball = &result.region.ball;
    let touch = facets_intersecting_ball(&setup.coupling, ball, DEFAULT_FACET_TOL)?.len();
    let strict =
        facets_intersecting_ball(&setup.coupling, &ball.shrunk(FACET_MARGIN)?, DEFAULT_FACET_TOL)?
            .len();

    let dim = match config.solver.space {
        SolveSpace::Aggregate => config.game.dim,
        SolveSpace::Full => config.game.agents * config.game.dim,
    };
    let k = config.sampling.count;
    let m_budget = config.solver.m_budget.min(setup.coupling.num_rows());
    let eps_bar = match config.certificates.eps_bar {
        Some(e) => e,
        None => {
            let d = config
                .certificates
                .dimension_rule
                .dimension_bound(dim, m_budget)?
                .min(k);
            eps_required(d, k, config.certificates.beta)?
        }
    };
    let apriori = apriori_certificate(
        dim,
        m_budget,
        config.certificates.dimension_rule,
        k,
        eps_bar,
    )?;
    let aposteriori =
        aposteriori_certificate(support.count, touch, k, config.certificates.beta)?;

    std::fs::create_dir_all(&opts.out_dir)?;
    let document = CertifyDocument {
        schema_version: crate::config::SCHEMA_VERSION,
        command: "certify",
        seeds: SeedSection {
            uncertainty: config.seed(),
        },
        effective_config: config,
        source_result: result_path.display().to_string(),
        replay_deviation,
        support,
        observed_facets_touch: touch,
        observed_facets_strict: strict,
        apriori,
        aposteriori,
        runtime: RuntimeSection::since(start),
    };
    let path = opts.out_dir.join("certify.json");
    write_json(&path, &document)?;
    Ok(path)
}

/// Runs the statistical validation campaign and writes the report plus a
/// per-trial CSV.
pub fn cmd_validate(config: &RunConfig, opts: &CliOptions) -> anyhow::Result<PathBuf> {
    let start = Instant::now();
    let mut config = effective_config(config, opts);
    if config.experiment.m_values.is_empty() {
        config.experiment.m_values = vec![config.solver.m_budget];
    }
    let plan = config.experiment_plan(opts.exhaustive_projection, false)?;
    let report = run_validation_campaign(&plan)?;
    std::fs::create_dir_all(&opts.out_dir)?;
    let csv_path = opts.out_dir.join("campaign.csv");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
        scenario_games::experiment::write_campaign_csv(&report, &mut out)?;
    }
    let document = ReportDocument {
        schema_version: crate::config::SCHEMA_VERSION,
        command: "validate",
        seeds: SeedSection {
            uncertainty: config.seed(),
        },
        effective_config: config,
        report,
        csv_path: csv_path.display().to_string(),
        runtime: RuntimeSection::since(start),
    };
    let path = opts.out_dir.join("validate.json");
    write_json(&path, &document)?;
    Ok(path)
}

/// Runs the facet-budget sweep and writes the report plus `per_trial.csv`.
pub fn cmd_sweep(config: &RunConfig, opts: &CliOptions) -> anyhow::Result<PathBuf> {
    let start = Instant::now();
    let config = effective_config(config, opts);
    if config.experiment.m_values.is_empty() {
        bail!("sweep requires a non-empty experiment.m_values list");
    }
    let plan = config.experiment_plan(opts.exhaustive_projection, opts.trace)?;
    let report = run_example(&plan)?;
    std::fs::create_dir_all(&opts.out_dir)?;
    let csv_path = opts.out_dir.join("per_trial.csv");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
        scenario_games::experiment::write_per_trial_csv(&report, config.game.dim, &mut out)?;
    }
    let document = ReportDocument {
        schema_version: crate::config::SCHEMA_VERSION,
        command: "sweep",
        seeds: SeedSection {
            uncertainty: config.seed(),
        },
        effective_config: config,
        report,
        csv_path: csv_path.display().to_string(),
        runtime: RuntimeSection::since(start),
    };
    let path = opts.out_dir.join("sweep.json");
    write_json(&path, &document)?;
    Ok(path)
}

//! Certificate machinery: support counting by leave-one-out, out-of-sample
//! violation estimation, and the a posteriori guarantee exercised end to end.

mod common;

use common::rational_binom_tail;
use nalgebra::{DMatrix, DVector};
use scenario_games::certificates::{
    binom_tail, count_support_of_equilibrium, empirical_violation, eps_aposteriori,
    estimate_support_active, SupportMethod,
};
use scenario_games::error::Error;
use scenario_games::exec;
use scenario_games::game::{CostModel, GameSpec, MapKind};
use scenario_games::geometry::{
    facets_intersecting_ball, normalize_rows, NormBall, NormOrder, Region, DEFAULT_FACET_TOL,
};
use scenario_games::scenario::{
    draw_multisample_with_seed, reduce_to_aggregate, BoundFixup, DirectionLaw, DomainOptions,
    PerturbationLaw, SampleSet, UncertaintyModel,
};
use scenario_games::solver::{run, SolverConfig, TauMode};

fn quad_game(c: DMatrix<f64>, d: DVector<f64>, upper: f64) -> GameSpec {
    let n = d.len();
    GameSpec::uniform_box(
        50,
        n,
        DVector::zeros(n),
        DVector::from_element(n, upper),
        CostModel::QuadraticAggregative { c, d },
        MapKind::We,
    )
    .unwrap()
}

fn band_model(
    lower: Vec<f64>,
    upper: Vec<f64>,
    lower_hw: f64,
    upper_hw: f64,
    seed: u64,
) -> UncertaintyModel {
    let dim = lower.len();
    UncertaintyModel::AggregateBand {
        dim,
        lower_nominal: DVector::from_vec(lower),
        upper_nominal: DVector::from_vec(upper),
        lower_law: PerturbationLaw::Uniform { half_width: lower_hw },
        upper_law: PerturbationLaw::Uniform { half_width: upper_hw },
        fixup: BoundFixup::Resample,
        seed,
    }
}

/// Deterministic aggregate-space solve pipeline for a game/config pair,
/// with the facet budget pinned to the realized row count (no tightening).
fn sigma_pipeline(
    game: &GameSpec,
    rho: f64,
    zeta: f64,
) -> impl Fn(&SampleSet) -> scenario_games::Result<DVector<f64>> + Sync + '_ {
    move |samples: &SampleSet| {
        let red = reduce_to_aggregate(&game.lower, &game.upper, samples, DomainOptions::default())?;
        let (coupling, _) = red.domain.coupling();
        let map = game.aggregate_game()?.vi_map()?;
        let mut config = SolverConfig::new(rho, coupling.num_rows(), zeta);
        config.tau = TauMode::Explicit(0.1);
        config.xi = 1e-11;
        config.cap = 50.0;
        let result = run(&map, &red.x_box, &coupling, &config, None)?;
        Ok(result.state.x)
    }
}

#[test]
fn tail_matches_rational_oracle_spot() {
    for &(d, k, eps) in &[(1usize, 30usize, 0.05f64), (4, 30, 0.2), (10, 50, 0.5)] {
        let fast = binom_tail(d, k, eps).unwrap();
        let exact = rational_binom_tail(d, k, eps);
        assert!((fast - exact).abs() <= 1e-13, "{fast} vs {exact}");
    }
}

#[test]
fn no_binding_sample_means_no_support() {
    // Bands far from the equilibrium: removing any draw changes nothing.
    let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.5]);
    let d = DVector::from_vec(vec![-2.0, -2.0]);
    let game = quad_game(c, d, 3.5);
    let model = band_model(vec![0.05, 0.05], vec![3.0, 3.0], 0.05, 0.1, 5);
    let samples = draw_multisample_with_seed(&model, 12, 5).unwrap();
    let pipeline = sigma_pipeline(&game, 0.05, 0.05);
    let x_star = pipeline(&samples).unwrap();
    let support = count_support_of_equilibrium(&pipeline, &samples, &x_star).unwrap();
    assert_eq!(support.count, 0);
    assert_eq!(support.method, SupportMethod::LeaveOneOut);
}

#[test]
fn single_binding_sample_is_the_support() {
    // One-dimensional game pushed against the smallest upper band.
    let game = GameSpec::uniform_box(
        1,
        1,
        DVector::zeros(1),
        DVector::from_element(1, 4.0),
        CostModel::QuadraticAggregative {
            c: DMatrix::from_element(1, 1, 1.0),
            d: DVector::from_element(1, -2.0),
        },
        MapKind::We,
    )
    .unwrap();
    let model = band_model(vec![0.0], vec![1.0], 0.05, 0.1, 9);
    let samples = draw_multisample_with_seed(&model, 8, 9).unwrap();
    let pipeline = sigma_pipeline(&game, 0.05, 0.05);
    let x_star = pipeline(&samples).unwrap();
    let support = count_support_of_equilibrium(&pipeline, &samples, &x_star).unwrap();
    assert_eq!(support.count, 1);
    // The support draw is the one holding the binding upper bound.
    let red = reduce_to_aggregate(&game.lower, &game.upper, &samples, DomainOptions::default())
        .unwrap();
    let (_, draws) = red.domain.coupling();
    assert!(support.indices.iter().all(|i| draws.contains(i)));
}

#[test]
fn benchmark_support_respects_aggregate_bound() {
    // With aggregate-only coupling the support of the equilibrium is at most
    // the aggregate dimension n = 2.
    let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.5]);
    let d = DVector::from_vec(vec![-4.0, -4.0]);
    let game = quad_game(c, d, 3.5);
    let model = band_model(vec![0.0, 0.0], vec![0.75, 1.0], 0.1, 0.15, 13);
    let samples = draw_multisample_with_seed(&model, 25, 13).unwrap();
    let pipeline = sigma_pipeline(&game, 0.05, 0.05);
    let x_star = pipeline(&samples).unwrap();
    let support = count_support_of_equilibrium(&pipeline, &samples, &x_star).unwrap();
    assert!(support.count <= 2, "support {:?}", support.indices);

    // The active-row heuristic agrees here and is flagged as such.
    let red = reduce_to_aggregate(&game.lower, &game.upper, &samples, DomainOptions::default())
        .unwrap();
    let estimate = estimate_support_active(&red.domain, &x_star, 1e-6);
    assert_eq!(estimate.method, SupportMethod::ActiveRowHeuristic);
    assert_eq!(estimate.indices, support.indices);
}

#[test]
fn non_reproducible_pipeline_is_rejected() {
    let game = GameSpec::uniform_box(
        1,
        1,
        DVector::zeros(1),
        DVector::from_element(1, 4.0),
        CostModel::QuadraticAggregative {
            c: DMatrix::from_element(1, 1, 1.0),
            d: DVector::from_element(1, -2.0),
        },
        MapKind::We,
    )
    .unwrap();
    let model = band_model(vec![0.0], vec![1.0], 0.05, 0.1, 9);
    let samples = draw_multisample_with_seed(&model, 8, 9).unwrap();
    let pipeline = sigma_pipeline(&game, 0.05, 0.05);
    let off = pipeline(&samples).unwrap() + DVector::from_element(1, 1e-3);
    assert!(matches!(
        count_support_of_equilibrium(&pipeline, &samples, &off),
        Err(Error::NonReproduciblePipeline { .. })
    ));
}

#[test]
fn violation_of_safe_region_is_zero() {
    // Point-mass model whose band always contains the region.
    let base = normalize_rows(
        &DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]),
        &DVector::from_vec(vec![0.6, 0.6, -0.4, -0.4]),
    )
    .unwrap();
    let ball = NormBall::new(DVector::from_element(2, 0.5), 0.05, NormOrder::One).unwrap();
    let region = Region::new(base, ball).unwrap();
    let model = band_model(vec![0.0, 0.0], vec![1.0, 1.0], 0.0, 0.0, 3);
    let v = empirical_violation(&region, &model, 500, 1234).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn point_region_half_space_coin_flip() {
    // Degenerate region at a point, threshold uniform on [x−1, x+1]: the
    // analytic violation probability is 1/2.
    let p = 0.3;
    let base = normalize_rows(
        &DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        &DVector::from_vec(vec![p, -p]),
    )
    .unwrap();
    let ball = NormBall::new(DVector::from_element(1, p), 1e-9, NormOrder::Two).unwrap();
    let region = Region::new(base, ball).unwrap();
    let model = UncertaintyModel::GenericAffine {
        dim: 1,
        direction: DirectionLaw::Fixed(DVector::from_element(1, 1.0)),
        offset_nominal: p,
        offset_law: PerturbationLaw::Uniform { half_width: 1.0 },
        seed: 0,
    };
    let n = 10_000;
    let v = empirical_violation(&region, &model, n, 777).unwrap();
    let se = (0.25f64 / n as f64).sqrt();
    assert!((v - 0.5).abs() <= 3.0 * se, "violation {v}");
}

#[test]
fn violation_is_deterministic_and_concentrates() {
    let base = normalize_rows(
        &DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        &DVector::from_vec(vec![0.55, -0.45]),
    )
    .unwrap();
    let ball = NormBall::new(DVector::from_element(1, 0.5), 0.05, NormOrder::Two).unwrap();
    let region = Region::new(base, ball).unwrap();
    let model = band_model(vec![0.0], vec![0.6], 0.0, 0.2, 0);
    let a = empirical_violation(&region, &model, 2000, 42).unwrap();
    let b = empirical_violation(&region, &model, 2000, 42).unwrap();
    assert_eq!(a, b);
    let c = empirical_violation(&region, &model, 2000, 43).unwrap();
    assert!((a - c).abs() < 0.1);

    // Doubling the sample count roughly halves the variance of repeated
    // estimates.
    let spread = |n_fresh: usize| -> f64 {
        let vals = exec::map_range(120, |rep| {
            empirical_violation(&region, &model, n_fresh, 1000 + rep as u64).unwrap()
        });
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64
    };
    let var_n = spread(400);
    let var_2n = spread(800);
    let ratio = var_n / var_2n;
    assert!(
        (1.2..=3.4).contains(&ratio),
        "variance ratio {ratio} (var_n {var_n:e}, var_2n {var_2n:e})"
    );
}

#[test]
fn aposteriori_guarantee_holds_across_trials() {
    // The bound ℙ{𝕍 > ε(s*+M)} ≤ β checked over independent runs. Each
    // trial reruns the full pipeline K times for the leave-one-out count,
    // so the trial budget is sized for a single-core debug build.
    let beta = 0.1;
    let trials = 60;
    let k = 20;
    let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.5]);
    let d = DVector::from_vec(vec![-4.0, -4.0]);
    let game = quad_game(c, d, 3.5);
    let rho = 0.05;
    let exceeded: Vec<bool> = exec::map_range(trials, |t| {
        let seed = 5000 + t as u64;
        let model = band_model(vec![0.0, 0.0], vec![0.75, 1.0], 0.1, 0.15, seed);
        let samples = draw_multisample_with_seed(&model, k, seed).unwrap();
        let pipeline = sigma_pipeline(&game, rho, 0.05);
        let x_star = pipeline(&samples).unwrap();
        let support = count_support_of_equilibrium(&pipeline, &samples, &x_star).unwrap();
        let red =
            reduce_to_aggregate(&game.lower, &game.upper, &samples, DomainOptions::default())
                .unwrap();
        let (coupling, _) = red.domain.coupling();
        let ball = NormBall::new(x_star.clone(), rho, NormOrder::One).unwrap();
        let observed = facets_intersecting_ball(&coupling, &ball, DEFAULT_FACET_TOL)
            .unwrap()
            .len();
        let eps = eps_aposteriori((support.count + observed).min(k), k, beta).unwrap();
        let region = Region::new(red.x_box.to_polytope().stack(&coupling).unwrap(), ball).unwrap();
        let v = empirical_violation(&region, &model, 3000, seed ^ 0xFFFF).unwrap();
        v > eps
    });
    let fraction = exceeded.iter().filter(|&&e| e).count() as f64 / trials as f64;
    let bound = beta + 3.0 * (beta / trials as f64).sqrt();
    assert!(
        fraction <= bound,
        "exceedance fraction {fraction} above {bound}"
    );
}

//! Uncertainty models, i.i.d. multisampling of affine coupling constraints
//! `a(δ)ᵀx ≤ b(δ)`, and assembly of the sampled feasibility domain.
//!
//! Two families ship: `aggregate-band` draws componentwise bounds
//! `b̲_δ ≤ σ(x) ≤ b̄_δ` on the population aggregate (the benchmark geometry),
//! and `generic-affine` draws a random half-space per sample in full decision
//! space. Certificates are distribution-free, so the perturbation laws are
//! artifact choices exposed through configuration.
//!
//! Every row of a built domain records which sample produced it; the
//! counting convention is one draw = one sample (a band draw contributes
//! `2n` rows that all map back to the same δ).

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_rows, BoxSet, Polytope, REDUNDANCY_TOL};

/// Scalar perturbation law applied per component around a nominal value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum PerturbationLaw {
    /// Uniform on `[−half_width, half_width]`.
    Uniform { half_width: f64 },
    /// Centered Gaussian with the given standard deviation.
    Gaussian { std_dev: f64 },
}

impl PerturbationLaw {
    fn validate(&self) -> Result<()> {
        let v = match self {
            PerturbationLaw::Uniform { half_width } => *half_width,
            PerturbationLaw::Gaussian { std_dev } => *std_dev,
        };
        if v < 0.0 || !v.is_finite() {
            return Err(Error::InvalidDistributionParams(format!(
                "negative or non-finite spread {v}"
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha12Rng) -> f64 {
        match self {
            PerturbationLaw::Uniform { half_width } => {
                if *half_width == 0.0 {
                    0.0
                } else {
                    let u = Uniform::new_inclusive(-half_width, *half_width)
                        .expect("validated uniform bounds");
                    rng.sample(u)
                }
            }
            PerturbationLaw::Gaussian { std_dev } => {
                if *std_dev == 0.0 {
                    0.0
                } else {
                    let n = Normal::new(0.0, *std_dev).expect("validated normal parameters");
                    rng.sample(n)
                }
            }
        }
    }
}

/// What to do when a band draw comes out with crossed bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundFixup {
    /// Redraw the whole band (default; keeps each `C_δ` nonempty).
    Resample,
    /// Swap the offending pair of bounds.
    Swap,
}

/// Direction law for generic affine samples.
#[derive(Debug, Clone, PartialEq)]
pub enum DirectionLaw {
    /// Uniform on the unit sphere.
    Sphere,
    /// A fixed direction (useful for degenerate test models).
    Fixed(DVector<f64>),
}

/// Distribution of the uncertain constraint `g(x, δ) = a(δ)ᵀx − b(δ)`.
#[derive(Debug, Clone, PartialEq)]
pub enum UncertaintyModel {
    /// Bounds on the aggregate: each draw yields `b̲ ≤ σ(x) ≤ b̄` with
    /// `b̲ = lower_nominal + noise`, `b̄ = upper_nominal + noise`.
    AggregateBand {
        dim: usize,
        lower_nominal: DVector<f64>,
        upper_nominal: DVector<f64>,
        lower_law: PerturbationLaw,
        upper_law: PerturbationLaw,
        fixup: BoundFixup,
        seed: u64,
    },
    /// One half-space `a(δ)ᵀx ≤ b(δ)` per draw in decision space.
    GenericAffine {
        dim: usize,
        direction: DirectionLaw,
        offset_nominal: f64,
        offset_law: PerturbationLaw,
        seed: u64,
    },
}

impl UncertaintyModel {
    pub fn seed(&self) -> u64 {
        match self {
            UncertaintyModel::AggregateBand { seed, .. } => *seed,
            UncertaintyModel::GenericAffine { seed, .. } => *seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut m = self.clone();
        match &mut m {
            UncertaintyModel::AggregateBand { seed: s, .. } => *s = seed,
            UncertaintyModel::GenericAffine { seed: s, .. } => *s = seed,
        }
        m
    }

    /// Dimension of the space the raw constraint rows live in (`n` for
    /// bands, `nN` for generic rows).
    pub fn sample_dim(&self) -> usize {
        match self {
            UncertaintyModel::AggregateBand { dim, .. } => *dim,
            UncertaintyModel::GenericAffine { dim, .. } => *dim,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            UncertaintyModel::AggregateBand { .. } => "aggregate-band",
            UncertaintyModel::GenericAffine { .. } => "generic-affine",
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            UncertaintyModel::AggregateBand {
                dim,
                lower_nominal,
                upper_nominal,
                lower_law,
                upper_law,
                ..
            } => {
                if *dim == 0 || lower_nominal.len() != *dim || upper_nominal.len() != *dim {
                    return Err(Error::InvalidDistributionParams(
                        "band nominal bounds must match the aggregate dimension".into(),
                    ));
                }
                lower_law.validate()?;
                upper_law.validate()?;
                for j in 0..*dim {
                    if lower_nominal[j] > upper_nominal[j] {
                        return Err(Error::InvalidDistributionParams(format!(
                            "nominal band {j} is inverted"
                        )));
                    }
                }
                Ok(())
            }
            UncertaintyModel::GenericAffine {
                dim,
                direction,
                offset_law,
                ..
            } => {
                if *dim == 0 {
                    return Err(Error::InvalidDistributionParams(
                        "zero-dimensional sample space".into(),
                    ));
                }
                offset_law.validate()?;
                if let DirectionLaw::Fixed(v) = direction {
                    if v.len() != *dim {
                        return Err(Error::InvalidDistributionParams(
                            "fixed direction has the wrong dimension".into(),
                        ));
                    }
                    if v.norm() < 1e-12 {
                        return Err(Error::InvalidDistributionParams(
                            "fixed direction is numerically zero".into(),
                        ));
                    }
                }
                Ok(())
            }
        }
    }
}

/// One realized sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Draw {
    Band {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    Affine {
        a: DVector<f64>,
        b: f64,
    },
}

/// An ordered i.i.d. multisample with its seed provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub kind: &'static str,
    pub sample_dim: usize,
    pub seed: u64,
    pub draws: Vec<Draw>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Copy with draw `k` removed (for leave-one-out support counting).
    pub fn without_draw(&self, k: usize) -> SampleSet {
        let mut draws = self.draws.clone();
        draws.remove(k);
        SampleSet {
            kind: self.kind,
            sample_dim: self.sample_dim,
            seed: self.seed,
            draws,
        }
    }

    /// Raw (unnormalized) constraint rows in the sample's own space with the
    /// owning draw index: bands expand to `2n` rows `(−e_j, −b̲_j)`,
    /// `(e_j, b̄_j)`; affine draws to a single row.
    pub fn native_rows(&self) -> Vec<(DVector<f64>, f64, usize)> {
        let mut rows = Vec::new();
        for (k, draw) in self.draws.iter().enumerate() {
            match draw {
                Draw::Band { lower, upper } => {
                    let n = lower.len();
                    for j in 0..n {
                        let mut a = DVector::<f64>::zeros(n);
                        a[j] = -1.0;
                        rows.push((a, -lower[j], k));
                    }
                    for j in 0..n {
                        let mut a = DVector::<f64>::zeros(n);
                        a[j] = 1.0;
                        rows.push((a, upper[j], k));
                    }
                }
                Draw::Affine { a, b } => rows.push((a.clone(), *b, k)),
            }
        }
        rows
    }

    /// Constraint rows lifted to the stacked decision space of `agents`
    /// blocks: a band row `±e_jᵀσ ≤ β` becomes `±(1/N)(1ᵀ⊗e_j)ᵀ x ≤ β`.
    pub fn decision_rows(&self, agents: usize) -> Vec<(DVector<f64>, f64, usize)> {
        match self.kind {
            "aggregate-band" => {
                let n = self.sample_dim;
                self.native_rows()
                    .into_iter()
                    .map(|(a, b, k)| {
                        let mut lifted = DVector::<f64>::zeros(n * agents);
                        for i in 0..agents {
                            for j in 0..n {
                                lifted[i * n + j] = a[j] / agents as f64;
                            }
                        }
                        (lifted, b, k)
                    })
                    .collect()
            }
            _ => self.native_rows(),
        }
    }

    /// Line-oriented text form: a header (kind, dimension, K, seed, rows per
    /// draw) followed by one realized row per line in full double precision.
    pub fn to_text(&self) -> String {
        let rows = self.native_rows();
        let rows_per_draw = if self.draws.is_empty() {
            match self.kind {
                "aggregate-band" => 2 * self.sample_dim,
                _ => 1,
            }
        } else {
            rows.len() / self.draws.len()
        };
        let mut out = format!(
            "kind={} d={} K={} seed={} rows_per_draw={}\n",
            self.kind,
            self.sample_dim,
            self.draws.len(),
            self.seed,
            rows_per_draw
        );
        for (a, b, _) in rows {
            let mut line = String::new();
            for v in a.iter() {
                line.push_str(&format!("{:.17e} ", v));
            }
            line.push_str(&format!("{:.17e}\n", b));
            out.push_str(&line);
        }
        out
    }

    /// Parses the [`SampleSet::to_text`] format.
    pub fn from_text(text: &str) -> Result<SampleSet> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidDistributionParams("empty sample text".into()))?;
        let mut kind = None;
        let mut dim = None;
        let mut k = None;
        let mut seed = None;
        let mut rows_per_draw = None;
        for token in header.split_whitespace() {
            let (key, value) = token.split_once('=').ok_or_else(|| {
                Error::InvalidDistributionParams(format!("bad header token `{token}`"))
            })?;
            match key {
                "kind" => {
                    kind = Some(match value {
                        "aggregate-band" => "aggregate-band",
                        "generic-affine" => "generic-affine",
                        other => {
                            return Err(Error::InvalidDistributionParams(format!(
                                "unknown sample kind `{other}`"
                            )))
                        }
                    })
                }
                "d" => dim = value.parse::<usize>().ok(),
                "K" => k = value.parse::<usize>().ok(),
                "seed" => seed = value.parse::<u64>().ok(),
                "rows_per_draw" => rows_per_draw = value.parse::<usize>().ok(),
                other => {
                    return Err(Error::InvalidDistributionParams(format!(
                        "unknown header key `{other}`"
                    )))
                }
            }
        }
        let (Some(kind), Some(dim), Some(k), Some(seed), Some(rows_per_draw)) =
            (kind, dim, k, seed, rows_per_draw)
        else {
            return Err(Error::InvalidDistributionParams(
                "incomplete sample header".into(),
            ));
        };
        let mut raw_rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse::<f64>).collect();
            let vals = vals
                .map_err(|e| Error::InvalidDistributionParams(format!("bad sample row: {e}")))?;
            if vals.len() != dim + 1 {
                return Err(Error::InvalidDistributionParams(format!(
                    "sample row has {} values, expected {}",
                    vals.len(),
                    dim + 1
                )));
            }
            let a = DVector::from_vec(vals[..dim].to_vec());
            raw_rows.push((a, vals[dim]));
        }
        if raw_rows.len() != k * rows_per_draw {
            return Err(Error::InvalidDistributionParams(format!(
                "expected {} rows, found {}",
                k * rows_per_draw,
                raw_rows.len()
            )));
        }
        let mut draws = Vec::with_capacity(k);
        match kind {
            "aggregate-band" => {
                if rows_per_draw != 2 * dim {
                    return Err(Error::InvalidDistributionParams(
                        "band sample must carry 2n rows per draw".into(),
                    ));
                }
                for chunk in raw_rows.chunks(rows_per_draw) {
                    let mut lower = DVector::<f64>::zeros(dim);
                    let mut upper = DVector::<f64>::zeros(dim);
                    for j in 0..dim {
                        let (a, b) = &chunk[j];
                        if a[j] != -1.0 {
                            return Err(Error::InvalidDistributionParams(
                                "band row pattern mismatch".into(),
                            ));
                        }
                        lower[j] = -b;
                    }
                    for j in 0..dim {
                        let (a, b) = &chunk[dim + j];
                        if a[j] != 1.0 {
                            return Err(Error::InvalidDistributionParams(
                                "band row pattern mismatch".into(),
                            ));
                        }
                        upper[j] = *b;
                    }
                    draws.push(Draw::Band { lower, upper });
                }
            }
            _ => {
                for (a, b) in raw_rows {
                    draws.push(Draw::Affine { a, b });
                }
            }
        }
        Ok(SampleSet {
            kind,
            sample_dim: dim,
            seed,
            draws,
        })
    }
}

/// Draws `k` i.i.d. samples with the model's own seed.
pub fn draw_multisample(model: &UncertaintyModel, k: usize) -> Result<SampleSet> {
    draw_multisample_with_seed(model, k, model.seed())
}

/// Draws `k` i.i.d. samples from an explicit seed (validation streams use a
/// seed independent of the training one).
pub fn draw_multisample_with_seed(
    model: &UncertaintyModel,
    k: usize,
    seed: u64,
) -> Result<SampleSet> {
    model.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(k);
    for _ in 0..k {
        draws.push(draw_one(model, &mut rng)?);
    }
    Ok(SampleSet {
        kind: model.kind_name(),
        sample_dim: model.sample_dim(),
        seed,
        draws,
    })
}

fn draw_one(model: &UncertaintyModel, rng: &mut ChaCha12Rng) -> Result<Draw> {
    match model {
        UncertaintyModel::AggregateBand {
            dim,
            lower_nominal,
            upper_nominal,
            lower_law,
            upper_law,
            fixup,
            ..
        } => {
            const MAX_RESAMPLE: usize = 1000;
            for _ in 0..MAX_RESAMPLE {
                let mut lower =
                    DVector::from_fn(*dim, |j, _| lower_nominal[j] + lower_law.sample(rng));
                let mut upper =
                    DVector::from_fn(*dim, |j, _| upper_nominal[j] + upper_law.sample(rng));
                let inverted = (0..*dim).any(|j| lower[j] > upper[j]);
                if inverted {
                    match fixup {
                        BoundFixup::Resample => continue,
                        BoundFixup::Swap => {
                            for j in 0..*dim {
                                if lower[j] > upper[j] {
                                    let tmp = lower[j];
                                    lower[j] = upper[j];
                                    upper[j] = tmp;
                                }
                            }
                        }
                    }
                }
                return Ok(Draw::Band { lower, upper });
            }
            Err(Error::InvalidDistributionParams(
                "band bounds stayed inverted after 1000 redraws".into(),
            ))
        }
        UncertaintyModel::GenericAffine {
            dim,
            direction,
            offset_nominal,
            offset_law,
            ..
        } => {
            let a = match direction {
                DirectionLaw::Fixed(v) => v / v.norm(),
                DirectionLaw::Sphere => {
                    let normal = Normal::new(0.0, 1.0).expect("unit normal");
                    loop {
                        let v = DVector::from_fn(*dim, |_, _| rng.sample(normal));
                        let norm = v.norm();
                        if norm > 1e-12 {
                            break v / norm;
                        }
                    }
                }
            };
            let b = offset_nominal + offset_law.sample(rng);
            Ok(Draw::Affine { a, b })
        }
    }
}

/// Where a row of a built domain came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowOrigin {
    /// A face of the deterministic box: variable index and side.
    BoxFace { var: usize, upper: bool },
    /// A sampled constraint: owning draw and row offset inside the draw.
    Sample { draw: usize, row: usize },
}

impl RowOrigin {
    pub fn draw_index(&self) -> Option<usize> {
        match self {
            RowOrigin::Sample { draw, .. } => Some(*draw),
            RowOrigin::BoxFace { .. } => None,
        }
    }
}

/// A sampled feasibility domain with per-row provenance.
#[derive(Debug, Clone)]
pub struct Domain {
    pub polytope: Polytope,
    pub origins: Vec<RowOrigin>,
}

impl Domain {
    /// Indices of rows that originate from samples.
    pub fn sampled_row_indices(&self) -> Vec<usize> {
        (0..self.origins.len())
            .filter(|&i| matches!(self.origins[i], RowOrigin::Sample { .. }))
            .collect()
    }

    /// The sample-originated rows as their own polytope, with the draw index
    /// of each row.
    pub fn coupling(&self) -> (Polytope, Vec<usize>) {
        let idx = self.sampled_row_indices();
        let draws = idx
            .iter()
            .map(|&i| match self.origins[i] {
                RowOrigin::Sample { draw, .. } => draw,
                RowOrigin::BoxFace { .. } => unreachable!(),
            })
            .collect();
        (self.polytope.select_rows(&idx), draws)
    }
}

/// Options for [`build_domain`] / [`reduce_to_aggregate`].
#[derive(Debug, Clone, Copy)]
pub struct DomainOptions {
    /// Run the redundancy pass so that rows correspond to facets.
    pub prune: bool,
    pub tol: f64,
}

impl Default for DomainOptions {
    fn default() -> Self {
        Self {
            prune: true,
            tol: REDUNDANCY_TOL,
        }
    }
}

/// Stacks the deterministic box with the sampled rows (lifted to decision
/// space), normalizes every row, optionally prunes redundancy, and records
/// per-row provenance.
pub fn build_domain(
    x_box: &BoxSet,
    samples: &SampleSet,
    agents: usize,
    options: DomainOptions,
) -> Result<Domain> {
    let dim = x_box.dim();
    let rows = samples.decision_rows(agents);
    for (a, _, _) in &rows {
        if a.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "sampled row",
                expected: dim,
                got: a.len(),
            });
        }
    }
    let m = 2 * dim + rows.len();
    let mut a = DMatrix::<f64>::zeros(m, dim);
    let mut b = DVector::<f64>::zeros(m);
    let mut origins = Vec::with_capacity(m);
    let box_poly = x_box.to_polytope();
    a.view_mut((0, 0), (2 * dim, dim)).copy_from(box_poly.rows());
    b.rows_mut(0, 2 * dim).copy_from(box_poly.rhs());
    for i in 0..dim {
        origins.push(RowOrigin::BoxFace {
            var: i,
            upper: true,
        });
    }
    for i in 0..dim {
        origins.push(RowOrigin::BoxFace {
            var: i,
            upper: false,
        });
    }
    let mut per_draw_offset = vec![0usize; samples.len()];
    for (r, (row, rhs, draw)) in rows.into_iter().enumerate() {
        let i = 2 * dim + r;
        for j in 0..dim {
            a[(i, j)] = row[j];
        }
        b[i] = rhs;
        origins.push(RowOrigin::Sample {
            draw,
            row: per_draw_offset[draw],
        });
        per_draw_offset[draw] += 1;
    }
    let polytope = normalize_rows(&a, &b)?;
    let (polytope, origins) = if options.prune {
        let (pruned, kept) = polytope.pruned(options.tol)?;
        let origins = kept.iter().map(|&i| origins[i]).collect();
        (pruned, origins)
    } else {
        (polytope, origins)
    };
    if !polytope.is_feasible()? {
        return Err(Error::EmptyDomain);
    }
    Ok(Domain { polytope, origins })
}

/// Aggregate-space reduction for band constraints: the aggregate box image
/// intersected with every sampled band, with provenance.
pub struct AggregateReduction {
    /// Image of the product box under the averaging map.
    pub x_box: BoxSet,
    pub domain: Domain,
}

/// Projects an aggregate-band problem to `σ`-space.
///
/// `lower`/`upper` are the per-agent box bounds. Fails with
/// [`Error::UnsupportedKind`] for generic-affine samples, whose rows do not
/// factor through the aggregate.
pub fn reduce_to_aggregate(
    lower: &[DVector<f64>],
    upper: &[DVector<f64>],
    samples: &SampleSet,
    options: DomainOptions,
) -> Result<AggregateReduction> {
    if samples.kind != "aggregate-band" {
        return Err(Error::UnsupportedKind(
            "aggregate reduction requires aggregate-band samples",
        ));
    }
    let agents = lower.len();
    if agents == 0 || upper.len() != agents {
        return Err(Error::DimensionMismatch {
            what: "per-agent bounds",
            expected: agents.max(1),
            got: upper.len(),
        });
    }
    let n = samples.sample_dim;
    let mut lo = DVector::<f64>::zeros(n);
    let mut hi = DVector::<f64>::zeros(n);
    for i in 0..agents {
        if lower[i].len() != n || upper[i].len() != n {
            return Err(Error::DimensionMismatch {
                what: "per-agent bound dimension",
                expected: n,
                got: lower[i].len(),
            });
        }
        for j in 0..n {
            lo[j] += lower[i][j] / agents as f64;
            hi[j] += upper[i][j] / agents as f64;
        }
    }
    let x_box = BoxSet::new(lo, hi)?;
    // The reduction is a build in σ-space with a single averaged agent.
    let domain = build_domain(&x_box, samples, 1, options)?;
    Ok(AggregateReduction { x_box, domain })
}

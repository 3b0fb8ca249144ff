//! Game definitions and their variational-inequality maps.
//!
//! The quadratic-aggregative model covers costs `x_iᵀ(C σ(x) + d)` with
//! `σ(x) = (1/N) Σ x_i`; a callback model admits arbitrary gradient maps with
//! user-supplied monotonicity and Lipschitz constants.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxSet;

/// Which equilibrium map the VI uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    /// Nash: each agent accounts for its own influence on the aggregate.
    Ne,
    /// Wardrop: agents treat the aggregate as fixed.
    We,
}

/// Gradient callback for non-quadratic games.
pub type GradientFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub enum CostModel {
    /// `J_i(x) = x_iᵀ(C σ(x) + d)` with the symmetric part of `C` positive
    /// definite.
    QuadraticAggregative { c: DMatrix<f64>, d: DVector<f64> },
    /// User-supplied joint gradient map with declared constants.
    Callback {
        eval: GradientFn,
        lipschitz: f64,
        alpha: f64,
    },
}

impl fmt::Debug for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostModel::QuadraticAggregative { c, d } => f
                .debug_struct("QuadraticAggregative")
                .field("c", c)
                .field("d", d)
                .finish(),
            CostModel::Callback {
                lipschitz, alpha, ..
            } => f
                .debug_struct("Callback")
                .field("lipschitz", lipschitz)
                .field("alpha", alpha)
                .finish(),
        }
    }
}

/// A population game: `agents` players each choosing a point of their box in
/// `ℝ^dim`, coupled through the cost model.
#[derive(Debug, Clone)]
pub struct GameSpec {
    pub agents: usize,
    pub dim: usize,
    pub lower: Vec<DVector<f64>>,
    pub upper: Vec<DVector<f64>>,
    pub cost: CostModel,
    pub map_kind: MapKind,
}

/// Componentwise mean of the `agents` blocks of `x`.
pub fn aggregate(x: &DVector<f64>, agents: usize, dim: usize) -> Result<DVector<f64>> {
    if x.len() != agents * dim {
        return Err(Error::DimensionMismatch {
            what: "stacked decision vector",
            expected: agents * dim,
            got: x.len(),
        });
    }
    let mut sigma = DVector::<f64>::zeros(dim);
    for i in 0..agents {
        for j in 0..dim {
            sigma[j] += x[i * dim + j];
        }
    }
    sigma /= agents as f64;
    Ok(sigma)
}

fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn max_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

impl GameSpec {
    pub fn new(
        agents: usize,
        dim: usize,
        lower: Vec<DVector<f64>>,
        upper: Vec<DVector<f64>>,
        cost: CostModel,
        map_kind: MapKind,
    ) -> Result<Self> {
        if agents == 0 || dim == 0 {
            return Err(Error::OutOfRange(
                "agent count and decision dimension must be at least 1".into(),
            ));
        }
        if lower.len() != agents || upper.len() != agents {
            return Err(Error::DimensionMismatch {
                what: "per-agent box bounds",
                expected: agents,
                got: lower.len().min(upper.len()),
            });
        }
        for i in 0..agents {
            if lower[i].len() != dim || upper[i].len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "box bound dimension",
                    expected: dim,
                    got: lower[i].len().min(upper[i].len()),
                });
            }
            for j in 0..dim {
                if !(lower[i][j] <= upper[i][j]) {
                    return Err(Error::OutOfRange(format!(
                        "agent {i} bound {j}: lower {} > upper {}",
                        lower[i][j], upper[i][j]
                    )));
                }
            }
        }
        if let CostModel::QuadraticAggregative { c, d } = &cost {
            if c.nrows() != dim || c.ncols() != dim || d.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "quadratic cost parameters",
                    expected: dim,
                    got: c.nrows(),
                });
            }
            let lambda_min = min_symmetric_eigenvalue(c);
            if lambda_min <= 0.0 {
                return Err(Error::OutOfRange(format!(
                    "symmetric part of C must be positive definite (min eigenvalue {lambda_min:e})"
                )));
            }
        }
        Ok(Self {
            agents,
            dim,
            lower,
            upper,
            cost,
            map_kind,
        })
    }

    /// Convenience constructor for identical per-agent boxes.
    pub fn uniform_box(
        agents: usize,
        dim: usize,
        lower: DVector<f64>,
        upper: DVector<f64>,
        cost: CostModel,
        map_kind: MapKind,
    ) -> Result<Self> {
        Self::new(
            agents,
            dim,
            vec![lower; agents],
            vec![upper; agents],
            cost,
            map_kind,
        )
    }

    pub fn decision_len(&self) -> usize {
        self.agents * self.dim
    }

    /// The product box `X = Π X_i` as one stacked box.
    pub fn stacked_box(&self) -> BoxSet {
        let n = self.decision_len();
        let mut lo = DVector::<f64>::zeros(n);
        let mut hi = DVector::<f64>::zeros(n);
        for i in 0..self.agents {
            for j in 0..self.dim {
                lo[i * self.dim + j] = self.lower[i][j];
                hi[i * self.dim + j] = self.upper[i][j];
            }
        }
        BoxSet { lower: lo, upper: hi }
    }

    /// Box of the aggregate `σ(x)` as `x` ranges over the product box.
    pub fn aggregate_box(&self) -> BoxSet {
        let n = self.agents as f64;
        let mut lo = DVector::<f64>::zeros(self.dim);
        let mut hi = DVector::<f64>::zeros(self.dim);
        for i in 0..self.agents {
            for j in 0..self.dim {
                lo[j] += self.lower[i][j] / n;
                hi[j] += self.upper[i][j] / n;
            }
        }
        BoxSet { lower: lo, upper: hi }
    }

    pub fn aggregate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        aggregate(x, self.agents, self.dim)
    }

    /// Social cost `E(x) = σᵀCσ + dᵀσ` of the quadratic-aggregative game —
    /// the efficiency axis of the robustness trade-off.
    pub fn potential(&self, x: &DVector<f64>) -> Result<f64> {
        let CostModel::QuadraticAggregative { c, d } = &self.cost else {
            return Err(Error::UnsupportedModel);
        };
        let sigma = self.aggregate(x)?;
        Ok((sigma.transpose() * c * &sigma)[(0, 0)] + d.dot(&sigma))
    }

    /// Line integral `Φ(x) = N(½σᵀCσ + dᵀσ)` of the Wardrop map.
    ///
    /// When `C` is symmetric, `∇Φ = F_WE` exactly, so the variational
    /// equilibria minimize Φ over the feasible set. Note the ½: the social
    /// cost [`GameSpec::potential`] is not the integral of the map, though
    /// both are minimized at the same corner when the unconstrained
    /// minimizers lie outside the sampled domain.
    pub fn wardrop_potential(&self, x: &DVector<f64>) -> Result<f64> {
        let CostModel::QuadraticAggregative { c, d } = &self.cost else {
            return Err(Error::UnsupportedModel);
        };
        let sigma = self.aggregate(x)?;
        let quad = 0.5 * (sigma.transpose() * c * &sigma)[(0, 0)];
        Ok(self.agents as f64 * (quad + d.dot(&sigma)))
    }

    /// The single-agent game over `σ` that carries the Wardrop dynamics of a
    /// quadratic-aggregative population.
    pub fn aggregate_game(&self) -> Result<GameSpec> {
        let CostModel::QuadraticAggregative { c, d } = &self.cost else {
            return Err(Error::UnsupportedModel);
        };
        if self.map_kind != MapKind::We {
            return Err(Error::UnsupportedKind(
                "aggregate reduction is exact only for the Wardrop map",
            ));
        }
        let agg_box = self.aggregate_box();
        GameSpec::new(
            1,
            self.dim,
            vec![agg_box.lower],
            vec![agg_box.upper],
            CostModel::QuadraticAggregative {
                c: c.clone(),
                d: d.clone(),
            },
            MapKind::We,
        )
    }

    /// Builds the VI map `F` together with its Lipschitz and monotonicity
    /// constants (exact for the quadratic model, user-supplied otherwise).
    pub fn vi_map(&self) -> Result<ViMap> {
        match &self.cost {
            CostModel::QuadraticAggregative { c, d } => {
                let n = self.dim;
                let agents = self.agents;
                let total = self.decision_len();
                let mut linear = DMatrix::<f64>::zeros(total, total);
                for i in 0..agents {
                    for j in 0..agents {
                        for r in 0..n {
                            for s in 0..n {
                                linear[(i * n + r, j * n + s)] += c[(r, s)] / agents as f64;
                            }
                        }
                    }
                }
                if self.map_kind == MapKind::Ne {
                    for i in 0..agents {
                        for r in 0..n {
                            for s in 0..n {
                                linear[(i * n + r, i * n + s)] += c[(s, r)] / agents as f64;
                            }
                        }
                    }
                }
                let lipschitz = max_singular_value(&linear);
                let alpha = min_symmetric_eigenvalue(&linear).max(0.0);
                Ok(ViMap {
                    dims: (agents, n),
                    lipschitz,
                    alpha,
                    form: MapForm::Quadratic {
                        c: c.clone(),
                        d: d.clone(),
                        map_kind: self.map_kind,
                        linear,
                    },
                })
            }
            CostModel::Callback {
                eval,
                lipschitz,
                alpha,
            } => {
                if !(*lipschitz > 0.0) || *alpha < 0.0 {
                    return Err(Error::OutOfRange(format!(
                        "callback constants L={lipschitz}, alpha={alpha}"
                    )));
                }
                Ok(ViMap {
                    dims: (self.agents, self.dim),
                    lipschitz: *lipschitz,
                    alpha: *alpha,
                    form: MapForm::Callback(eval.clone()),
                })
            }
        }
    }
}

enum MapForm {
    Quadratic {
        c: DMatrix<f64>,
        d: DVector<f64>,
        map_kind: MapKind,
        linear: DMatrix<f64>,
    },
    Callback(GradientFn),
}

/// The VI map `F : ℝ^{nN} → ℝ^{nN}` with its declared constants.
pub struct ViMap {
    dims: (usize, usize),
    pub lipschitz: f64,
    pub alpha: f64,
    form: MapForm,
}

impl ViMap {
    pub fn decision_len(&self) -> usize {
        self.dims.0 * self.dims.1
    }

    /// The matrix of the affine map, when the model is quadratic.
    pub fn linear_operator(&self) -> Option<&DMatrix<f64>> {
        match &self.form {
            MapForm::Quadratic { linear, .. } => Some(linear),
            MapForm::Callback(_) => None,
        }
    }

    /// Evaluates `F(x)`.
    ///
    /// Wardrop blocks are all `Cσ(x) + d`; Nash blocks add the own-influence
    /// term `(1/N) Cᵀ x_i` from differentiating `x_iᵀ(Cσ(x) + d)`.
    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (agents, n) = self.dims;
        if x.len() != agents * n {
            return Err(Error::DimensionMismatch {
                what: "VI map argument",
                expected: agents * n,
                got: x.len(),
            });
        }
        let out = match &self.form {
            MapForm::Quadratic {
                c, d, map_kind, ..
            } => {
                let sigma = aggregate(x, agents, n)?;
                let base = c * &sigma + d;
                let mut out = DVector::<f64>::zeros(agents * n);
                for i in 0..agents {
                    for r in 0..n {
                        out[i * n + r] = base[r];
                    }
                }
                if *map_kind == MapKind::Ne {
                    for i in 0..agents {
                        let xi = x.rows(i * n, n);
                        let own = c.transpose() * xi / agents as f64;
                        for r in 0..n {
                            out[i * n + r] += own[r];
                        }
                    }
                }
                out
            }
            MapForm::Callback(f) => {
                let out = f(x);
                if out.len() != agents * n {
                    return Err(Error::DimensionMismatch {
                        what: "callback output",
                        expected: agents * n,
                        got: out.len(),
                    });
                }
                out
            }
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput { what: "VI map" });
        }
        Ok(out)
    }

    /// Random-pair check of the declared Lipschitz and monotonicity
    /// constants inside `bounds`; informative for callback models, exact by
    /// construction for the quadratic one.
    pub fn spot_check(&self, bounds: &BoxSet, seed: u64, pairs: usize) -> Result<SpotCheck> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dim = self.decision_len();
        let mut worst_lipschitz = 0.0f64;
        let mut worst_monotone = f64::INFINITY;
        let sample = |rng: &mut ChaCha12Rng| -> DVector<f64> {
            DVector::from_fn(dim, |i, _| {
                let t: f64 = rng.random();
                bounds.lower[i] + t * (bounds.upper[i] - bounds.lower[i])
            })
        };
        for _ in 0..pairs {
            let x = sample(&mut rng);
            let y = sample(&mut rng);
            let dx = &x - &y;
            let norm = dx.norm();
            if norm < 1e-12 {
                continue;
            }
            let df = self.eval(&x)? - self.eval(&y)?;
            worst_lipschitz = worst_lipschitz.max(df.norm() / norm);
            worst_monotone = worst_monotone.min(dx.dot(&df) / (norm * norm));
        }
        let check = SpotCheck {
            observed_lipschitz: worst_lipschitz,
            observed_monotonicity: worst_monotone,
            declared_lipschitz: self.lipschitz,
            declared_alpha: self.alpha,
        };
        if !check.consistent(1e-9) {
            log::warn!(
                "declared VI constants look optimistic: observed L={:.6e} (declared {:.6e}), \
                 observed alpha={:.6e} (declared {:.6e})",
                check.observed_lipschitz,
                check.declared_lipschitz,
                check.observed_monotonicity,
                check.declared_alpha
            );
        }
        Ok(check)
    }
}

/// Result of a random-pair constant check.
#[derive(Debug, Clone, Copy)]
pub struct SpotCheck {
    pub observed_lipschitz: f64,
    pub observed_monotonicity: f64,
    pub declared_lipschitz: f64,
    pub declared_alpha: f64,
}

impl SpotCheck {
    pub fn consistent(&self, tol: f64) -> bool {
        self.observed_lipschitz <= self.declared_lipschitz * (1.0 + tol) + tol
            && self.observed_monotonicity >= self.declared_alpha - tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quad_game(agents: usize, map_kind: MapKind) -> GameSpec {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.5]);
        let d = DVector::from_vec(vec![-4.0, -4.0]);
        GameSpec::uniform_box(
            agents,
            2,
            DVector::zeros(2),
            DVector::from_element(2, 3.5),
            CostModel::QuadraticAggregative { c, d },
            map_kind,
        )
        .unwrap()
    }

    #[test]
    fn aggregate_is_the_mean() {
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let s = aggregate(&x, 3, 1).unwrap();
        assert_eq!(s[0], 2.0);
    }

    #[test]
    fn aggregate_of_equal_blocks() {
        let v = DVector::from_vec(vec![0.7, -1.2]);
        let mut x = DVector::zeros(10);
        for i in 0..5 {
            x.rows_mut(i * 2, 2).copy_from(&v);
        }
        let s = aggregate(&x, 5, 2).unwrap();
        assert_relative_eq!(s[0], v[0], epsilon = 1e-15);
        assert_relative_eq!(s[1], v[1], epsilon = 1e-15);
    }

    #[test]
    fn aggregate_rejects_bad_length() {
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            aggregate(&x, 2, 2),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn wardrop_blocks_are_identical() {
        // C = I₂, d = (1,0), σ = (2,3) → every block (3,3).
        let c = DMatrix::identity(2, 2);
        let d = DVector::from_vec(vec![1.0, 0.0]);
        let game = GameSpec::uniform_box(
            3,
            2,
            DVector::from_element(2, -10.0),
            DVector::from_element(2, 10.0),
            CostModel::QuadraticAggregative { c, d },
            MapKind::We,
        )
        .unwrap();
        let map = game.vi_map().unwrap();
        let mut x = DVector::zeros(6);
        for i in 0..3 {
            x[i * 2] = 2.0;
            x[i * 2 + 1] = 3.0;
        }
        let f = map.eval(&x).unwrap();
        for i in 0..3 {
            assert_relative_eq!(f[i * 2], 3.0, epsilon = 1e-12);
            assert_relative_eq!(f[i * 2 + 1], 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_point_zero_offset_maps_to_zero() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.5]);
        let d = DVector::zeros(2);
        for kind in [MapKind::We, MapKind::Ne] {
            let game = GameSpec::uniform_box(
                4,
                2,
                DVector::from_element(2, -1.0),
                DVector::from_element(2, 1.0),
                CostModel::QuadraticAggregative {
                    c: c.clone(),
                    d: d.clone(),
                },
                kind,
            )
            .unwrap();
            let f = game.vi_map().unwrap().eval(&DVector::zeros(8)).unwrap();
            assert_relative_eq!(f.norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn potential_values() {
        let game = quad_game(50, MapKind::We);
        // σ = 0 → 0.
        assert_relative_eq!(game.potential(&DVector::zeros(100)).unwrap(), 0.0);
        // C = I₂, d = 0, σ = (1,1) → 2.
        let c = DMatrix::identity(2, 2);
        let d = DVector::zeros(2);
        let simple = GameSpec::uniform_box(
            1,
            2,
            DVector::zeros(2),
            DVector::from_element(2, 2.0),
            CostModel::QuadraticAggregative { c, d },
            MapKind::We,
        )
        .unwrap();
        assert_relative_eq!(
            simple.potential(&DVector::from_element(2, 1.0)).unwrap(),
            2.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn potential_unsupported_for_callbacks() {
        let game = GameSpec::uniform_box(
            2,
            1,
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
            CostModel::Callback {
                eval: Arc::new(|x: &DVector<f64>| x.clone()),
                lipschitz: 1.0,
                alpha: 1.0,
            },
            MapKind::Ne,
        )
        .unwrap();
        assert!(matches!(
            game.potential(&DVector::zeros(2)),
            Err(Error::UnsupportedModel)
        ));
    }

    #[test]
    fn rejects_indefinite_cost() {
        let c = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let d = DVector::zeros(2);
        assert!(GameSpec::uniform_box(
            2,
            2,
            DVector::zeros(2),
            DVector::from_element(2, 1.0),
            CostModel::QuadraticAggregative { c, d },
            MapKind::We,
        )
        .is_err());
    }

    #[test]
    fn quadratic_constants_match_linear_operator() {
        for kind in [MapKind::We, MapKind::Ne] {
            let game = quad_game(7, kind);
            let map = game.vi_map().unwrap();
            let bounds = game.stacked_box();
            let check = map.spot_check(&bounds, 11, 500).unwrap();
            assert!(
                check.observed_lipschitz <= map.lipschitz + 1e-9,
                "{kind:?}: observed {} declared {}",
                check.observed_lipschitz,
                map.lipschitz
            );
            assert!(check.observed_monotonicity >= map.alpha - 1e-9);
        }
    }
}

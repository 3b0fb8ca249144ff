//! The multiplier domain ℳ: nonnegative vectors whose nonzero coordinates
//! are at least ζ, pairwise ζ-separated in sorted order, and capped by a
//! large constant that stands in for compactness.
//!
//! ℳ is a finite union of convex pieces. A piece fixes which coordinates are
//! nonzero and their strict ordering; inside a piece the constraints are a
//! chain `μ_{π(1)} ≥ μ_{π(2)} + ζ ≥ … ≥ ζ` plus the cap. Projection onto ℳ
//! projects per piece and keeps the best piece. Euclidean piece projections
//! reduce, after the shift `w_r = μ_{π(r)} + rζ`, to bounded isotonic
//! regression, solved exactly by pool-adjacent-violators plus clipping.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::qp;

/// Piece-count threshold up to which exhaustive enumeration is the default.
pub const EXHAUSTIVE_DIM_LIMIT: usize = 7;

/// How to pick candidate pieces during projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjectionMode {
    /// Exhaustive for small dimensions, sorted-cutoff candidates above
    /// [`EXHAUSTIVE_DIM_LIMIT`].
    #[default]
    Auto,
    /// Always enumerate every piece.
    Exhaustive,
}

/// The domain ℳ ⊂ ℝ₊^m of the coupling-constraint multipliers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiplierDomain {
    pub dim: usize,
    pub zeta: f64,
    pub cap: f64,
}

/// One convex piece: the listed coordinates are nonzero in this exact
/// decreasing order, all others are pinned at zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub nonzero: Vec<usize>,
}

impl MultiplierDomain {
    pub fn new(dim: usize, zeta: f64, cap: f64) -> Result<Self> {
        if !(zeta > 0.0) || !zeta.is_finite() {
            return Err(Error::OutOfRange(format!("zeta {zeta}")));
        }
        if !(cap >= zeta) {
            return Err(Error::OutOfRange(format!("cap {cap} below zeta {zeta}")));
        }
        Ok(Self { dim, zeta, cap })
    }

    /// Membership up to `tol`: every coordinate is (near) zero or in
    /// `[ζ, cap]`, and consecutive sorted nonzero coordinates are at least ζ
    /// apart. Boundary points of the closed pieces are members.
    pub fn contains(&self, mu: &DVector<f64>, tol: f64) -> bool {
        if mu.len() != self.dim {
            return false;
        }
        let mut nonzero: Vec<f64> = Vec::new();
        for &v in mu.iter() {
            if v.abs() <= tol {
                continue;
            }
            if v < self.zeta - tol || v > self.cap + tol {
                return false;
            }
            nonzero.push(v);
        }
        nonzero.sort_by(|a, b| b.partial_cmp(a).unwrap());
        nonzero.windows(2).all(|w| w[0] - w[1] >= self.zeta - tol)
    }

    /// Whether a piece with `s` nonzero coordinates is nonempty.
    fn piece_feasible(&self, s: usize) -> bool {
        s as f64 * self.zeta <= self.cap + 1e-15
    }

    /// Every piece, enumerated deterministically: by nonzero count, then
    /// lexicographically over ordered index tuples. The count is
    /// `Σ_{s=0}^{m} m!/(m−s)!`.
    pub fn pieces(&self) -> Vec<Piece> {
        let mut out = Vec::new();
        for s in 0..=self.dim {
            if !self.piece_feasible(s) {
                continue;
            }
            for perm in (0..self.dim).permutations(s) {
                out.push(Piece { nonzero: perm });
            }
        }
        out
    }

    /// Candidate pieces consistent with the descending sort of `z`: one per
    /// zero-cutoff along that order.
    pub fn pruned_pieces(&self, z: &DVector<f64>) -> Vec<Piece> {
        let order = crate::tightening::permutation_of(z);
        let mut out = Vec::with_capacity(self.dim + 1);
        for s in 0..=self.dim {
            if !self.piece_feasible(s) {
                break;
            }
            out.push(Piece {
                nonzero: order[..s].to_vec(),
            });
        }
        out
    }

    pub fn candidate_pieces(&self, z: &DVector<f64>, mode: ProjectionMode) -> Vec<Piece> {
        match mode {
            ProjectionMode::Exhaustive => self.pieces(),
            ProjectionMode::Auto if self.dim <= EXHAUSTIVE_DIM_LIMIT => self.pieces(),
            ProjectionMode::Auto => self.pruned_pieces(z),
        }
    }

    /// Euclidean projection of `z` onto one closed piece.
    ///
    /// The chain part is isotonic regression after the ζ-shift; the constant
    /// bounds commute with pool-adjacent-violators, so clipping the
    /// unbounded solution is exact.
    pub fn project_piece(&self, piece: &Piece, z: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::<f64>::zeros(self.dim);
        self.project_piece_into(piece, z, &mut out);
        out
    }

    /// Allocation-free variant of [`MultiplierDomain::project_piece`] for
    /// the iteration hot path; pieces up to 32 nonzero coordinates run on
    /// stack buffers.
    pub fn project_piece_into(&self, piece: &Piece, z: &DVector<f64>, out: &mut DVector<f64>) {
        out.fill(0.0);
        let s = piece.nonzero.len();
        if s == 0 {
            return;
        }
        let zeta = self.zeta;
        let lo = (s as f64 + 1.0) * zeta;
        let hi = self.cap + zeta;
        if s <= 32 {
            // Shift w_r = v_r + (r+1)ζ (0-based r): the chain becomes plain
            // nonincreasing isotonicity with constant bounds, solved by PAV
            // over block means.
            let mut means = [0.0f64; 32];
            let mut counts = [0usize; 32];
            let mut blocks = 0usize;
            for r in 0..s {
                means[blocks] = z[piece.nonzero[r]] + (r as f64 + 1.0) * zeta;
                counts[blocks] = 1;
                blocks += 1;
                while blocks > 1 && means[blocks - 2] < means[blocks - 1] {
                    let merged = (means[blocks - 2] * counts[blocks - 2] as f64
                        + means[blocks - 1] * counts[blocks - 1] as f64)
                        / (counts[blocks - 2] + counts[blocks - 1]) as f64;
                    counts[blocks - 2] += counts[blocks - 1];
                    means[blocks - 2] = merged;
                    blocks -= 1;
                }
            }
            let mut r = 0usize;
            for b in 0..blocks {
                let clipped = means[b].clamp(lo, hi);
                for _ in 0..counts[b] {
                    out[piece.nonzero[r]] = clipped - (r as f64 + 1.0) * zeta;
                    r += 1;
                }
            }
        } else {
            let y: Vec<f64> = (0..s)
                .map(|r| z[piece.nonzero[r]] + (r as f64 + 1.0) * zeta)
                .collect();
            let w = pav_nonincreasing(&y);
            for r in 0..s {
                out[piece.nonzero[r]] = w[r].clamp(lo, hi) - (r as f64 + 1.0) * zeta;
            }
        }
    }

    /// Euclidean projection onto ℳ: the best piece projection, ties broken
    /// by the piece enumeration order. Returns the point and the piece.
    pub fn project(&self, z: &DVector<f64>, mode: ProjectionMode) -> Result<(DVector<f64>, Piece)> {
        let candidates = self.candidate_pieces(z, mode);
        if candidates.is_empty() {
            return Err(Error::NoFeasiblePiece);
        }
        let mut best: Option<(f64, DVector<f64>, Piece)> = None;
        for piece in candidates {
            let p = self.project_piece(&piece, z);
            let d = (&p - z).norm_squared();
            if best.as_ref().is_none_or(|(bd, _, _)| d < *bd) {
                best = Some((d, p, piece));
            }
        }
        let (_, p, piece) = best.expect("nonempty candidate set");
        Ok((p, piece))
    }

    /// Projection onto ℳ in a general positive definite metric `d_s`:
    /// `argmin (μ−z)ᵀ D_s (μ−z)`, solved per piece by a small dense
    /// active-set quadratic program over the chain constraints.
    pub fn project_metric(
        &self,
        z: &DVector<f64>,
        d_s: &DMatrix<f64>,
        mode: ProjectionMode,
    ) -> Result<(DVector<f64>, Piece)> {
        if d_s.nrows() != self.dim || d_s.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "projection metric",
                expected: self.dim,
                got: d_s.nrows(),
            });
        }
        let candidates = self.candidate_pieces(z, mode);
        if candidates.is_empty() {
            return Err(Error::NoFeasiblePiece);
        }
        let mut best: Option<(f64, DVector<f64>, Piece)> = None;
        for piece in candidates {
            let p = self.project_piece_metric(&piece, z, d_s)?;
            let diff = &p - z;
            let d = (diff.transpose() * d_s * &diff)[(0, 0)];
            if best.as_ref().is_none_or(|(bd, _, _)| d < *bd) {
                best = Some((d, p, piece));
            }
        }
        let (_, p, piece) = best.expect("nonempty candidate set");
        Ok((p, piece))
    }

    fn project_piece_metric(
        &self,
        piece: &Piece,
        z: &DVector<f64>,
        d_s: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        let s = piece.nonzero.len();
        let mut out = DVector::<f64>::zeros(self.dim);
        if s == 0 {
            return Ok(out);
        }
        // Reduce to the nonzero coordinates v ∈ ℝˢ through μ = E v:
        // Hessian 2 EᵀD_sE, gradient −2 EᵀD_s z.
        let mut h = DMatrix::<f64>::zeros(s, s);
        for r in 0..s {
            for c in 0..s {
                h[(r, c)] = 2.0 * d_s[(piece.nonzero[r], piece.nonzero[c])];
            }
        }
        let dz = d_s * z;
        let g = DVector::from_fn(s, |r, _| -2.0 * dz[piece.nonzero[r]]);
        // Chain constraints: v_{r+1} − v_r ≤ −ζ, −v_{s−1} ≤ −ζ, v_r ≤ cap.
        let mut gi = DMatrix::<f64>::zeros(s + s, s);
        let mut hi = DVector::<f64>::zeros(s + s);
        for r in 0..s.saturating_sub(1) {
            gi[(r, r + 1)] = 1.0;
            gi[(r, r)] = -1.0;
            hi[r] = -self.zeta;
        }
        gi[(s - 1, s - 1)] = -1.0;
        hi[s - 1] = -self.zeta;
        for r in 0..s {
            gi[(s + r, r)] = 1.0;
            hi[s + r] = self.cap;
        }
        // Feasible start: the Euclidean piece projection.
        let eu = self.project_piece(piece, z);
        let start = DVector::from_fn(s, |r, _| eu[piece.nonzero[r]]);
        let v = qp::minimize(&h, &g, &gi, &hi, start)?;
        for r in 0..s {
            out[piece.nonzero[r]] = v[r];
        }
        Ok(out)
    }
}

/// Pool-adjacent-violators for nonincreasing isotonic regression with unit
/// weights.
fn pav_nonincreasing(y: &[f64]) -> Vec<f64> {
    let mut means: Vec<f64> = Vec::with_capacity(y.len());
    let mut counts: Vec<usize> = Vec::with_capacity(y.len());
    for &v in y {
        means.push(v);
        counts.push(1);
        while means.len() > 1 {
            let k = means.len();
            if means[k - 2] >= means[k - 1] {
                break;
            }
            let merged =
                (means[k - 2] * counts[k - 2] as f64 + means[k - 1] * counts[k - 1] as f64)
                    / (counts[k - 2] + counts[k - 1]) as f64;
            means.truncate(k - 1);
            counts[k - 2] += counts[k - 1];
            counts.truncate(k - 1);
            means[k - 2] = merged;
        }
    }
    let mut out = Vec::with_capacity(y.len());
    for (mean, count) in means.iter().zip(counts.iter()) {
        out.extend(std::iter::repeat_n(*mean, *count));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fig_config() -> MultiplierDomain {
        MultiplierDomain::new(3, 0.2, 10.0).unwrap()
    }

    #[test]
    fn piece_count_matches_ordered_subset_formula() {
        // Σ_{s=0}^{m} m!/(m−s)! = 16 for m = 3.
        assert_eq!(fig_config().pieces().len(), 16);
        let d2 = MultiplierDomain::new(2, 0.1, 5.0).unwrap();
        assert_eq!(d2.pieces().len(), 5);
    }

    #[test]
    fn membership_examples() {
        let dom = fig_config();
        let tol = 1e-9;
        assert!(dom.contains(&DVector::zeros(3), tol));
        assert!(dom.contains(&DVector::from_vec(vec![0.2, 0.0, 0.0]), tol));
        assert!(dom.contains(&DVector::from_vec(vec![0.5, 0.9, 0.0]), tol));
        // Below ζ.
        assert!(!dom.contains(&DVector::from_vec(vec![0.1, 0.0, 0.0]), tol));
        // Gap below ζ.
        assert!(!dom.contains(&DVector::from_vec(vec![0.5, 0.6, 0.0]), tol));
        // Equal nonzero coordinates violate the gap rule.
        assert!(!dom.contains(&DVector::from_vec(vec![0.5, 0.5, 0.0]), tol));
        // Above the cap.
        assert!(!dom.contains(&DVector::from_vec(vec![11.0, 0.0, 0.0]), tol));
    }

    #[test]
    fn projection_is_idempotent_on_members() {
        let dom = fig_config();
        let mu = DVector::from_vec(vec![1.0, 0.5, 0.0]);
        let (p, _) = dom.project(&mu, ProjectionMode::Auto).unwrap();
        assert_relative_eq!((p - mu).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn scalar_below_half_zeta_goes_to_zero() {
        // m = 1, ζ = 0.2: 0.05 is nearer to 0 than to ζ.
        let dom = MultiplierDomain::new(1, 0.2, 10.0).unwrap();
        let (p, piece) = dom
            .project(&DVector::from_vec(vec![0.05]), ProjectionMode::Auto)
            .unwrap();
        assert_eq!(p[0], 0.0);
        assert!(piece.nonzero.is_empty());
        // …and 0.15 is nearer to ζ.
        let (p, _) = dom
            .project(&DVector::from_vec(vec![0.15]), ProjectionMode::Auto)
            .unwrap();
        assert_relative_eq!(p[0], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn cap_bounds_the_projection() {
        let dom = MultiplierDomain::new(2, 0.2, 1.0).unwrap();
        let (p, _) = dom
            .project(&DVector::from_vec(vec![2.0, 0.0]), ProjectionMode::Auto)
            .unwrap();
        assert_relative_eq!(p[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn chain_projection_respects_gap() {
        let dom = fig_config();
        // Both coordinates want 0.5; the piece forces a ζ gap around it.
        let piece = Piece {
            nonzero: vec![0, 1],
        };
        let p = dom.project_piece(&piece, &DVector::from_vec(vec![0.5, 0.5, 0.0]));
        assert_relative_eq!(p[0], 0.6, epsilon = 1e-12);
        assert_relative_eq!(p[1], 0.4, epsilon = 1e-12);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn exhaustive_projection_matches_fine_grid() {
        let dom = fig_config();
        let mut rng_state = 5u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..20 {
            let z = DVector::from_fn(3, |_, _| next() * 1.5 - 0.25);
            let (p, _) = dom.project(&z, ProjectionMode::Exhaustive).unwrap();
            let mut best = f64::INFINITY;
            let step = 0.05;
            let steps = (1.5 / step) as i64;
            for i in 0..=steps {
                for j in 0..=steps {
                    for k in 0..=steps {
                        let cand = DVector::from_vec(vec![
                            i as f64 * step,
                            j as f64 * step,
                            k as f64 * step,
                        ]);
                        if !dom.contains(&cand, 1e-12) {
                            continue;
                        }
                        let d = (&cand - &z).norm_squared();
                        if d < best {
                            best = d;
                        }
                    }
                }
            }
            assert!(
                (&p - &z).norm_squared() <= best + 1e-9,
                "projection {p:?} beaten by the grid for {z:?}"
            );
        }
    }

    #[test]
    fn pruned_candidates_cover_the_sorted_cutoffs() {
        let dom = MultiplierDomain::new(9, 0.1, 100.0).unwrap();
        let z = DVector::from_fn(9, |i, _| (9 - i) as f64 * 0.3);
        let pieces = dom.pruned_pieces(&z);
        assert_eq!(pieces.len(), 10);
        assert_eq!(pieces[9].nonzero.len(), 9);
        // Auto mode uses the pruned set above the exhaustive limit.
        let (p, _) = dom.project(&z, ProjectionMode::Auto).unwrap();
        assert!(dom.contains(&p, 1e-9));
    }

    #[test]
    fn metric_projection_agrees_with_euclidean_for_identity() {
        let dom = fig_config();
        let eye = DMatrix::<f64>::identity(3, 3);
        let mut rng_state = 77u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..25 {
            let z = DVector::from_fn(3, |_, _| next() * 2.0 - 0.5);
            let (pe, _) = dom.project(&z, ProjectionMode::Exhaustive).unwrap();
            let (pm, _) = dom
                .project_metric(&z, &eye, ProjectionMode::Exhaustive)
                .unwrap();
            let de = (&pe - &z).norm_squared();
            let dm = (&pm - &z).norm_squared();
            assert_relative_eq!(de, dm, epsilon = 1e-8);
        }
    }
}

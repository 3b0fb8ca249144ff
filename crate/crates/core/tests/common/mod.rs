//! Independent oracles for the integration suites: brute-force routes that
//! never touch the library's own solution paths.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use num::rational::BigRational;
use num::traits::{FromPrimitive, One, ToPrimitive, Zero};
use num::BigInt;

/// Deterministic xorshift-free LCG for oracle-side randomness.
pub struct OracleRng(u64);

impl OracleRng {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493))
    }

    pub fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn in_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn vector(&mut self, dim: usize, lo: f64, hi: f64) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| self.in_range(lo, hi))
    }
}

/// All vertices of `{x : A x ≤ b}` by enumerating row subsets of size `d`
/// (intended for d ≤ 3 and small row counts).
pub fn enumerate_vertices(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Vec<DVector<f64>> {
    let (m, d) = (a.nrows(), a.ncols());
    let mut vertices = Vec::new();
    let mut subset = vec![0usize; d];
    fn combos(
        start: usize,
        depth: usize,
        m: usize,
        subset: &mut Vec<usize>,
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        tol: f64,
        out: &mut Vec<DVector<f64>>,
    ) {
        let d = subset.len();
        if depth == d {
            let mut sys = DMatrix::<f64>::zeros(d, d);
            let mut rhs = DVector::<f64>::zeros(d);
            for (r, &i) in subset.iter().enumerate() {
                for c in 0..d {
                    sys[(r, c)] = a[(i, c)];
                }
                rhs[r] = b[i];
            }
            if let Some(x) = sys.full_piv_lu().solve(&rhs) {
                if x.iter().all(|v| v.is_finite()) {
                    let feasible = (0..a.nrows())
                        .all(|k| a.row(k).transpose().dot(&x) <= b[k] + tol);
                    if feasible {
                        out.push(x);
                    }
                }
            }
            return;
        }
        for i in start..m {
            subset[depth] = i;
            combos(i + 1, depth + 1, m, subset, a, b, tol, out);
        }
    }
    combos(0, 0, m, &mut subset, a, b, tol, &mut vertices);
    vertices
}

/// Support value by vertex enumeration (bounded polytopes, d ≤ 3).
pub fn vertex_support(a: &DMatrix<f64>, b: &DVector<f64>, dir: &DVector<f64>) -> f64 {
    enumerate_vertices(a, b, 1e-9)
        .iter()
        .map(|v| dir.dot(v))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Exact minimizer of the convex quadratic `σᵀQσ + gᵀσ` over a 2-d polytope
/// by enumerating the interior candidate, every edge minimizer, and every
/// vertex.
pub fn min_quadratic_2d(
    q: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> DVector<f64> {
    let sym = q + q.transpose();
    let objective = |s: &DVector<f64>| (s.transpose() * q * s)[(0, 0)] + g.dot(s);
    let feasible = |s: &DVector<f64>| {
        (0..a.nrows()).all(|k| a.row(k).transpose().dot(s) <= b[k] + 1e-9)
    };
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut push = |s: DVector<f64>| {
        if feasible(&s) {
            let v = objective(&s);
            if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                best = Some((v, s));
            }
        }
    };
    if let Some(unc) = sym.clone().full_piv_lu().solve(&(-g)) {
        push(unc);
    }
    for l in 0..a.nrows() {
        // Point on the line and its direction.
        let al = a.row(l).transpose();
        let norm2 = al.norm_squared();
        if norm2 < 1e-18 {
            continue;
        }
        let p = &al * (b[l] / norm2);
        let dir = DVector::from_vec(vec![-al[1], al[0]]);
        let quad = (dir.transpose() * q * &dir)[(0, 0)];
        let lin = (dir.transpose() * &sym * &p)[(0, 0)] + g.dot(&dir);
        if quad.abs() > 1e-15 {
            let t = -lin / (2.0 * quad);
            push(&p + &dir * t);
        }
    }
    for v in enumerate_vertices(a, b, 1e-9) {
        push(v);
    }
    best.expect("nonempty polytope").1
}

fn big_binomial(n: usize, k: usize) -> BigInt {
    let mut out = BigInt::one();
    for i in 0..k {
        out = out * BigInt::from_usize(n - i).unwrap() / BigInt::from_usize(i + 1).unwrap();
    }
    out
}

/// Exact-rational evaluation of `Σ_{i=0}^{d−1} C(K,i) εⁱ(1−ε)^{K−i}`.
pub fn rational_binom_tail(d: usize, k: usize, eps: f64) -> f64 {
    let eps_r = BigRational::from_float(eps).expect("finite eps");
    let one = BigRational::one();
    let omeps = &one - &eps_r;
    let mut sum = BigRational::zero();
    let mut eps_pow = BigRational::one();
    // (1−ε)^{K−i} built down from (1−ε)^K by division.
    let mut om_pow = BigRational::one();
    for _ in 0..k {
        om_pow *= &omeps;
    }
    for i in 0..d {
        let term = BigRational::from(big_binomial(k, i)) * &eps_pow * &om_pow;
        sum += term;
        eps_pow *= &eps_r;
        if omeps.is_zero() {
            break;
        }
        om_pow /= &omeps;
    }
    sum.to_f64().expect("tail fits in f64")
}

/// Central finite differences of a scalar function.
pub fn finite_diff_grad<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    x: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[i] += h;
        lo[i] -= h;
        (f(&hi) - f(&lo)) / (2.0 * h)
    })
}

/// Brute-force solution of the affine variational inequality
/// `find y ∈ X, μ ≥ 0 : F(y) + Aᵀμ ⊥ box, μ ⊥ (Ay − b)` with
/// `F(x) = G x + q`, by enumerating bound states and active rows.
///
/// Returns `(x, μ)`; panics if no KKT-consistent combination exists.
pub fn kkt_enumerate_affine_vi(
    g_lin: &DMatrix<f64>,
    q: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let d = lower.len();
    let m = a.nrows();
    let tol = 1e-9;
    let mut best: Option<(DVector<f64>, DVector<f64>)> = None;
    // Bound states per variable: 0 free, 1 at lower, 2 at upper.
    let mut states = vec![0u8; d];
    let combos = 3usize.pow(d as u32) * (1usize << m);
    for code in 0..combos {
        let mut c = code;
        for s in states.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        let act_mask = c;
        let active: Vec<usize> = (0..m).filter(|i| act_mask >> i & 1 == 1).collect();
        let free: Vec<usize> = (0..d).filter(|&i| states[i] == 0).collect();
        let unknowns = free.len() + active.len();
        let equations = free.len() + active.len();
        if unknowns != equations {
            continue;
        }
        // Assemble: for i free: (G x + q + Aᵀμ)_i = 0; for ℓ active: A_ℓ x = b_ℓ.
        let n_eq = free.len() + active.len();
        // x = x_fixed + contributions of free vars.
        let x_fixed = DVector::from_fn(d, |i, _| match states[i] {
            1 => lower[i],
            2 => upper[i],
            _ => 0.0,
        });
        if n_eq == 0 {
            // Every variable pinned at a bound, no active rows.
            let x = x_fixed.clone();
            let mu = DVector::<f64>::zeros(m);
            let mut ok = (0..m).all(|l| a.row(l).transpose().dot(&x) <= b[l] + tol);
            let r = g_lin * &x + q;
            for i in 0..d {
                match states[i] {
                    1 => ok &= r[i] >= -1e-7,
                    2 => ok &= r[i] <= 1e-7,
                    _ => unreachable!(),
                }
            }
            if ok && best.is_none() {
                best = Some((x, mu));
            }
            continue;
        }
        let mut sys = DMatrix::<f64>::zeros(n_eq, n_eq);
        let mut rhs = DVector::<f64>::zeros(n_eq);
        for (r, &i) in free.iter().enumerate() {
            for (cidx, &j) in free.iter().enumerate() {
                sys[(r, cidx)] = g_lin[(i, j)];
            }
            for (cidx, &l) in active.iter().enumerate() {
                sys[(r, free.len() + cidx)] = a[(l, i)];
            }
            rhs[r] = -q[i] - (0..d)
                .filter(|j| states[*j] != 0)
                .map(|j| g_lin[(i, j)] * x_fixed[j])
                .sum::<f64>();
        }
        for (r, &l) in active.iter().enumerate() {
            for (cidx, &j) in free.iter().enumerate() {
                sys[(free.len() + r, cidx)] = a[(l, j)];
            }
            rhs[free.len() + r] = b[l]
                - (0..d)
                    .filter(|j| states[*j] != 0)
                    .map(|j| a[(l, j)] * x_fixed[j])
                    .sum::<f64>();
        }
        let Some(sol) = sys.full_piv_lu().solve(&rhs) else {
            continue;
        };
        let mut x = x_fixed.clone();
        for (cidx, &j) in free.iter().enumerate() {
            x[j] = sol[cidx];
        }
        let mut mu = DVector::<f64>::zeros(m);
        for (cidx, &l) in active.iter().enumerate() {
            mu[l] = sol[free.len() + cidx];
        }
        // Feasibility and sign conditions.
        let mut ok = (0..d).all(|i| x[i] >= lower[i] - tol && x[i] <= upper[i] + tol);
        ok &= (0..m).all(|l| a.row(l).transpose().dot(&x) <= b[l] + tol);
        ok &= mu.iter().all(|&v| v >= -tol);
        if ok {
            let r = g_lin * &x + q + a.transpose() * &mu;
            for i in 0..d {
                match states[i] {
                    0 => ok &= r[i].abs() <= 1e-7,
                    1 => ok &= r[i] >= -1e-7,
                    2 => ok &= r[i] <= 1e-7,
                    _ => unreachable!(),
                }
            }
        }
        if ok && best.is_none() {
            best = Some((x, mu));
        }
    }
    best.expect("no KKT-consistent active set found")
}

/// Independent membership test for the multiplier domain: coordinates are 0
/// or in `[ζ, cap]` with sorted nonzero gaps of at least ζ.
pub fn mdomain_member(mu: &[f64], zeta: f64, cap: f64, tol: f64) -> bool {
    let mut nz: Vec<f64> = mu.iter().cloned().filter(|v| v.abs() > tol).collect();
    if nz.iter().any(|&v| v < zeta - tol || v > cap + tol) {
        return false;
    }
    nz.sort_by(|a, b| b.partial_cmp(a).unwrap());
    nz.windows(2).all(|w| w[0] - w[1] >= zeta - tol)
}

/// Coarse-to-fine grid minimizer of `(v−z)ᵀ D (v−z)` over the multiplier
/// domain, refining three times around the incumbent.
pub fn grid_project_mdomain(
    z: &DVector<f64>,
    d_metric: &DMatrix<f64>,
    zeta: f64,
    cap: f64,
    range_hi: f64,
) -> DVector<f64> {
    let dim = z.len();
    assert_eq!(dim, 3, "grid oracle written for the 3-d configuration");
    let obj = |v: &DVector<f64>| {
        let diff = v - z;
        (diff.transpose() * d_metric * &diff)[(0, 0)]
    };
    let mut best_v = DVector::<f64>::zeros(dim);
    let mut best = obj(&best_v);
    let scan = |center: &DVector<f64>, half: f64, step: f64, best: &mut f64, best_v: &mut DVector<f64>| {
        let lo: Vec<f64> = (0..dim).map(|i| (center[i] - half).max(0.0)).collect();
        let hi: Vec<f64> = (0..dim).map(|i| (center[i] + half).min(range_hi)).collect();
        let counts: Vec<usize> = (0..dim)
            .map(|i| ((hi[i] - lo[i]) / step).round() as usize + 1)
            .collect();
        let mut v = DVector::<f64>::zeros(dim);
        for i in 0..counts[0] {
            v[0] = lo[0] + i as f64 * step;
            for j in 0..counts[1] {
                v[1] = lo[1] + j as f64 * step;
                for k in 0..counts[2] {
                    v[2] = lo[2] + k as f64 * step;
                    if !mdomain_member(v.as_slice(), zeta, cap, 1e-12) {
                        continue;
                    }
                    let o = obj(&v);
                    if o < *best {
                        *best = o;
                        *best_v = v.clone();
                    }
                }
            }
        }
    };
    let center = DVector::from_element(dim, range_hi / 2.0);
    scan(&center, range_hi / 2.0, 0.05, &mut best, &mut best_v);
    let c1 = best_v.clone();
    scan(&c1, 0.075, 0.005, &mut best, &mut best_v);
    let c2 = best_v.clone();
    scan(&c2, 0.0075, 5e-4, &mut best, &mut best_v);
    let c3 = best_v.clone();
    scan(&c3, 7.5e-4, 5e-5, &mut best, &mut best_v);
    best_v
}

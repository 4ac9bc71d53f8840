//! Small dense linear algebra for LTI analysis.
//!
//! Matrix exponential, exact zero-order-hold discretization, origin-centered
//! ellipsoids and their projections, half-space distances, and a Monte-Carlo
//! sampler for reachable sets of perturbed linear systems.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("matrix is singular or ill-conditioned ({context}); condition estimate {condition:.3e}")]
    Singular { context: &'static str, condition: f64 },
    #[error("matrix is not positive definite ({context}); minimum eigenvalue {min_eigenvalue:.3e}")]
    NotPositiveDefinite {
        context: &'static str,
        min_eigenvalue: f64,
    },
    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("state overflow at step {step} (|state| = {magnitude:.3e})")]
    Overflow { step: usize, magnitude: f64 },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Largest 1-norm for which the degree-13 Padé approximant is used unscaled.
const PADE13_THETA: f64 = 5.371920351148152;

const PADE13_COEFFS: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

pub fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn ensure_square(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(LinalgError::Dimension {
            context,
            expected: "non-empty square matrix".into(),
            got: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

fn ensure_finite(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite(context))
    }
}

/// Matrix exponential by scaling and squaring with a degree-13 Padé approximant.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_square(m, "expm")?;
    ensure_finite(m, "expm")?;
    let n = m.nrows();
    let norm = norm1(m);
    let squarings = if norm > PADE13_THETA {
        (norm / PADE13_THETA).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let a = m * 0.5f64.powi(squarings as i32);

    let b = &PADE13_COEFFS;
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];

    let numer = &v + &u;
    let denom = &v - &u;
    let lu = denom.lu();
    let mut result = lu.solve(&numer).ok_or(LinalgError::Singular {
        context: "expm Padé denominator",
        condition: f64::INFINITY,
    })?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

/// Exact zero-order-hold discretization of `dx/dt = Ac x + Σ Bc_i u_i`.
///
/// Returns `A = exp(Ac Ts)` and `B_i = (∫_0^Ts exp(Ac s) ds) Bc_i`, both read
/// off the exponential of the augmented block matrix `[[Ac, I], [0, 0]] Ts`.
pub fn discretize(
    ac: &DMatrix<f64>,
    bc_list: &[DMatrix<f64>],
    ts: f64,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    ensure_square(ac, "discretize")?;
    if !(ts > 0.0) || !ts.is_finite() {
        return Err(LinalgError::Invalid(format!("sample time must be positive, got {ts}")));
    }
    let n = ac.nrows();
    for bc in bc_list {
        if bc.nrows() != n {
            return Err(LinalgError::Dimension {
                context: "discretize input matrix",
                expected: format!("{n} rows"),
                got: format!("{} rows", bc.nrows()),
            });
        }
    }
    let mut aug = DMatrix::<f64>::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(&(ac * ts));
    aug.view_mut((0, n), (n, n)).copy_from(&(DMatrix::<f64>::identity(n, n) * ts));
    let e = expm(&aug)?;
    let a = e.view((0, 0), (n, n)).into_owned();
    let integral = e.view((0, n), (n, n)).into_owned();
    let bs = bc_list.iter().map(|bc| &integral * bc).collect();
    Ok((a, bs))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Spectral norm bound used for relative SPD tolerances.
fn scale_of(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// Symmetrizes `m` and checks positive definiteness with tolerance `1e-10·‖m‖`.
pub fn require_spd(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    ensure_square(m, context)?;
    ensure_finite(m, context)?;
    let sym = symmetrize(m);
    let asym = (m - m.transpose()).iter().map(|v| v.abs()).fold(0.0, f64::max);
    let scale = scale_of(m).max(f64::MIN_POSITIVE);
    if asym > 1e-10 * scale.max(1.0) {
        return Err(LinalgError::Invalid(format!(
            "{context}: matrix not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let lmin = min_eigenvalue(&sym);
    if !(lmin > 1e-10 * scale) {
        return Err(LinalgError::NotPositiveDefinite {
            context,
            min_eigenvalue: lmin,
        });
    }
    Ok(sym)
}

pub fn quad_form(p: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * p * x)[(0, 0)]
}

/// Rank of `[C; CA; …; CA^{n-1}]` with a relative singular-value cutoff.
pub fn observability_rank(a: &DMatrix<f64>, c: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let p = c.nrows();
    let mut obs = DMatrix::<f64>::zeros(n * p, n);
    let mut block = c.clone();
    for k in 0..n {
        obs.view_mut((k * p, 0), (p, n)).copy_from(&block);
        block = &block * a;
    }
    let sv = obs.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > 1e-10 * smax.max(1.0)).count()
}

/// Origin-centered ellipsoid `{z : zᵀ P z ≤ α}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    shape: DMatrix<f64>,
    level: f64,
}

impl Ellipsoid {
    pub fn new(shape: DMatrix<f64>, level: f64) -> Result<Self> {
        if !(level > 0.0) || !level.is_finite() {
            return Err(LinalgError::Invalid(format!(
                "ellipsoid level must be positive and finite, got {level}"
            )));
        }
        let shape = require_spd(&shape, "ellipsoid shape")?;
        Ok(Self { shape, level })
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.shape.nrows()
    }

    pub fn contains(&self, z: &DVector<f64>, slack: f64) -> bool {
        quad_form(&self.shape, z) <= self.level + slack
    }

    /// Same shape, different level.
    pub fn with_level(&self, level: f64) -> Result<Self> {
        Self::new(self.shape.clone(), level)
    }

    /// Point on the boundary in direction `u` (need not be normalized).
    pub fn boundary_point(&self, u: &DVector<f64>) -> DVector<f64> {
        let q = quad_form(&self.shape, u);
        u * (self.level / q).sqrt()
    }
}

/// Open half-space `{x : cᵀx > b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace {
    normal: DVector<f64>,
    offset: f64,
}

impl HalfSpace {
    pub fn new(normal: DVector<f64>, offset: f64) -> Result<Self> {
        if normal.iter().all(|v| *v == 0.0) {
            return Err(LinalgError::Invalid("half-space normal must be nonzero".into()));
        }
        if !normal.iter().all(|v| v.is_finite()) || !offset.is_finite() {
            return Err(LinalgError::NonFinite("half-space"));
        }
        Ok(Self { normal, offset })
    }

    pub fn normal(&self) -> &DVector<f64> {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.normal.dot(x) > self.offset
    }
}

/// Shadow of `e` on the coordinates `keep` (Schur complement of the dropped block).
pub fn project_ellipsoid(e: &Ellipsoid, keep: &[usize]) -> Result<Ellipsoid> {
    let n = e.dim();
    let mut seen = vec![false; n];
    for &k in keep {
        if k >= n || seen[k] {
            return Err(LinalgError::Invalid(format!(
                "projection index set {keep:?} invalid for dimension {n}"
            )));
        }
        seen[k] = true;
    }
    if keep.is_empty() {
        return Err(LinalgError::Invalid("projection onto empty index set".into()));
    }
    let drop: Vec<usize> = (0..n).filter(|i| !seen[*i]).collect();
    let p = e.shape();
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| p[(rows[i], cols[j])])
    };
    let q1 = pick(keep, keep);
    if drop.is_empty() {
        return Ellipsoid::new(q1, e.level());
    }
    let q2 = pick(keep, &drop);
    let q3 = pick(&drop, &drop);
    let chol = q3.clone().cholesky().ok_or_else(|| LinalgError::Singular {
        context: "projection: dropped block",
        condition: condition_estimate(&q3),
    })?;
    let shape = &q1 - &q2 * chol.solve(&q2.transpose());
    Ellipsoid::new(symmetrize(&shape), e.level())
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// `cᵀ P⁻¹ c` through a Cholesky solve.
fn inverse_quad(p: &DMatrix<f64>, c: &DVector<f64>) -> f64 {
    let chol = p.clone().cholesky().expect("ellipsoid shape is SPD by construction");
    c.dot(&chol.solve(c))
}

/// Distance expression `(|b| − sqrt(cᵀP⁻¹c/α)) / cᵀc`, evaluated verbatim.
pub fn distance_to_halfspace_formula(e: &Ellipsoid, h: &HalfSpace) -> f64 {
    let c = h.normal();
    let support = (inverse_quad(e.shape(), c) / e.level()).sqrt();
    (h.offset().abs() - support) / c.dot(c)
}

/// Signed Euclidean gap between `e` and the plane `cᵀy = b`.
///
/// The support point is built from the eigendecomposition of the shape
/// matrix, independently of any `P⁻¹c` solve. Nonpositive values mean the
/// ellipsoid reaches the plane.
pub fn distance_to_halfspace_oracle(e: &Ellipsoid, h: &HalfSpace) -> f64 {
    let eig = e.shape().clone().symmetric_eigen();
    let c = h.normal();
    // z = Λ^{-1/2} Qᵀ c; x* = sqrt(α) Q Λ^{-1/2} z/|z|
    let qtc = eig.eigenvectors.transpose() * c;
    let z = DVector::from_iterator(
        qtc.len(),
        qtc.iter().zip(eig.eigenvalues.iter()).map(|(v, l)| v / l.sqrt()),
    );
    let zn = z.norm();
    let scaled = DVector::from_iterator(
        z.len(),
        z.iter().zip(eig.eigenvalues.iter()).map(|(v, l)| v / l.sqrt()),
    );
    let x_star = &eig.eigenvectors * scaled * (e.level().sqrt() / zn);
    (h.offset() - c.dot(&x_star)) / c.norm()
}

/// Draws `w` uniformly in direction with radius in `[0, 1]`, mapped onto
/// `{wᵀWw ≤ 1}`; with probability one half the sample sits on the boundary.
pub fn sample_in_ellipsoid<R: Rng>(w_factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let p = w_factor.nrows();
    let dir = loop {
        let v = DVector::from_fn(p, |_, _| rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-12 && n <= 1.0 {
            break v / n;
        }
    };
    let radius = if rng.gen_bool(0.5) {
        1.0
    } else {
        rng.gen::<f64>().powf(1.0 / p as f64)
    };
    w_factor * dir * radius
}

/// `W^{-1/2}`-type factor `F` with `Fᵀ W F = I`, so `u ↦ F u` maps the unit ball
/// onto `{wᵀWw ≤ 1}`.
pub fn ellipsoid_factor(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let w = require_spd(w, "disturbance weight")?;
    let chol = w.cholesky().ok_or(LinalgError::NotPositiveDefinite {
        context: "disturbance weight",
        min_eigenvalue: f64::NAN,
    })?;
    let l = chol.l();
    let n = l.nrows();
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(LinalgError::Singular {
            context: "disturbance weight factor",
            condition: f64::INFINITY,
        })?;
    Ok(linv.transpose())
}

/// Monte-Carlo under-approximation of the reachable set of
/// `ζ(k+1) = A ζ(k) + Σ B_i w_i(k)` from `ζ(1) = 0`.
///
/// Returns one trajectory per run; entry `k-1` of a trajectory is `ζ(k)`.
pub fn mc_reach_sample(
    a: &DMatrix<f64>,
    b_list: &[DMatrix<f64>],
    w_list: &[DMatrix<f64>],
    horizon: usize,
    n_runs: usize,
    seed: u64,
) -> Result<Vec<Vec<DVector<f64>>>> {
    ensure_square(a, "mc_reach_sample")?;
    if b_list.len() != w_list.len() {
        return Err(LinalgError::Dimension {
            context: "mc_reach_sample channels",
            expected: format!("{} weights", b_list.len()),
            got: format!("{}", w_list.len()),
        });
    }
    let n = a.nrows();
    let mut factors = Vec::with_capacity(w_list.len());
    for (b, w) in b_list.iter().zip(w_list) {
        if b.nrows() != n || b.ncols() != w.nrows() {
            return Err(LinalgError::Dimension {
                context: "mc_reach_sample channel",
                expected: format!("{n}x{}", w.nrows()),
                got: format!("{}x{}", b.nrows(), b.ncols()),
            });
        }
        factors.push(ellipsoid_factor(w)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let mut traj = Vec::with_capacity(horizon);
        let mut z = DVector::<f64>::zeros(n);
        traj.push(z.clone());
        for step in 1..horizon {
            let mut next = a * &z;
            for (b, f) in b_list.iter().zip(&factors) {
                next += b * sample_in_ellipsoid(f, &mut rng);
            }
            let mag = next.amax();
            if !(mag <= 1e9) {
                return Err(LinalgError::Overflow {
                    step: step + 1,
                    magnitude: mag,
                });
            }
            z = next;
            traj.push(z.clone());
        }
        runs.push(traj);
    }
    Ok(runs)
}

/// Serde adapter writing matrices as a list of rows.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err("ragged matrix rows".into());
        }
        Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn taylor_expm(m: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
        let n = m.nrows();
        let mut sum = DMatrix::<f64>::identity(n, n);
        let mut term = DMatrix::<f64>::identity(n, n);
        for k in 1..terms {
            term = &term * m / k as f64;
            sum += &term;
        }
        sum
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let e = expm(&DMatrix::zeros(5, 5)).unwrap();
        assert_eq!(e, DMatrix::identity(5, 5));
    }

    #[test]
    fn expm_nilpotent() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = expm(&m).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!((e - want).amax() < 1e-15);
    }

    #[test]
    fn expm_rejects_non_square() {
        assert!(matches!(
            expm(&DMatrix::zeros(2, 3)),
            Err(LinalgError::Dimension { .. })
        ));
    }

    #[test]
    fn expm_matches_taylor_on_random_small_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut m = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
            let s = norm1(&m);
            m /= s / rng.gen_range(0.05..1.0);
            let want = taylor_expm(&m, 60);
            let got = expm(&m).unwrap();
            let rel = (&got - &want).amax() / want.amax();
            assert!(rel < 1e-12, "relative error {rel:e}");
        }
    }

    #[test]
    fn expm_group_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut m = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            m *= 5.0 / norm1(&m);
            let p = expm(&m).unwrap() * expm(&(-&m)).unwrap();
            assert!((p - DMatrix::identity(4, 4)).amax() < 1e-9);
        }
    }

    #[test]
    fn discretize_scalar_closed_form() {
        let ac = DMatrix::from_element(1, 1, -1.0);
        let bc = DMatrix::from_element(1, 1, 1.0);
        let (a, bs) = discretize(&ac, &[bc], 0.1).unwrap();
        assert!((a[(0, 0)] - (-0.1f64).exp()).abs() < 1e-15);
        assert!((bs[0][(0, 0)] - (1.0 - (-0.1f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn discretize_zero_dynamics() {
        let ac = DMatrix::zeros(3, 3);
        let bc = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (a, bs) = discretize(&ac, std::slice::from_ref(&bc), 0.25).unwrap();
        assert!((a - DMatrix::identity(3, 3)).amax() < 1e-15);
        assert!((&bs[0] - bc * 0.25).amax() < 1e-14);
    }

    #[test]
    fn discretize_headway_filter_channel() {
        // du/dt = -u/h + v/h with h = 0.5, Ts = 0.1
        let h = 0.5;
        let ac = DMatrix::from_element(1, 1, -1.0 / h);
        let bc = DMatrix::from_element(1, 1, 1.0 / h);
        let (a, bs) = discretize(&ac, &[bc], 0.1).unwrap();
        assert!((a[(0, 0)] - (-0.2f64).exp()).abs() < 1e-15);
        assert!((bs[0][(0, 0)] - (1.0 - (-0.2f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn discretize_small_step_ratio() {
        let ac = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0]);
        let bc = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let mut errs = Vec::new();
        for ts in [1e-2, 1e-3] {
            let (a, bs) = discretize(&ac, std::slice::from_ref(&bc), ts).unwrap();
            let ea = ((&a - DMatrix::identity(2, 2)) / ts - &ac).amax();
            let eb = (&bs[0] / ts - &bc).amax();
            errs.push(ea.max(eb));
        }
        // first-order convergence: error shrinks ~10x
        let ratio = errs[0] / errs[1];
        assert!((8.0..12.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn discretize_rejects_bad_step() {
        assert!(discretize(&DMatrix::zeros(1, 1), &[], 0.0).is_err());
    }

    #[test]
    fn projection_of_block_diagonal_keeps_block() {
        let mut p = DMatrix::<f64>::zeros(3, 3);
        p[(0, 0)] = 2.0;
        p[(0, 1)] = 0.5;
        p[(1, 0)] = 0.5;
        p[(1, 1)] = 1.0;
        p[(2, 2)] = 7.0;
        let e = Ellipsoid::new(p.clone(), 3.0).unwrap();
        let proj = project_ellipsoid(&e, &[0, 1]).unwrap();
        assert!((proj.shape() - p.view((0, 0), (2, 2))).amax() < 1e-15);
        assert_eq!(proj.level(), 3.0);
    }

    #[test]
    fn projection_of_unit_ball() {
        let e = Ellipsoid::new(DMatrix::identity(2, 2), 1.0).unwrap();
        let proj = project_ellipsoid(&e, &[0]).unwrap();
        assert!((proj.shape()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn projection_rejects_bad_indices() {
        let e = Ellipsoid::new(DMatrix::identity(2, 2), 1.0).unwrap();
        assert!(project_ellipsoid(&e, &[0, 0]).is_err());
        assert!(project_ellipsoid(&e, &[2]).is_err());
    }

    #[test]
    fn ellipsoid_validation() {
        assert!(Ellipsoid::new(DMatrix::identity(2, 2), 0.0).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            Ellipsoid::new(indefinite, 1.0),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]);
        assert!(Ellipsoid::new(asym, 1.0).is_err());
    }

    #[test]
    fn formula_distance_examples() {
        let c = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let h = HalfSpace::new(c, 2.0).unwrap();
        let e1 = Ellipsoid::new(DMatrix::identity(3, 3), 1.0).unwrap();
        assert!((distance_to_halfspace_formula(&e1, &h) - 1.0).abs() < 1e-15);
        let e4 = Ellipsoid::new(DMatrix::identity(3, 3), 4.0).unwrap();
        assert!((distance_to_halfspace_formula(&e4, &h) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn oracle_distance_examples() {
        let e = Ellipsoid::new(DMatrix::identity(2, 2), 1.0).unwrap();
        let far = HalfSpace::new(DVector::from_vec(vec![1.0, 0.0]), 2.0).unwrap();
        let near = HalfSpace::new(DVector::from_vec(vec![1.0, 0.0]), 0.5).unwrap();
        assert!((distance_to_halfspace_oracle(&e, &far) - 1.0).abs() < 1e-14);
        assert!((distance_to_halfspace_oracle(&e, &near) + 0.5).abs() < 1e-14);

        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let e = Ellipsoid::new(p, 1.0).unwrap();
        let h = HalfSpace::new(DVector::from_vec(vec![0.0, 1.0]), 1.0).unwrap();
        assert!((distance_to_halfspace_oracle(&e, &h) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn halfspace_requires_nonzero_normal() {
        assert!(HalfSpace::new(DVector::zeros(3), 1.0).is_err());
    }

    #[test]
    fn mc_reach_without_channels_stays_at_origin() {
        let a = DMatrix::from_element(2, 2, 0.3);
        let runs = mc_reach_sample(&a, &[], &[], 20, 3, 1).unwrap();
        assert!(runs.iter().flatten().all(|z| z.amax() == 0.0));
    }

    #[test]
    fn mc_reach_unit_ball_image() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::identity(2, 2);
        let runs = mc_reach_sample(&a, &[b], &[DMatrix::identity(2, 2)], 50, 20, 2).unwrap();
        assert!(runs.iter().flatten().all(|z| z.norm() <= 1.0 + 1e-12));
    }

    #[test]
    fn mc_reach_scalar_geometric_bound() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let w = DMatrix::from_element(1, 1, 1.0);
        let runs = mc_reach_sample(&a, &[b], &[w], 200, 200, 3).unwrap();
        let max = runs
            .iter()
            .flatten()
            .map(|z| z[0].abs())
            .fold(0.0, f64::max);
        assert!(max <= 2.0 + 1e-12);
        assert!(max > 1.5, "sampler should approach the bound, got {max}");
    }

    #[test]
    fn mc_reach_detects_overflow() {
        let a = DMatrix::from_element(1, 1, 3.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let w = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            mc_reach_sample(&a, &[b], &[w], 200, 1, 0),
            Err(LinalgError::Overflow { .. })
        ));
    }

    #[test]
    fn mc_reach_is_deterministic() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let w = DMatrix::from_element(1, 1, 1.0);
        let r1 = mc_reach_sample(&a, std::slice::from_ref(&b), std::slice::from_ref(&w), 30, 4, 9).unwrap();
        let r2 = mc_reach_sample(&a, &[b], &[w], 30, 4, 9).unwrap();
        assert_eq!(r1, r2);
    }
}

//! Small dense semidefinite programs with log-det objectives.
//!
//! Programs are built from affine matrix expressions in a flat vector of
//! scalar unknowns. `solve` runs a phase-I feasibility search followed by a
//! barrier method on
//!
//! ```text
//! t·(cᵀx − Σ w_l log det G_l(x)) − Σ_j log det(F_j(x) + σ_j I) − log(R² − ‖x‖²)
//! ```
//!
//! with Newton centering steps, so determinant maximization is handled
//! natively. `σ_j` is the absolute feasibility tolerance granted to LMI
//! blocks (zero for hard constraints such as definiteness floors and scalar
//! bounds).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("every grid point was infeasible ({points} points); smallest phase-I certificate {best_certificate:.3e} at {at:?}")]
    AllInfeasible {
        points: usize,
        best_certificate: f64,
        at: Vec<(String, f64)>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct SymVar {
    pub n: usize,
    /// `idx[i][j]` for `i ≤ j`.
    idx: Vec<Vec<usize>>,
}

impl SymVar {
    pub fn index(&self, i: usize, j: usize) -> usize {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.idx[a][b - a]
    }

    pub fn expr(&self) -> Expr {
        let mut e = Expr::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in i..self.n {
                let mut m = DMatrix::zeros(self.n, self.n);
                m[(i, j)] = 1.0;
                m[(j, i)] = 1.0;
                e.terms.insert(self.index(i, j), m);
            }
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullVar {
    pub rows: usize,
    pub cols: usize,
    first: usize,
}

impl FullVar {
    pub fn index(&self, i: usize, j: usize) -> usize {
        self.first + i * self.cols + j
    }

    pub fn expr(&self) -> Expr {
        let mut e = Expr::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let mut m = DMatrix::zeros(self.rows, self.cols);
                m[(i, j)] = 1.0;
                e.terms.insert(self.index(i, j), m);
            }
        }
        e
    }
}

/// Matrix expression affine in the program unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub rows: usize,
    pub cols: usize,
    pub constant: DMatrix<f64>,
    pub terms: BTreeMap<usize, DMatrix<f64>>,
}

impl Expr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            constant: DMatrix::zeros(rows, cols),
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            constant: m,
            terms: BTreeMap::new(),
        }
    }

    pub fn scalar(c: f64) -> Self {
        Self::constant(DMatrix::from_element(1, 1, c))
    }

    /// `v · M`.
    pub fn var_times(v: Var, m: DMatrix<f64>) -> Self {
        let mut e = Self::zeros(m.nrows(), m.ncols());
        e.terms.insert(v.0, m);
        e
    }

    pub fn var(v: Var) -> Self {
        Self::var_times(v, DMatrix::from_element(1, 1, 1.0))
    }

    fn map(&self, rows: usize, cols: usize, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        Self {
            rows,
            cols,
            constant: f(&self.constant),
            terms: self.terms.iter().map(|(k, m)| (*k, f(m))).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(self.rows, self.cols, |m| m * s)
    }

    pub fn transpose(&self) -> Self {
        self.map(self.cols, self.rows, |m| m.transpose())
    }

    pub fn mul_left(&self, m: &DMatrix<f64>) -> Self {
        assert_eq!(m.ncols(), self.rows, "mul_left dimension");
        self.map(m.nrows(), self.cols, |x| m * x)
    }

    pub fn mul_right(&self, m: &DMatrix<f64>) -> Self {
        assert_eq!(self.cols, m.nrows(), "mul_right dimension");
        self.map(self.rows, m.ncols(), |x| x * m)
    }

    pub fn add(&self, other: &Expr) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add dimension");
        let mut out = self.clone();
        out.constant += &other.constant;
        for (k, m) in &other.terms {
            out.terms
                .entry(*k)
                .and_modify(|x| *x += m)
                .or_insert_with(|| m.clone());
        }
        out
    }

    pub fn sub(&self, other: &Expr) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn add_const(&self, m: &DMatrix<f64>) -> Self {
        let mut out = self.clone();
        out.constant += m;
        out
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (k, m) in &self.terms {
            if x[*k] != 0.0 {
                out += m * x[*k];
            }
        }
        out
    }

    fn asymmetry(&self) -> f64 {
        let mut worst = (&self.constant - self.constant.transpose()).amax();
        for m in self.terms.values() {
            worst = worst.max((m - m.transpose()).amax());
        }
        worst
    }

    fn max_var(&self) -> Option<usize> {
        self.terms.keys().next_back().copied()
    }
}

/// Symmetric block matrix assembled from upper-triangular entries.
pub struct SymBlocks {
    sizes: Vec<usize>,
    entries: BTreeMap<(usize, usize), Expr>,
}

impl SymBlocks {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            sizes: sizes.to_vec(),
            entries: BTreeMap::new(),
        }
    }

    /// Sets block `(i, j)`; the mirrored block receives the transpose.
    pub fn set(&mut self, i: usize, j: usize, e: Expr) -> &mut Self {
        let (e, i, j) = if i <= j { (e, i, j) } else { (e.transpose(), j, i) };
        assert_eq!(
            (e.rows, e.cols),
            (self.sizes[i], self.sizes[j]),
            "block ({i},{j}) size"
        );
        self.entries.insert((i, j), e);
        self
    }

    pub fn build(&self) -> Expr {
        let n: usize = self.sizes.iter().sum();
        let offs: Vec<usize> = self
            .sizes
            .iter()
            .scan(0, |acc, s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        let mut out = Expr::zeros(n, n);
        let place = |r0: usize, c0: usize, m: &DMatrix<f64>, target: &mut DMatrix<f64>| {
            target.view_mut((r0, c0), (m.nrows(), m.ncols())).copy_from(m);
        };
        for ((i, j), e) in &self.entries {
            let (r0, c0) = (offs[*i], offs[*j]);
            place(r0, c0, &e.constant, &mut out.constant);
            if i != j {
                place(c0, r0, &e.constant.transpose(), &mut out.constant);
            }
            for (k, m) in &e.terms {
                let slot = out.terms.entry(*k).or_insert_with(|| DMatrix::zeros(n, n));
                place(r0, c0, m, slot);
                if i != j {
                    place(c0, r0, &m.transpose(), slot);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VarKind {
    Scalar,
    Sym { block: String, i: usize, j: usize },
    Full { block: String, i: usize, j: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarMeta {
    pub name: String,
    pub kind: VarKind,
    pub init: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Matrix inequality; solved to the absolute tolerance `SolverOptions::relax`.
    Lmi,
    /// Definiteness floors, scalar bounds and scalar inequalities; kept strict.
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub name: String,
    pub kind: BlockKind,
    pub expr: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogDetTerm {
    pub name: String,
    pub weight: f64,
    pub expr: Expr,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Program {
    pub name: String,
    pub vars: Vec<VarMeta>,
    pub constraints: Vec<Constraint>,
    pub linear: BTreeMap<usize, f64>,
    pub logdet: Vec<LogDetTerm>,
}

/// Lower bound used for strict definiteness (`P ≻ 0` realized as `P ⪰ 1e-8·I`).
pub const DEFINITE_FLOOR: f64 = 1e-8;

impl Program {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    fn push_var(&mut self, name: String, kind: VarKind, init: f64) -> usize {
        self.vars.push(VarMeta { name, kind, init });
        self.vars.len() - 1
    }

    /// Scalar unknown with open box bounds `lo < v < hi`.
    pub fn scalar(&mut self, name: &str, lo: Option<f64>, hi: Option<f64>) -> Var {
        let init = match (lo, hi) {
            (Some(l), Some(h)) => 0.5 * (l + h),
            (Some(l), None) => l + 1.0,
            (None, Some(h)) => h - 1.0,
            (None, None) => 0.0,
        };
        let v = Var(self.push_var(name.to_string(), VarKind::Scalar, init));
        if let Some(l) = lo {
            self.hard(
                &format!("{name} > {l}"),
                Expr::var(v).add_const(&DMatrix::from_element(1, 1, -l - DEFINITE_FLOOR)),
            );
        }
        if let Some(h) = hi {
            self.hard(
                &format!("{name} < {h}"),
                Expr::var(v)
                    .scale(-1.0)
                    .add_const(&DMatrix::from_element(1, 1, h - DEFINITE_FLOOR)),
            );
        }
        v
    }

    /// Symmetric matrix unknown; `definite` adds the floor `S ⪰ 1e-8·I`.
    pub fn sym(&mut self, name: &str, n: usize, definite: bool) -> SymVar {
        let mut idx = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(n - i);
            for j in i..n {
                let init = if i == j { 1.0 } else { 0.0 };
                row.push(self.push_var(
                    format!("{name}[{i},{j}]"),
                    VarKind::Sym {
                        block: name.to_string(),
                        i,
                        j,
                    },
                    init,
                ));
            }
            idx.push(row);
        }
        let s = SymVar { n, idx };
        if definite {
            self.hard(
                &format!("{name} definite"),
                s.expr()
                    .add_const(&(DMatrix::identity(n, n) * -DEFINITE_FLOOR)),
            );
        }
        s
    }

    pub fn full(&mut self, name: &str, rows: usize, cols: usize) -> FullVar {
        let first = self.vars.len();
        for i in 0..rows {
            for j in 0..cols {
                self.push_var(
                    format!("{name}[{i},{j}]"),
                    VarKind::Full {
                        block: name.to_string(),
                        i,
                        j,
                    },
                    0.0,
                );
            }
        }
        FullVar { rows, cols, first }
    }

    pub fn set_init(&mut self, index: usize, value: f64) {
        self.vars[index].init = value;
    }

    pub fn lmi(&mut self, name: &str, expr: Expr) {
        self.push_constraint(name, BlockKind::Lmi, expr);
    }

    pub fn hard(&mut self, name: &str, expr: Expr) {
        self.push_constraint(name, BlockKind::Hard, expr);
    }

    fn push_constraint(&mut self, name: &str, kind: BlockKind, expr: Expr) {
        assert_eq!(expr.rows, expr.cols, "constraint {name} must be square");
        self.constraints.push(Constraint {
            name: name.to_string(),
            kind,
            expr,
        });
    }

    pub fn minimize_linear(&mut self, v: Var, coef: f64) {
        *self.linear.entry(v.0).or_insert(0.0) += coef;
    }

    /// Adds `−weight · log det(expr)` to the objective.
    pub fn minimize_neg_logdet(&mut self, name: &str, weight: f64, expr: Expr) {
        self.logdet.push(LogDetTerm {
            name: name.to_string(),
            weight,
            expr,
        });
    }

    /// Multiplies every constraint block by `gamma > 0`.
    pub fn scale_constraints(&mut self, gamma: f64) {
        for c in &mut self.constraints {
            c.expr = c.expr.scale(gamma);
        }
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        let n = self.n_vars();
        let mut used = vec![false; n];
        for c in &self.constraints {
            let asym = c.expr.asymmetry();
            if asym > 1e-12 * (1.0 + c.expr.constant.amax()) {
                return Err(SdpError::Malformed(format!(
                    "constraint {} is not symmetric (asymmetry {asym:.3e})",
                    c.name
                )));
            }
            if c.expr.max_var().is_some_and(|k| k >= n) {
                return Err(SdpError::Malformed(format!(
                    "constraint {} references an unknown variable",
                    c.name
                )));
            }
            for k in c.expr.terms.keys() {
                used[*k] = true;
            }
        }
        for t in &self.logdet {
            if t.expr.asymmetry() > 1e-12 || t.expr.rows != t.expr.cols {
                return Err(SdpError::Malformed(format!(
                    "log-det term {} is not a symmetric matrix",
                    t.name
                )));
            }
            if !(t.weight > 0.0) {
                return Err(SdpError::Malformed(format!(
                    "log-det term {} needs a positive weight",
                    t.name
                )));
            }
        }
        if let Some(k) = used.iter().position(|u| !u) {
            return Err(SdpError::Malformed(format!(
                "variable {} appears in no constraint",
                self.vars[k].name
            )));
        }
        Ok(())
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().map(|(k, c)| c * x[*k]).sum();
        let ld: f64 = self
            .logdet
            .iter()
            .map(|t| t.weight * log_det_spd(&t.expr.eval(x)).unwrap_or(f64::NAN))
            .sum();
        lin - ld
    }

    /// Plain-text dump: named variables, then every block as a constant matrix
    /// followed by one coefficient matrix per variable it depends on.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "program {}", self.name);
        let _ = writeln!(s, "variables {}", self.n_vars());
        for (i, v) in self.vars.iter().enumerate() {
            let _ = writeln!(s, "var {i} {}", v.name);
        }
        let write_mat = |s: &mut String, m: &DMatrix<f64>| {
            for r in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:.17e}", m[(r, c)])).collect();
                let _ = writeln!(s, "    {}", row.join(" "));
            }
        };
        for c in &self.constraints {
            let kind = match c.kind {
                BlockKind::Lmi => "lmi",
                BlockKind::Hard => "hard",
            };
            let _ = writeln!(s, "block \"{}\" {kind} dim {}", c.name, c.expr.rows);
            let _ = writeln!(s, "  const");
            write_mat(&mut s, &c.expr.constant);
            for (k, m) in &c.expr.terms {
                let _ = writeln!(s, "  coef {k}");
                write_mat(&mut s, m);
            }
        }
        for (k, c) in &self.linear {
            let _ = writeln!(s, "objective linear {k} {c:.17e}");
        }
        for t in &self.logdet {
            let _ = writeln!(s, "objective neg_logdet \"{}\" weight {:.17e} dim {}", t.name, t.weight, t.expr.rows);
            let _ = writeln!(s, "  const");
            write_mat(&mut s, &t.expr.constant);
            for (k, m) in &t.expr.terms {
                let _ = writeln!(s, "  coef {k}");
                write_mat(&mut s, m);
            }
        }
        s
    }
}

pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    Some(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Absolute tolerance granted to LMI blocks.
    pub relax: f64,
    /// Target duality gap.
    pub gap_tol: f64,
    pub mu: f64,
    pub max_newton: usize,
    pub max_outer: usize,
    /// Radius of the ball `‖x‖ < R` that keeps the barrier bounded.
    pub radius: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            relax: 1e-7,
            gap_tol: 1e-7,
            mu: 20.0,
            max_newton: 200,
            max_outer: 60,
            radius: 1e8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub status: Status,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Unrelaxed minimum eigenvalue of every constraint block, in program order.
    pub block_min_eig: Vec<(String, f64)>,
    /// Objective after each centering step of the main phase.
    pub history: Vec<f64>,
    /// Phase-I optimum lower bound: negative means strictly feasible,
    /// positive is an infeasibility certificate.
    pub phase1_bound: f64,
    pub newton_steps: usize,
}

impl Solution {
    pub fn scalar(&self, v: Var) -> f64 {
        self.x[v.0]
    }

    pub fn sym(&self, s: &SymVar) -> DMatrix<f64> {
        DMatrix::from_fn(s.n, s.n, |i, j| self.x[s.index(i, j)])
    }

    pub fn full(&self, f: &FullVar) -> DMatrix<f64> {
        DMatrix::from_fn(f.rows, f.cols, |i, j| self.x[f.index(i, j)])
    }

    pub fn min_eig(&self) -> f64 {
        self.block_min_eig
            .iter()
            .map(|(_, v)| *v)
            .fold(f64::INFINITY, f64::min)
    }
}

/// One `−w·log det(M(x) + shift·I)` contribution to the barrier.
struct Term {
    dim: usize,
    constant: DMatrix<f64>,
    coefs: Vec<(usize, DMatrix<f64>)>,
    weight: f64,
    /// Objective terms are multiplied by `t`, barrier terms are not.
    objective: bool,
}

impl Term {
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (k, c) in &self.coefs {
            if x[*k] != 0.0 {
                m += c * x[*k];
            }
        }
        m
    }
}

struct Barrier {
    n: usize,
    terms: Vec<Term>,
    linear: DVector<f64>,
    /// Unknowns included in the ball constraint.
    ball_dims: usize,
    radius: f64,
}

enum Centering {
    Converged(usize),
    Stalled(usize),
}

impl Barrier {
    fn barrier_dim(&self) -> f64 {
        self.terms
            .iter()
            .filter(|t| !t.objective)
            .map(|t| t.dim as f64)
            .sum::<f64>()
            + 1.0
    }

    fn objective(&self, x: &[f64]) -> Option<f64> {
        let mut f: f64 = self.linear.iter().zip(x).map(|(c, v)| c * v).sum();
        for t in self.terms.iter().filter(|t| t.objective) {
            f -= t.weight * log_det_spd(&t.eval(x))?;
        }
        Some(f)
    }

    fn value(&self, x: &[f64], tt: f64) -> Option<f64> {
        let mut v: f64 = tt * self.linear.iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
        for t in &self.terms {
            let w = if t.objective { tt * t.weight } else { t.weight };
            v -= w * log_det_spd(&t.eval(x))?;
        }
        let q = self.radius * self.radius - x[..self.ball_dims].iter().map(|v| v * v).sum::<f64>();
        if !(q > 0.0) {
            return None;
        }
        Some(v - q.ln())
    }

    fn grad_hess(&self, x: &[f64], tt: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let n = self.n;
        let mut g = &self.linear * tt;
        let mut h = DMatrix::<f64>::zeros(n, n);
        for t in &self.terms {
            let w = if t.objective { tt * t.weight } else { t.weight };
            let m = t.eval(x);
            let chol = m.cholesky()?;
            let l = chol.l();
            let linv = l.solve_lower_triangular(&DMatrix::identity(t.dim, t.dim))?;
            let s: Vec<(usize, DMatrix<f64>)> = t
                .coefs
                .iter()
                .map(|(k, c)| (*k, &linv * c * linv.transpose()))
                .collect();
            for (a, (ka, sa)) in s.iter().enumerate() {
                g[*ka] -= w * sa.trace();
                for (kb, sb) in s.iter().skip(a) {
                    let v = w * sa.dot(sb);
                    h[(*ka, *kb)] += v;
                    if ka != kb {
                        h[(*kb, *ka)] += v;
                    }
                }
            }
        }
        let nb = self.ball_dims;
        let q = self.radius * self.radius - x[..nb].iter().map(|v| v * v).sum::<f64>();
        if !(q > 0.0) {
            return None;
        }
        for i in 0..nb {
            g[i] += 2.0 * x[i] / q;
            h[(i, i)] += 2.0 / q;
            for j in 0..nb {
                h[(i, j)] += 4.0 * x[i] * x[j] / (q * q);
            }
        }
        Some((g, h))
    }

    /// Damped Newton minimization of the barrier at parameter `tt`.
    fn center(
        &self,
        x: &mut Vec<f64>,
        tt: f64,
        max_newton: usize,
        stop: &dyn Fn(&[f64]) -> bool,
    ) -> Centering {
        let mut steps = 0;
        while steps < max_newton {
            if stop(x) {
                return Centering::Converged(steps);
            }
            let Some((g, h)) = self.grad_hess(x, tt) else {
                return Centering::Stalled(steps);
            };
            let dx = match newton_direction(&g, &h) {
                Some(d) => d,
                None => return Centering::Stalled(steps),
            };
            let decrement = -g.dot(&dx);
            steps += 1;
            if decrement / 2.0 <= 1e-10 {
                return Centering::Converged(steps);
            }
            let Some(f0) = self.value(x, tt) else {
                return Centering::Stalled(steps);
            };
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-14 {
                let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a + alpha * d).collect();
                if let Some(f1) = self.value(&trial, tt) {
                    // inside the quadratic-convergence region a feasible full
                    // step always decreases the self-concordant barrier; the
                    // value test would only see rounding noise at large t
                    if decrement < 0.0625 || f1 <= f0 - 0.01 * alpha * decrement {
                        *x = trial;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // no progress possible at machine precision
                return Centering::Converged(steps);
            }
        }
        Centering::Stalled(steps)
    }
}

fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> Option<DVector<f64>> {
    let scale = h.diagonal().amax().max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..8 {
        let mut hr = h.clone();
        if ridge > 0.0 {
            for i in 0..hr.nrows() {
                hr[(i, i)] += ridge;
            }
        }
        if let Some(ch) = hr.cholesky() {
            let d = ch.solve(&(-g));
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        ridge = if ridge == 0.0 { 1e-14 * scale } else { ridge * 100.0 };
    }
    None
}

fn term_from(expr: &Expr, shift: f64, weight: f64, objective: bool, extra: Option<usize>) -> Term {
    let dim = expr.rows;
    let mut constant = expr.constant.clone();
    for i in 0..dim {
        constant[(i, i)] += shift;
    }
    let mut coefs: Vec<(usize, DMatrix<f64>)> = expr
        .terms
        .iter()
        .filter(|(_, m)| m.amax() != 0.0)
        .map(|(k, m)| (*k, m.clone()))
        .collect();
    if let Some(s) = extra {
        coefs.push((s, DMatrix::identity(dim, dim)));
    }
    Term {
        dim,
        constant,
        coefs,
        weight,
        objective,
    }
}

fn relax_of(kind: BlockKind, opts: &SolverOptions) -> f64 {
    match kind {
        BlockKind::Lmi => opts.relax,
        BlockKind::Hard => 0.0,
    }
}

pub fn block_min_eigs(program: &Program, x: &[f64]) -> Vec<(String, f64)> {
    program
        .constraints
        .iter()
        .map(|c| (c.name.clone(), crate::linalg::min_eigenvalue(&c.expr.eval(x))))
        .collect()
}

/// Phase I: minimize `s` subject to `F_j(x) + σ_j I + s I ≻ 0` and `s > −1`.
fn phase_one(program: &Program, opts: &SolverOptions) -> (Vec<f64>, f64, usize) {
    let n = program.n_vars();
    let s_idx = n;
    let mut terms: Vec<Term> = program
        .constraints
        .iter()
        .map(|c| term_from(&c.expr, relax_of(c.kind, opts), 1.0, false, Some(s_idx)))
        .collect();
    let mut floor = Expr::var(Var(s_idx));
    floor.constant[(0, 0)] = 1.0;
    terms.push(term_from(&floor, 0.0, 1.0, false, None));
    let mut linear = DVector::zeros(n + 1);
    linear[s_idx] = 1.0;
    let barrier = Barrier {
        n: n + 1,
        terms,
        linear,
        ball_dims: n,
        radius: opts.radius,
    };

    let mut x: Vec<f64> = program.vars.iter().map(|v| v.init).collect();
    let worst = program
        .constraints
        .iter()
        .map(|c| crate::linalg::min_eigenvalue(&c.expr.eval(&x)) + relax_of(c.kind, opts))
        .fold(f64::INFINITY, f64::min);
    x.push((-worst).max(0.0) + 1.0);

    let m = barrier.barrier_dim();
    let mut tt = 1.0;
    let mut newton = 0;
    let done = |x: &[f64]| x[s_idx] < -1e-9;
    for _ in 0..opts.max_outer {
        let res = barrier.center(&mut x, tt, opts.max_newton, &done);
        newton += match res {
            Centering::Converged(k) | Centering::Stalled(k) => k,
        };
        let s = x[s_idx];
        if s < 0.0 {
            return (x[..n].to_vec(), s, newton);
        }
        // s − m/t lower-bounds the phase-I optimum
        if s - m / tt > 0.0 || m / tt < 1e-13 {
            return (x[..n].to_vec(), (s - m / tt).max(0.0).max(s.min(m / tt)), newton);
        }
        tt *= opts.mu;
    }
    let s = x[s_idx];
    (x[..n].to_vec(), s, newton)
}

pub fn solve(program: &Program, opts: &SolverOptions) -> Result<Solution, SdpError> {
    program.validate()?;
    let n = program.n_vars();
    let (mut x, phase1_bound, mut newton) = phase_one(program, opts);
    if phase1_bound >= 0.0 {
        let block_min_eig = block_min_eigs(program, &x);
        return Ok(Solution {
            status: Status::Infeasible,
            objective: f64::NAN,
            x,
            block_min_eig,
            history: Vec::new(),
            phase1_bound,
            newton_steps: newton,
        });
    }

    let mut terms: Vec<Term> = program
        .constraints
        .iter()
        .map(|c| term_from(&c.expr, relax_of(c.kind, opts), 1.0, false, None))
        .collect();
    for t in &program.logdet {
        terms.push(term_from(&t.expr, 0.0, t.weight, true, None));
    }
    let mut linear = DVector::zeros(n);
    for (k, c) in &program.linear {
        linear[*k] += c;
    }
    let barrier = Barrier {
        n,
        terms,
        linear,
        ball_dims: n,
        radius: opts.radius,
    };
    let m = barrier.barrier_dim();
    let mut tt = 1.0;
    let mut history = Vec::new();
    let mut status = Status::MaxIterations;
    let never = |_: &[f64]| false;
    for _ in 0..opts.max_outer {
        let res = barrier.center(&mut x, tt, opts.max_newton, &never);
        let stalled = matches!(res, Centering::Stalled(_));
        newton += match res {
            Centering::Converged(k) | Centering::Stalled(k) => k,
        };
        if let Some(f) = barrier.objective(&x) {
            history.push(f);
        }
        if stalled {
            break;
        }
        if m / tt < opts.gap_tol {
            status = Status::Optimal;
            break;
        }
        tt *= opts.mu;
    }
    let block_min_eig = block_min_eigs(program, &x);
    let objective = program.objective_at(&x);
    Ok(Solution {
        status,
        x,
        objective,
        block_min_eig,
        history,
        phase1_bound,
        newton_steps: newton,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub feas_tol: f64,
    pub blocks: Vec<BlockCheck>,
    pub pass: bool,
    pub min_eig: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub kind: BlockKind,
    pub dim: usize,
    pub min_eig: f64,
    pub pass: bool,
}

/// Recomputes every constraint block at `x` and checks `λ_min ≥ −feas_tol`.
pub fn verify(program: &Program, x: &[f64], feas_tol: f64) -> VerifyReport {
    let blocks: Vec<BlockCheck> = program
        .constraints
        .iter()
        .map(|c| {
            let min_eig = crate::linalg::min_eigenvalue(&c.expr.eval(x));
            BlockCheck {
                name: c.name.clone(),
                kind: c.kind,
                dim: c.expr.rows,
                min_eig,
                pass: min_eig >= -feas_tol,
            }
        })
        .collect();
    let min_eig = blocks.iter().map(|b| b.min_eig).fold(f64::INFINITY, f64::min);
    VerifyReport {
        feas_tol,
        pass: blocks.iter().all(|b| b.pass),
        blocks,
        min_eig,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<(String, Vec<f64>)>,
    pub refinement_rounds: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), SdpError> {
        for (name, vals) in &self.axes {
            if vals.is_empty() {
                return Err(SdpError::Grid(format!("axis {name} is empty")));
            }
            if let Some(v) = vals.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
                return Err(SdpError::Grid(format!(
                    "axis {name} has point {v} outside (0,1)"
                )));
            }
        }
        Ok(())
    }

    fn points(&self) -> Vec<Vec<f64>> {
        let mut pts = vec![Vec::new()];
        for (_, vals) in &self.axes {
            let mut next = Vec::with_capacity(pts.len() * vals.len());
            for p in &pts {
                for v in vals {
                    let mut q = p.clone();
                    q.push(*v);
                    next.push(q);
                }
            }
            pts = next;
        }
        pts
    }

    fn spacing(vals: &[f64], v: f64) -> f64 {
        let mut sorted = vals.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        let mut gap = f64::INFINITY;
        for w in sorted.windows(2) {
            if (w[0] - v).abs() < 1e-15 || (w[1] - v).abs() < 1e-15 {
                gap = gap.min(w[1] - w[0]);
            }
        }
        if gap.is_finite() {
            gap
        } else {
            0.05
        }
    }
}

/// Three-point stencil at half the local grid spacing around `v`, kept inside (0,1).
pub fn refine_axis(vals: &[f64], v: f64) -> Vec<f64> {
    let half = 0.5 * GridSpec::spacing(vals, v);
    let mut cand: Vec<f64> = [v - half, v, v + half]
        .into_iter()
        .filter(|c| *c > 0.0 && *c < 1.0)
        .collect();
    cand.dedup();
    cand
}

/// `step, 2·step, …` strictly inside (0,1).
pub fn unit_grid(step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if !(step > 0.0 && step < 1.0) {
        return out;
    }
    let mut k = 1;
    loop {
        let v = ((k as f64 * step) * 1e12).round() / 1e12;
        if v >= 1.0 - 1e-12 {
            break;
        }
        out.push(v);
        k += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEval {
    pub point: Vec<f64>,
    pub status: Option<Status>,
    pub objective: f64,
    pub phase1_bound: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome<T> {
    pub names: Vec<String>,
    pub point: Vec<f64>,
    pub solution: Solution,
    pub payload: T,
    pub evaluated: Vec<GridEval>,
}

/// Worker count for grid sweeps: `PLATOON_SHIELD_THREADS` if set, else rayon's default.
pub fn worker_count() -> usize {
    std::env::var("PLATOON_SHIELD_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

fn better(a: (&[f64], f64), b: (&[f64], f64)) -> bool {
    if a.1 != b.1 {
        return a.1 < b.1;
    }
    a.0.iter()
        .zip(b.0)
        .find(|(x, y)| x != y)
        .is_some_and(|(x, y)| x < y)
}

/// Evaluates `build` at every grid point and keeps the best optimal solution.
///
/// `build` returns the program and a payload kept alongside the winner (for
/// example the variable handles needed to read matrices back). Each
/// refinement round re-sweeps a 3-point stencil per axis at half the local
/// spacing around the current winner.
pub fn grid_search<T, F>(
    grid: &GridSpec,
    opts: &SolverOptions,
    build: F,
) -> Result<GridOutcome<T>, SdpError>
where
    T: Send,
    F: Fn(&[f64]) -> Result<(Program, T), SdpError> + Sync,
{
    grid.validate()?;
    let names: Vec<String> = grid.axes.iter().map(|(n, _)| n.clone()).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| SdpError::Grid(format!("thread pool: {e}")))?;

    let run = |points: Vec<Vec<f64>>| -> Result<Vec<(Vec<f64>, Solution, T)>, SdpError> {
        pool.install(|| {
            points
                .into_par_iter()
                .map(|p| {
                    let (prog, payload) = build(&p)?;
                    let sol = solve(&prog, opts)?;
                    Ok((p, sol, payload))
                })
                .collect()
        })
    };

    let mut evaluated = Vec::new();
    let mut best: Option<(Vec<f64>, Solution, T)> = None;
    let absorb = |results: Vec<(Vec<f64>, Solution, T)>,
                      evaluated: &mut Vec<GridEval>,
                      best: &mut Option<(Vec<f64>, Solution, T)>| {
        for (p, sol, payload) in results {
            evaluated.push(GridEval {
                point: p.clone(),
                status: Some(sol.status),
                objective: sol.objective,
                phase1_bound: sol.phase1_bound,
            });
            if sol.status != Status::Optimal || !sol.objective.is_finite() {
                continue;
            }
            let replace = match best {
                None => true,
                Some((bp, bs, _)) => better((&p, sol.objective), (bp, bs.objective)),
            };
            if replace {
                *best = Some((p, sol, payload));
            }
        }
    };

    let base = grid.points();
    absorb(run(base)?, &mut evaluated, &mut best);

    for _ in 0..grid.refinement_rounds {
        let Some((winner, _, _)) = &best else { break };
        let mut axes = Vec::new();
        for (k, (_, vals)) in grid.axes.iter().enumerate() {
            axes.push((grid.axes[k].0.clone(), refine_axis(vals, winner[k])));
        }
        let refined = GridSpec {
            axes,
            refinement_rounds: 0,
        };
        let pts: Vec<Vec<f64>> = refined
            .points()
            .into_iter()
            .filter(|p| !evaluated.iter().any(|e| &e.point == p))
            .collect();
        absorb(run(pts)?, &mut evaluated, &mut best);
    }

    match best {
        Some((point, solution, payload)) => Ok(GridOutcome {
            names,
            point,
            solution,
            payload,
            evaluated,
        }),
        None => {
            let (cert, at) = evaluated
                .iter()
                .map(|e| (e.phase1_bound, e.point.clone()))
                .fold((f64::INFINITY, Vec::new()), |acc, (c, p)| {
                    if c < acc.0 {
                        (c, p)
                    } else {
                        acc
                    }
                });
            Err(SdpError::AllInfeasible {
                points: evaluated.len(),
                best_certificate: cert,
                at: names.iter().cloned().zip(at).collect(),
            })
        }
    }
}

/// Invariant-ellipsoid block LMI
/// `[[aP, 𝒜ᵀP, 0], [P𝒜, P, Pℬ], [0, ℬᵀP, W_a]] ⪰ 0` for a fixed system,
/// with `W_a = diag((1 − a_i) W_i)` and `Σ a_i ≥ a`.
pub struct EllipsoidProgram {
    pub program: Program,
    pub p: SymVar,
    pub weights: Vec<Var>,
}

pub fn ellipsoid_program(
    a_sys: &DMatrix<f64>,
    b_list: &[DMatrix<f64>],
    w_list: &[DMatrix<f64>],
    a: f64,
) -> EllipsoidProgram {
    let n = a_sys.nrows();
    let mut prog = Program::new("ellipsoidal bound");
    let p = prog.sym("P", n, true);
    let pe = p.expr();
    let weights: Vec<Var> = (0..b_list.len())
        .map(|i| prog.scalar(&format!("a{}", i + 1), Some(0.0), Some(1.0)))
        .collect();
    let mut sum = Expr::scalar(-a);
    for v in &weights {
        sum = sum.add(&Expr::var(*v));
    }
    prog.hard("sum a_i >= a", sum);
    let pbar: usize = b_list.iter().map(|b| b.ncols()).sum();
    let mut blocks = SymBlocks::new(&[n, n, pbar]);
    blocks.set(0, 0, pe.scale(a));
    blocks.set(1, 0, pe.mul_right(a_sys));
    blocks.set(1, 1, pe.clone());
    let mut bstack = DMatrix::zeros(n, pbar);
    let mut wa = Expr::zeros(pbar, pbar);
    let mut off = 0;
    for ((b, w), v) in b_list.iter().zip(w_list).zip(&weights) {
        let p_i = b.ncols();
        bstack.view_mut((0, off), (n, p_i)).copy_from(b);
        let mut embed = DMatrix::zeros(pbar, pbar);
        embed.view_mut((off, off), (p_i, p_i)).copy_from(w);
        wa = wa.add(&Expr::constant(embed.clone())).sub(&Expr::var_times(*v, embed));
        off += p_i;
    }
    blocks.set(1, 2, pe.mul_right(&bstack));
    blocks.set(2, 2, wa);
    prog.lmi("ellipsoid LMI", blocks.build());
    prog.minimize_neg_logdet("log det P", 1.0, pe);
    EllipsoidProgram {
        program: prog,
        p,
        weights,
    }
}

/// `α_k = a^{k−1}·V(1) + (N − a)(1 − a^{k−1})/(1 − a)`.
pub fn ellipsoid_level(a: f64, n_channels: usize, v1: f64, k: usize) -> f64 {
    let ak = a.powi(k as i32 - 1);
    ak * v1 + (n_channels as f64 - a) * (1.0 - ak) / (1.0 - a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_logdet_hits_upper_bound() {
        let mut prog = Program::new("scalar");
        let p = prog.sym("p", 1, true);
        prog.hard("p <= 2", p.expr().scale(-1.0).add_const(&DMatrix::from_element(1, 1, 2.0)));
        prog.minimize_neg_logdet("log p", 1.0, p.expr());
        let sol = solve(&prog, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, Status::Optimal);
        assert!((sol.sym(&p)[(0, 0)] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn scalar_lyapunov_feasible() {
        let a_sys = DMatrix::from_element(1, 1, 0.5);
        let mut prog = Program::new("lyap");
        let p = prog.sym("P", 1, true);
        let pe = p.expr();
        let lyap = pe.scale(0.5).sub(&pe.mul_left(&a_sys.transpose()).mul_right(&a_sys));
        prog.lmi("decay", lyap);
        prog.hard("P <= 10", pe.scale(-1.0).add_const(&DMatrix::from_element(1, 1, 10.0)));
        let sol = solve(&prog, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, Status::Optimal);
        assert!(verify(&prog, &sol.x, 1e-9).pass);
    }

    #[test]
    fn scalar_system_ellipsoid() {
        let a_sys = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let w = DMatrix::from_element(1, 1, 1.0);
        let ep = ellipsoid_program(&a_sys, &[b], &[w], 0.5);
        let sol = solve(&ep.program, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, Status::Optimal);
        let p = sol.sym(&ep.p)[(0, 0)];
        let a1 = sol.scalar(ep.weights[0]);
        let block = DMatrix::from_row_slice(3, 3, &[0.5 * p, 0.5 * p, 0.0, 0.5 * p, p, p, 0.0, p, 1.0 - a1]);
        assert!(crate::linalg::min_eigenvalue(&block) >= -1e-6);
        // asymptotic level bounds the true reach 1/(1-0.5) = 2
        let alpha = (1.0 - 0.5) / (1.0 - 0.5);
        assert!((alpha / p).sqrt() >= 2.0 - 1e-5);
    }

    #[test]
    fn infeasible_program_reports_certificate() {
        let mut prog = Program::new("bad");
        let x = prog.scalar("x", None, None);
        prog.hard("x >= 1", Expr::var(x).add_const(&DMatrix::from_element(1, 1, -1.0)));
        prog.hard("x <= 0", Expr::var(x).scale(-1.0));
        let sol = solve(&prog, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, Status::Infeasible);
        assert!(sol.phase1_bound > 0.0);
    }

    #[test]
    fn verify_flags_constructed_violation() {
        let a_sys = DMatrix::from_element(2, 2, 0.2);
        let mut prog = Program::new("v");
        let p = prog.sym("P", 2, true);
        let pe = p.expr();
        prog.lmi("decay", pe.scale(0.5).sub(&pe.mul_left(&a_sys.transpose()).mul_right(&a_sys)));
        prog.hard("P <= I", pe.scale(-1.0).add_const(&DMatrix::identity(2, 2)));
        let sol = solve(&prog, &SolverOptions::default()).unwrap();
        assert!(verify(&prog, &sol.x, 1e-9).pass);
        let mut x = sol.x.clone();
        // push P below the definiteness floor by 2·tol
        let shift = sol.sym(&p).symmetric_eigenvalues().min() + 2e-6;
        x[p.index(0, 0)] -= shift;
        x[p.index(1, 1)] -= shift;
        assert!(!verify(&prog, &x, 1e-6).pass);
    }

    #[test]
    fn objective_history_is_monotone() {
        let a_sys = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, -0.1, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let ep = ellipsoid_program(&a_sys, &[b], &[DMatrix::identity(1, 1)], 0.7);
        let sol = solve(&ep.program, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, Status::Optimal);
        for w in sol.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", sol.history);
        }
    }

    #[test]
    fn single_point_grid_matches_solve() {
        let a_sys = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let w = DMatrix::from_element(1, 1, 1.0);
        let grid = GridSpec {
            axes: vec![("a".into(), vec![0.5])],
            refinement_rounds: 0,
        };
        let out = grid_search(&grid, &SolverOptions::default(), |p| {
            Ok((ellipsoid_program(&a_sys, std::slice::from_ref(&b), std::slice::from_ref(&w), p[0]).program, ()))
        })
        .unwrap();
        let direct = solve(
            &ellipsoid_program(&a_sys, std::slice::from_ref(&b), std::slice::from_ref(&w), 0.5).program,
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(out.solution.x, direct.x);
    }

    #[test]
    fn grid_rejects_points_outside_unit_interval() {
        let grid = GridSpec {
            axes: vec![("a".into(), vec![0.0, 0.5])],
            refinement_rounds: 0,
        };
        let r = grid_search(&grid, &SolverOptions::default(), |_| Ok((Program::new("x"), ())));
        assert!(matches!(r, Err(SdpError::Grid(_))));
    }

    #[test]
    fn dump_names_every_block() {
        let ep = ellipsoid_program(
            &DMatrix::from_element(1, 1, 0.5),
            &[DMatrix::from_element(1, 1, 1.0)],
            &[DMatrix::from_element(1, 1, 1.0)],
            0.5,
        );
        let text = ep.program.dump();
        for c in &ep.program.constraints {
            assert!(text.contains(&format!("\"{}\"", c.name)));
        }
        assert!(text.contains("neg_logdet"));
    }

    #[test]
    fn level_sequence_limits() {
        assert!((ellipsoid_level(0.5, 2, 0.0, 1)).abs() < 1e-15);
        let lim = ellipsoid_level(0.5, 2, 7.0, 200);
        assert!((lim - 1.5 / 0.5).abs() < 1e-12);
    }
}

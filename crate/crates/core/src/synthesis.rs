//! Estimator, monitor and controller synthesis programs.
//!
//! The bilinear products `PᵉL`, `a₃Π` and `τ₁Pᵉ` are removed by the change of
//! variables `Y = PᵉL` and a grid over `(a, c, a₃, τ₁)`; the controller
//! program is linearized by `P^ζ = diag(X, x̃)` and `K̃ = x̃K`.

use nalgebra::{Complex, DMatrix, RowDVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::rows;
use crate::model::{build_error_dynamics, DiscretePlant, NoiseBounds, NX, NY_E, N_ZETA};
use crate::sdp::{
    self, ellipsoid_program, grid_search, refine_axis, unit_grid, Expr, FullVar, GridSpec,
    Program, SdpError, SolverOptions, SymBlocks, SymVar, Var, VerifyReport,
};

/// Tolerance for accepting a returned certificate.
pub const VERIFY_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("certificate failed verification: worst block {block} has min eigenvalue {min_eig:.3e}")]
    Verification { block: String, min_eig: f64 },
}

pub type Result<T> = std::result::Result<T, SynthesisError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 > 0.0 && self.alpha2 > 0.0) || (self.alpha1 + self.alpha2 - 1.0).abs() > 1e-12 {
            return Err(SynthesisError::Parameter(format!(
                "objective weights must be positive and sum to one (got {} and {})",
                self.alpha1, self.alpha2
            )));
        }
        Ok(())
    }
}

/// Grid for the estimator/monitor program.
///
/// `tau1_frac` is τ₁ as a fraction of its admissible range `(0, 1/(α_∞ᵉ+ε))`;
/// outside that range `f₂ > 0` fails for every other choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorGrid {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub a3: Vec<f64>,
    pub tau1_frac: Vec<f64>,
    pub refinement_rounds: usize,
}

impl EstimatorGrid {
    pub fn with_steps(outer: f64, inner: f64, refinement_rounds: usize) -> Self {
        Self {
            a: unit_grid(outer),
            c: unit_grid(outer),
            a3: unit_grid(inner),
            tau1_frac: unit_grid(inner),
            refinement_rounds,
        }
    }
}

impl Default for EstimatorGrid {
    fn default() -> Self {
        Self::with_steps(0.05, 0.1, 1)
    }
}

pub fn alpha_inf_e(a: f64) -> f64 {
    (3.0 - a) / (1.0 - a)
}

pub fn alpha_bar_inf_e(c: f64) -> f64 {
    (2.0 - c) / (1.0 - c)
}

pub fn alpha_inf_zeta(a: f64) -> f64 {
    (6.0 - a) / (1.0 - a)
}

fn scalar_expr(terms: &[(Var, f64)], constant: f64) -> Expr {
    let mut e = Expr::scalar(constant);
    for (v, c) in terms {
        e = e.add(&Expr::var(*v).scale(*c));
    }
    e
}

fn ident(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

/// `(1 − v)·M` as an expression in the scalar `v`.
fn one_minus(v: Var, m: &DMatrix<f64>) -> Expr {
    Expr::constant(m.clone()).sub(&Expr::var_times(v, m.clone()))
}

fn check(report: &VerifyReport) -> Result<()> {
    if report.pass {
        return Ok(());
    }
    let worst = report
        .blocks
        .iter()
        .min_by(|a, b| a.min_eig.partial_cmp(&b.min_eig).unwrap())
        .expect("program has constraints");
    Err(SynthesisError::Verification {
        block: worst.name.clone(),
        min_eig: worst.min_eig,
    })
}

#[derive(Debug, Clone)]
pub struct EstimatorProgram {
    pub program: Program,
    pub p_e: SymVar,
    pub pi: SymVar,
    pub y: FullVar,
    pub a1: Var,
    pub a2: Var,
    pub c1: Var,
    pub c2: Var,
    pub tau2: Var,
}

/// Joint estimator/monitor program at fixed `(a, c, a₃, τ₁)`.
#[allow(clippy::too_many_arguments)]
pub fn estimator_program(
    plant: &DiscretePlant,
    bounds: &NoiseBounds,
    weights: &ObjectiveWeights,
    eps: f64,
    a: f64,
    c: f64,
    a3: f64,
    tau1: f64,
) -> EstimatorProgram {
    let mut prog = Program::new(format!("estimator/monitor a={a} c={c} a3={a3} tau1={tau1}"));
    let p_e = prog.sym("Pe", NX, true);
    let pi = prog.sym("Pi", NY_E, true);
    let y = prog.full("Y", NX, NY_E);
    let a1 = prog.scalar("a1", Some(0.0), Some(1.0));
    let a2 = prog.scalar("a2", Some(0.0), Some(1.0));
    let c1 = prog.scalar("c1", Some(0.0), Some(1.0));
    let c2 = prog.scalar("c2", Some(0.0), Some(1.0));
    let tau2 = prog.scalar("tau2", Some(0.0), None);
    prog.hard("a1 + a2 + a3 >= a", scalar_expr(&[(a1, 1.0), (a2, 1.0)], a3 - a));
    prog.hard(
        "c1 + c2 > c",
        scalar_expr(&[(c1, 1.0), (c2, 1.0)], -c - sdp::DEFINITE_FLOOR),
    );

    let pe = p_e.expr();
    let pie = pi.expr();
    let ye = y.expr();
    let trusted = plant.trusted_projector();
    let attacked = plant.attacked_projector();
    let ce = &plant.c_e;
    let w2 = bounds.w2_bar;
    let w3 = bounds.w3_bar;

    // attacked error bound
    let mut l5 = SymBlocks::new(&[NX, NX, 1 + NY_E + NY_E]);
    l5.set(0, 0, pe.scale(a));
    l5.set(1, 0, pe.mul_right(&plant.a).sub(&ye.mul_right(&(&trusted * ce))));
    l5.set(1, 1, pe.clone());
    let mut z = Expr::zeros(NX, 1 + 2 * NY_E);
    let place = |z: &mut Expr, col: usize, part: &Expr| {
        let mut embed = DMatrix::zeros(part.cols, 1 + 2 * NY_E);
        embed.view_mut((0, col), (part.cols, part.cols)).fill_with_identity();
        *z = z.add(&part.mul_right(&embed));
    };
    place(&mut z, 0, &pe.mul_right(&plant.b2).scale(-1.0));
    place(&mut z, 1, &ye.mul_right(&trusted).scale(-1.0));
    place(&mut z, 1 + NY_E, &ye.mul_right(&attacked).scale(-1.0));
    l5.set(1, 2, z);
    let mut wa = Expr::zeros(1 + 2 * NY_E, 1 + 2 * NY_E);
    let mut e0 = DMatrix::zeros(1 + 2 * NY_E, 1 + 2 * NY_E);
    e0[(0, 0)] = 1.0 / w2;
    wa = wa.add(&one_minus(a1, &e0));
    let mut e1 = DMatrix::zeros(1 + 2 * NY_E, 1 + 2 * NY_E);
    e1.view_mut((1, 1), (NY_E, NY_E)).copy_from(&(ident(NY_E) / w3));
    wa = wa.add(&one_minus(a2, &e1));
    let mut lift = DMatrix::zeros(NY_E, 1 + 2 * NY_E);
    lift.view_mut((0, 1 + NY_E), (NY_E, NY_E)).fill_with_identity();
    wa = wa.add(&pie.scale(1.0 - a3).mul_left(&lift.transpose()).mul_right(&lift));
    l5.set(2, 2, wa);
    prog.lmi("attacked error bound", l5.build());

    // monitor covers the attacked error ellipsoid
    let ai = alpha_inf_e(a);
    let mut l6 = SymBlocks::new(&[NX, NY_E, 1]);
    let cpc = pie.mul_left(&ce.transpose()).mul_right(ce);
    l6.set(0, 0, pe.scale(tau1).sub(&cpc));
    l6.set(0, 1, pie.mul_left(&ce.transpose()).scale(-1.0));
    l6.set(
        1,
        1,
        Expr::var_times(tau2, ident(NY_E)).sub(&pie),
    );
    l6.set(2, 2, scalar_expr(&[(tau2, -w3)], 1.0 - tau1 * (ai + eps)));
    prog.lmi("monitor covers attacked error", l6.build());

    // attack-free error bound
    let mut l7 = SymBlocks::new(&[NX, NX, 1, NY_E]);
    l7.set(0, 0, pe.scale(c));
    l7.set(1, 0, pe.mul_right(&plant.a).sub(&ye.mul_right(ce)));
    l7.set(1, 1, pe.clone());
    l7.set(1, 2, pe.mul_right(&plant.b2).scale(-1.0));
    l7.set(1, 3, ye.scale(-1.0));
    l7.set(2, 2, one_minus(c1, &DMatrix::from_element(1, 1, 1.0 / w2)));
    l7.set(3, 3, one_minus(c2, &(ident(NY_E) / w3)));
    prog.lmi("attack-free error bound", l7.build());

    // monitor covers attack-free residuals
    let sbar = alpha_bar_inf_e(c) + eps + w3;
    let mut l8 = SymBlocks::new(&[NX, NY_E]);
    l8.set(0, 0, pe.scale(1.0 / sbar).sub(&cpc));
    l8.set(0, 1, pie.mul_left(&ce.transpose()).scale(-1.0));
    l8.set(1, 1, pie.scale(-1.0).add_const(&(ident(NY_E) / sbar)));
    prog.lmi("monitor covers attack-free residual", l8.build());

    prog.minimize_neg_logdet("log det Pe", weights.alpha1, pe);
    prog.minimize_neg_logdet("log det Pi", weights.alpha2, pie);
    EstimatorProgram {
        program: prog,
        p_e,
        pi,
        y,
        a1,
        a2,
        c1,
        c2,
        tau2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorScalars {
    pub a: f64,
    pub c: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub c1: f64,
    pub c2: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMonitorResult {
    #[serde(with = "rows")]
    pub l: DMatrix<f64>,
    #[serde(with = "rows")]
    pub pi: DMatrix<f64>,
    #[serde(with = "rows")]
    pub p_e: DMatrix<f64>,
    #[serde(with = "rows")]
    pub y: DMatrix<f64>,
    pub scalars: EstimatorScalars,
    pub alpha_inf_e: f64,
    pub alpha_bar_inf_e: f64,
    pub f2: f64,
    pub objective: f64,
    pub verification: VerifyReport,
    pub grid_points: usize,
    /// Gain-independent modes of the attack-eliminated error dynamics on the unit circle.
    pub marginal_modes: Vec<f64>,
}

fn tau1_of(a: f64, eps: f64, frac: f64) -> f64 {
    frac / (alpha_inf_e(a) + eps)
}

/// Solves the joint estimator/monitor program over the grid.
///
/// The sweep runs `a × c` at `a₃ = τ₁-fraction = 0.5`, then `a₃ × τ₁` at the
/// winning `(a, c)`, then the requested refinement rounds around the
/// four-dimensional winner.
pub fn synthesize_estimator_monitor(
    plant: &DiscretePlant,
    bounds: &NoiseBounds,
    weights: &ObjectiveWeights,
    eps: f64,
    grid: &EstimatorGrid,
    opts: &SolverOptions,
) -> Result<EstimatorMonitorResult> {
    weights.validate()?;
    bounds
        .validate()
        .map_err(|e| SynthesisError::Parameter(e.to_string()))?;
    if !(eps > 0.0) {
        return Err(SynthesisError::Parameter(format!("epsilon must be positive, got {eps}")));
    }
    let build = |a: f64, c: f64, a3: f64, frac: f64| {
        let ep = estimator_program(plant, bounds, weights, eps, a, c, a3, tau1_of(a, eps, frac));
        let program = ep.program.clone();
        Ok((program, ep))
    };

    let stage1 = grid_search(
        &GridSpec {
            axes: vec![("a".into(), grid.a.clone()), ("c".into(), grid.c.clone())],
            refinement_rounds: 0,
        },
        opts,
        |p| build(p[0], p[1], 0.5, 0.5),
    );
    // fall back to the full product when the fixed inner point is infeasible everywhere
    let (a0, c0, mut points) = match stage1 {
        Ok(o) => (o.point[0], o.point[1], o.evaluated.len()),
        Err(SdpError::AllInfeasible { points, .. }) => {
            let full = grid_search(
                &GridSpec {
                    axes: vec![
                        ("a".into(), grid.a.clone()),
                        ("c".into(), grid.c.clone()),
                        ("a3".into(), grid.a3.clone()),
                        ("tau1_frac".into(), grid.tau1_frac.clone()),
                    ],
                    refinement_rounds: 0,
                },
                opts,
                |p| build(p[0], p[1], p[2], p[3]),
            )?;
            (full.point[0], full.point[1], points + full.evaluated.len())
        }
        Err(e) => return Err(e.into()),
    };

    let stage2 = grid_search(
        &GridSpec {
            axes: vec![
                ("a3".into(), grid.a3.clone()),
                ("tau1_frac".into(), grid.tau1_frac.clone()),
            ],
            refinement_rounds: 0,
        },
        opts,
        |p| build(a0, c0, p[0], p[1]),
    )?;
    points += stage2.evaluated.len();
    let mut best = (
        vec![a0, c0, stage2.point[0], stage2.point[1]],
        stage2.solution,
        stage2.payload,
    );

    for _ in 0..grid.refinement_rounds {
        let axes = vec![
            ("a".to_string(), refine_axis(&grid.a, best.0[0])),
            ("c".to_string(), refine_axis(&grid.c, best.0[1])),
            ("a3".to_string(), refine_axis(&grid.a3, best.0[2])),
            ("tau1_frac".to_string(), refine_axis(&grid.tau1_frac, best.0[3])),
        ];
        let refined = grid_search(
            &GridSpec {
                axes,
                refinement_rounds: 0,
            },
            opts,
            |p| build(p[0], p[1], p[2], p[3]),
        )?;
        points += refined.evaluated.len();
        if refined.solution.objective <= best.1.objective {
            best = (refined.point, refined.solution, refined.payload);
        }
    }

    let (pt, sol, ep) = best;
    let verification = sdp::verify(&ep.program, &sol.x, VERIFY_TOL);
    check(&verification)?;
    let p_e = sol.sym(&ep.p_e);
    let y = sol.full(&ep.y);
    let l = p_e
        .clone()
        .cholesky()
        .ok_or_else(|| SynthesisError::Parameter("returned Pe is not positive definite".into()))?
        .solve(&y);
    let (a, c, a3) = (pt[0], pt[1], pt[2]);
    let tau1 = tau1_of(a, eps, pt[3]);
    let tau2 = sol.scalar(ep.tau2);
    let ai = alpha_inf_e(a);
    Ok(EstimatorMonitorResult {
        l,
        pi: sol.sym(&ep.pi),
        p_e,
        y,
        scalars: EstimatorScalars {
            a,
            c,
            a1: sol.scalar(ep.a1),
            a2: sol.scalar(ep.a2),
            a3,
            c1: sol.scalar(ep.c1),
            c2: sol.scalar(ep.c2),
            tau1,
            tau2,
            eps,
        },
        alpha_inf_e: ai,
        alpha_bar_inf_e: alpha_bar_inf_e(c),
        f2: 1.0 - tau1 * (ai + eps) - tau2 * bounds.w3_bar,
        objective: sol.objective,
        verification,
        grid_points: points,
        marginal_modes: crate::model::unobservable_marginal_modes(plant),
    })
}

#[derive(Debug, Clone)]
pub struct MonitorProgram {
    pub program: Program,
    pub p_e: SymVar,
    pub pi: SymVar,
    pub c1: Var,
    pub c2: Var,
}

/// Monitor-only program for a fixed estimator gain at fixed `c`.
pub fn monitor_program(
    plant: &DiscretePlant,
    bounds: &NoiseBounds,
    l: &DMatrix<f64>,
    eps: f64,
    c: f64,
) -> MonitorProgram {
    let mut prog = Program::new(format!("monitor given L c={c}"));
    let p_e = prog.sym("Pe", NX, true);
    let pi = prog.sym("Pi", NY_E, true);
    let c1 = prog.scalar("c1", Some(0.0), Some(1.0));
    let c2 = prog.scalar("c2", Some(0.0), Some(1.0));
    prog.hard(
        "c1 + c2 > c",
        scalar_expr(&[(c1, 1.0), (c2, 1.0)], -c - sdp::DEFINITE_FLOOR),
    );
    let pe = p_e.expr();
    let pie = pi.expr();
    let ce = &plant.c_e;
    let ye = pe.mul_right(l);
    let (w2, w3) = (bounds.w2_bar, bounds.w3_bar);

    let mut l3 = SymBlocks::new(&[NX, NX, 1, NY_E]);
    l3.set(0, 0, pe.scale(c));
    l3.set(1, 0, pe.mul_right(&plant.a).sub(&ye.mul_right(ce)));
    l3.set(1, 1, pe.clone());
    l3.set(1, 2, pe.mul_right(&plant.b2).scale(-1.0));
    l3.set(1, 3, ye.scale(-1.0));
    l3.set(2, 2, one_minus(c1, &DMatrix::from_element(1, 1, 1.0 / w2)));
    l3.set(3, 3, one_minus(c2, &(ident(NY_E) / w3)));
    prog.lmi("attack-free error bound", l3.build());

    let sbar = alpha_bar_inf_e(c) + eps + w3;
    let cpc = pie.mul_left(&ce.transpose()).mul_right(ce);
    let mut l4 = SymBlocks::new(&[NX, NY_E]);
    l4.set(0, 0, pe.scale(1.0 / sbar).sub(&cpc));
    l4.set(0, 1, pie.mul_left(&ce.transpose()).scale(-1.0));
    l4.set(1, 1, pie.scale(-1.0).add_const(&(ident(NY_E) / sbar)));
    prog.lmi("monitor covers attack-free residual", l4.build());
    prog.minimize_neg_logdet("log det Pi", 1.0, pie);
    MonitorProgram {
        program: prog,
        p_e,
        pi,
        c1,
        c2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorResult {
    #[serde(with = "rows")]
    pub pi: DMatrix<f64>,
    #[serde(with = "rows")]
    pub p_e: DMatrix<f64>,
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
    pub eps: f64,
    pub alpha_bar_inf_e: f64,
    pub objective: f64,
    pub verification: VerifyReport,
}

pub fn synthesize_monitor_given_l(
    plant: &DiscretePlant,
    bounds: &NoiseBounds,
    l: &DMatrix<f64>,
    eps: f64,
    grid_c: &[f64],
    refinement_rounds: usize,
    opts: &SolverOptions,
) -> Result<MonitorResult> {
    if l.shape() != (NX, NY_E) || l.iter().any(|v| !v.is_finite()) {
        return Err(SynthesisError::Parameter("estimator gain must be a finite 5x4 matrix".into()));
    }
    let out = grid_search(
        &GridSpec {
            axes: vec![("c".into(), grid_c.to_vec())],
            refinement_rounds,
        },
        opts,
        |p| {
            let mp = monitor_program(plant, bounds, l, eps, p[0]);
            Ok((mp.program.clone(), mp))
        },
    )?;
    let mp = &out.payload;
    let sol = &out.solution;
    let verification = sdp::verify(&mp.program, &sol.x, VERIFY_TOL);
    check(&verification)?;
    let c = out.point[0];
    Ok(MonitorResult {
        pi: sol.sym(&mp.pi),
        p_e: sol.sym(&mp.p_e),
        c,
        c1: sol.scalar(mp.c1),
        c2: sol.scalar(mp.c2),
        eps,
        alpha_bar_inf_e: alpha_bar_inf_e(c),
        objective: sol.objective,
        verification,
    })
}

/// Ellipsoidal bound on the attack-eliminated estimation error for a fixed
/// estimator and monitor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCertificate {
    #[serde(with = "rows")]
    pub p_e: DMatrix<f64>,
    pub a: f64,
    pub a_i: Vec<f64>,
    pub alpha_inf_e: f64,
    pub objective: f64,
    pub verification: VerifyReport,
}

pub fn error_program(
    plant: &DiscretePlant,
    bounds: &NoiseBounds,
    l: &DMatrix<f64>,
    pi: &DMatrix<f64>,
    a: f64,
) -> sdp::EllipsoidProgram {
    let err = build_error_dynamics(plant, l);
    let mut ep = ellipsoid_program(
        &err.a_err,
        &[err.b_wu, err.b_we, err.b_r],
        &[
            DMatrix::from_element(1, 1, 1.0 / bounds.w2_bar),
            ident(NY_E) / bounds.w3_bar,
            pi.clone(),
        ],
        a,
    );
    ep.program.name = format!("attacked error bound a={a}");
    ep
}

pub fn certify_error_bound(
    plant: &DiscretePlant,
    bounds: &NoiseBounds,
    l: &DMatrix<f64>,
    pi: &DMatrix<f64>,
    grid_a: &[f64],
    refinement_rounds: usize,
    opts: &SolverOptions,
) -> Result<ErrorCertificate> {
    let out = grid_search(
        &GridSpec {
            axes: vec![("a".into(), grid_a.to_vec())],
            refinement_rounds,
        },
        opts,
        |p| {
            let ep = error_program(plant, bounds, l, pi, p[0]);
            Ok((ep.program.clone(), ep))
        },
    )?;
    let ep = &out.payload;
    let sol = &out.solution;
    let verification = sdp::verify(&ep.program, &sol.x, VERIFY_TOL);
    check(&verification)?;
    let a = out.point[0];
    Ok(ErrorCertificate {
        p_e: sol.sym(&ep.p),
        a,
        a_i: ep.weights.iter().map(|v| sol.scalar(*v)).collect(),
        alpha_inf_e: alpha_inf_e(a),
        objective: sol.objective,
        verification,
    })
}

/// Scalar gain bounds that place every eigenvalue of `A_e` left of `λ_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainBounds {
    pub tau: f64,
    pub lambda_max: f64,
    /// `k_d > −2λ − 3τλ²`
    pub kd_lower: f64,
    /// `k_d < 1/(3τ)`
    pub kd_upper: f64,
}

impl GainBounds {
    pub fn new(tau: f64, lambda_max: f64) -> Result<Self> {
        if !(lambda_max < 0.0) {
            return Err(SynthesisError::Parameter(format!(
                "decay bound lambda_max must be negative, got {lambda_max}"
            )));
        }
        if !(tau > 0.0 && tau < -1.0 / (3.0 * lambda_max)) {
            return Err(SynthesisError::Parameter(format!(
                "need 0 < tau < -1/(3 lambda_max) = {}, got tau = {tau}",
                -1.0 / (3.0 * lambda_max)
            )));
        }
        let l = lambda_max;
        let kd_lower = -2.0 * l - 3.0 * tau * l * l;
        let kd_upper = 1.0 / (3.0 * tau);
        if kd_lower >= kd_upper {
            return Err(SynthesisError::Parameter(format!(
                "empty derivative-gain interval ({kd_lower}, {kd_upper})"
            )));
        }
        Ok(Self {
            tau,
            lambda_max,
            kd_lower,
            kd_upper,
        })
    }

    /// `k_p > −λk_d − λ² − τλ³`
    pub fn kp_lower(&self, kd: f64) -> f64 {
        let l = self.lambda_max;
        -l * kd - l * l - self.tau * l.powi(3)
    }

    /// `(1 + 3τλ)(k_d + 2λ + 3τλ²) − τ(τλ³ + λ² + k_dλ + k_p) > 0`, the
    /// remaining Routh condition of the shifted characteristic polynomial.
    pub fn cross_margin(&self, kp: f64, kd: f64) -> f64 {
        let (t, l) = (self.tau, self.lambda_max);
        (1.0 + 3.0 * t * l) * (kd + 2.0 * l + 3.0 * t * l * l) - t * (t * l.powi(3) + l * l + kd * l + kp)
    }

    /// Every scalar condition as `(name, margin)`; all margins must be positive.
    pub fn margins(&self, kp: f64, kd: f64) -> Vec<(&'static str, f64)> {
        vec![
            ("kp > 0", kp),
            ("kd > 0", kd),
            ("kd > tau*kp", kd - self.tau * kp),
            ("kd < 1/(3 tau)", self.kd_upper - kd),
            ("kd > -2 lambda - 3 tau lambda^2", kd - self.kd_lower),
            ("kp > -lambda kd - lambda^2 - tau lambda^3", kp - self.kp_lower(kd)),
            ("shifted Routh cross term", self.cross_margin(kp, kd)),
        ]
    }
}

/// Eigenvalues of the spacing-error companion matrix for `K = [k_p, k_d]`.
pub fn eig_ae(k: &[f64; 2], tau: f64) -> Vec<Complex<f64>> {
    let ae = ae_matrix(k, tau);
    ae.complex_eigenvalues().iter().copied().collect()
}

pub fn ae_matrix(k: &[f64; 2], tau: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        3,
        3,
        &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -k[0] / tau, -k[1] / tau, -1.0 / tau],
    )
}

#[derive(Debug, Clone)]
pub struct ControllerProgram {
    pub program: Program,
    pub x: SymVar,
    pub x_tilde: Var,
    pub k_tilde: FullVar,
    pub weights: Vec<Var>,
}

/// Controller program at fixed `a`.
#[allow(clippy::too_many_arguments)]
pub fn controller_program(
    plant: &DiscretePlant,
    bounds: &NoiseBounds,
    pi: &DMatrix<f64>,
    p_e: &DMatrix<f64>,
    alpha_inf_e: f64,
    eps: f64,
    gains: &GainBounds,
    a: f64,
) -> ControllerProgram {
    let mut prog = Program::new(format!("controller a={a}"));
    let x = prog.sym("X", NX, true);
    let x_tilde = prog.scalar("x_tilde", Some(0.0), None);
    let k_tilde = prog.full("K_tilde", 1, 2);
    let weights: Vec<Var> = (1..=6)
        .map(|i| prog.scalar(&format!("a{i}"), Some(0.0), Some(1.0)))
        .collect();
    prog.hard(
        "sum a_i >= a",
        scalar_expr(&weights.iter().map(|v| (*v, 1.0)).collect::<Vec<_>>(), -a),
    );

    let xe = x.expr();
    let xt = Expr::var(x_tilde);
    let kt = k_tilde.expr();
    let kp = Var(k_tilde.index(0, 0));
    let kd = Var(k_tilde.index(0, 1));
    let (tau, lam) = (gains.tau, gains.lambda_max);
    let fl = sdp::DEFINITE_FLOOR;
    prog.hard("kp > 0", scalar_expr(&[(kp, 1.0)], -fl));
    prog.hard("kd > 0", scalar_expr(&[(kd, 1.0)], -fl));
    prog.hard("kd > tau kp", scalar_expr(&[(kd, 1.0), (kp, -tau)], -fl));
    prog.hard(
        "kd < 1/(3 tau)",
        scalar_expr(&[(x_tilde, gains.kd_upper), (kd, -1.0)], -fl),
    );
    prog.hard(
        "kd > -2 lambda - 3 tau lambda^2",
        scalar_expr(&[(kd, 1.0), (x_tilde, -gains.kd_lower)], -fl),
    );
    prog.hard(
        "kp > -lambda kd - lambda^2 - tau lambda^3",
        scalar_expr(&[(kp, 1.0), (kd, lam), (x_tilde, lam * lam + tau * lam.powi(3))], -fl),
    );
    let cross0 = (1.0 + 3.0 * tau * lam) * (2.0 * lam + 3.0 * tau * lam * lam) - tau * (tau * lam.powi(3) + lam * lam);
    prog.hard(
        "shifted Routh cross term",
        scalar_expr(&[(kd, 1.0 + 2.0 * tau * lam), (kp, -tau), (x_tilde, cross0)], -fl),
    );

    let bu = plant.b_u;
    // P^ζ 𝒜 = [[XA, XB₁], [b_u K̃C, a_u x̃]]
    let mut pa = Expr::zeros(N_ZETA, N_ZETA);
    let lift_top = {
        let mut m = DMatrix::zeros(N_ZETA, NX);
        m.view_mut((0, 0), (NX, NX)).fill_with_identity();
        m
    };
    let lift_bottom = {
        let mut m = DMatrix::zeros(N_ZETA, 1);
        m[(NX, 0)] = 1.0;
        m
    };
    let cols = |from: usize, width: usize, total: usize| {
        let mut m = DMatrix::zeros(width, total);
        m.view_mut((0, from), (width, width)).fill_with_identity();
        m
    };
    pa = pa.add(&xe.mul_right(&plant.a).mul_left(&lift_top).mul_right(&cols(0, NX, N_ZETA)));
    pa = pa.add(&xe.mul_right(&plant.b1).mul_left(&lift_top).mul_right(&cols(NX, 1, N_ZETA)));
    pa = pa.add(&kt.mul_right(&(&plant.c * bu)).mul_left(&lift_bottom).mul_right(&cols(0, NX, N_ZETA)));
    pa = pa.add(&xt.scale(plant.a_u).mul_left(&lift_bottom).mul_right(&cols(NX, 1, N_ZETA)));

    // P^ζ ℬ for the channels u_{i−1}, ω_d, ω_u, ω_e, r, e
    let widths = [1, 2, 1, NY_E, NY_E, NX];
    let pbar: usize = widths.iter().sum();
    let offs: Vec<usize> = widths
        .iter()
        .scan(0, |acc, w| {
            let o = *acc;
            *acc += w;
            Some(o)
        })
        .collect();
    let g = &plant.gamma_pinv;
    let mut pb = Expr::zeros(N_ZETA, pbar);
    pb = pb.add(&xe.mul_right(&plant.b2).mul_left(&lift_top).mul_right(&cols(offs[0], 1, pbar)));
    let bottoms: [Expr; 6] = [
        xt.scale(bu),
        kt.scale(bu),
        xt.scale(bu),
        kt.mul_right(g).scale(-bu),
        kt.mul_right(g).scale(bu),
        kt.mul_right(&(g * &plant.c_e)).scale(-bu),
    ];
    for (j, b) in bottoms.iter().enumerate() {
        pb = pb.add(&b.mul_left(&lift_bottom).mul_right(&cols(offs[j], widths[j], pbar)));
    }

    let w_list: [DMatrix<f64>; 6] = [
        DMatrix::from_element(1, 1, 1.0 / bounds.u_bar),
        ident(2) / bounds.w1_bar,
        DMatrix::from_element(1, 1, 1.0 / bounds.w2_bar),
        ident(NY_E) / bounds.w3_bar,
        pi.clone(),
        p_e / (alpha_inf_e + eps),
    ];
    let mut wa = Expr::zeros(pbar, pbar);
    for (j, w) in w_list.iter().enumerate() {
        let mut embed = DMatrix::zeros(pbar, pbar);
        embed.view_mut((offs[j], offs[j]), (widths[j], widths[j])).copy_from(w);
        wa = wa.add(&one_minus(weights[j], &embed));
    }

    let pz = xe
        .mul_left(&lift_top)
        .mul_right(&lift_top.transpose())
        .add(&xt.mul_left(&lift_bottom).mul_right(&lift_bottom.transpose()));
    let mut blk = SymBlocks::new(&[N_ZETA, N_ZETA, pbar]);
    blk.set(0, 0, pz.scale(a));
    blk.set(1, 0, pa);
    blk.set(1, 1, pz.clone());
    blk.set(1, 2, pb);
    blk.set(2, 2, wa);
    prog.lmi("closed-loop ellipsoid", blk.build());
    prog.minimize_neg_logdet("log det P_zeta", 1.0, pz);
    ControllerProgram {
        program: prog,
        x,
        x_tilde,
        k_tilde,
        weights,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerResult {
    pub k: [f64; 2],
    #[serde(with = "rows")]
    pub p_zeta: DMatrix<f64>,
    pub x_tilde: f64,
    pub k_tilde: [f64; 2],
    pub a: f64,
    pub a_i: Vec<f64>,
    pub gain_bounds: GainBounds,
    pub gain_margins: Vec<(String, f64)>,
    pub alpha_inf_zeta: f64,
    pub objective: f64,
    pub ae_eigenvalues: Vec<[f64; 2]>,
    pub max_real_part: f64,
    pub verification: VerifyReport,
    /// Modes of the closed loop with modulus at least one.
    pub marginal_modes: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn synthesize_controller(
    plant: &DiscretePlant,
    bounds: &NoiseBounds,
    pi: &DMatrix<f64>,
    p_e: &DMatrix<f64>,
    alpha_inf_e: f64,
    eps: f64,
    lambda_max: f64,
    grid_a: &[f64],
    refinement_rounds: usize,
    opts: &SolverOptions,
) -> Result<ControllerResult> {
    let gains = GainBounds::new(plant.params.tau, lambda_max)?;
    let out = grid_search(
        &GridSpec {
            axes: vec![("a".into(), grid_a.to_vec())],
            refinement_rounds,
        },
        opts,
        |p| {
            let cp = controller_program(plant, bounds, pi, p_e, alpha_inf_e, eps, &gains, p[0]);
            Ok((cp.program.clone(), cp))
        },
    )?;
    let cp = &out.payload;
    let sol = &out.solution;
    let verification = sdp::verify(&cp.program, &sol.x, VERIFY_TOL);
    check(&verification)?;
    let xt = sol.scalar(cp.x_tilde);
    let kt = sol.full(&cp.k_tilde);
    let k = [kt[(0, 0)] / xt, kt[(0, 1)] / xt];
    let mut p_zeta = DMatrix::zeros(N_ZETA, N_ZETA);
    p_zeta.view_mut((0, 0), (NX, NX)).copy_from(&sol.sym(&cp.x));
    p_zeta[(NX, NX)] = xt;
    let eig = eig_ae(&k, gains.tau);
    let max_real_part = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let cl = crate::model::build_closed_loop(plant, &RowDVector::from_row_slice(&k));
    let a = out.point[0];
    Ok(ControllerResult {
        k,
        p_zeta,
        x_tilde: xt,
        k_tilde: [kt[(0, 0)], kt[(0, 1)]],
        a,
        a_i: cp.weights.iter().map(|v| sol.scalar(*v)).collect(),
        gain_bounds: gains,
        gain_margins: gains
            .margins(k[0], k[1])
            .into_iter()
            .map(|(n, v)| (n.to_string(), v))
            .collect(),
        alpha_inf_zeta: alpha_inf_zeta(a),
        objective: sol.objective,
        ae_eigenvalues: eig.iter().map(|z| [z.re, z.im]).collect(),
        max_real_part,
        verification,
        marginal_modes: crate::model::marginal_closed_loop_modes(&cl),
    })
}

/// First step `k ≥ 1` with `c^{k−1}(ē(1)ᵀPᵉē(1) − ᾱ_∞) ≤ ε`.
pub fn kbar_star(c: f64, v1: f64, alpha_bar: f64, eps: f64) -> usize {
    let excess = v1 - alpha_bar;
    if excess <= eps {
        return 1;
    }
    let mut k = 1usize;
    let mut w = excess;
    while w > eps {
        w *= c;
        k += 1;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_plant, reference_bounds, reference_vehicle};

    #[test]
    fn level_constants() {
        assert!((alpha_inf_e(0.5) - 5.0).abs() < 1e-15);
        assert!((alpha_bar_inf_e(0.5) - 3.0).abs() < 1e-15);
        assert!((alpha_inf_zeta(0.5) - 11.0).abs() < 1e-15);
    }

    #[test]
    fn gain_bounds_for_reference_instance() {
        let g = GainBounds::new(0.1, -0.01).unwrap();
        assert!((g.kd_upper - 10.0 / 3.0).abs() < 1e-15);
        assert!((g.kd_lower - 0.01997).abs() < 1e-15);
    }

    #[test]
    fn gain_bounds_reject_bad_decay() {
        assert!(GainBounds::new(0.1, 0.0).is_err());
        assert!(GainBounds::new(0.1, 0.5).is_err());
        // tau must stay below -1/(3 lambda)
        assert!(GainBounds::new(0.5, -1.0).is_err());
    }

    #[test]
    fn published_gain_misses_cross_condition() {
        let g = GainBounds::new(0.1, -0.01).unwrap();
        let m = g.cross_margin(0.0051, 0.0204);
        assert!(m < 0.0, "{m}");
        let eig = eig_ae(&[0.0051, 0.0204], 0.1);
        let max_re = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        assert!(max_re > -0.01, "{max_re}");
    }

    #[test]
    fn eig_ae_zero_gain() {
        let mut re: Vec<f64> = eig_ae(&[0.0, 0.0], 0.1).iter().map(|z| z.re).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((re[0] + 10.0).abs() < 1e-12);
        assert!(re[1].abs() < 1e-12 && re[2].abs() < 1e-12);
    }

    #[test]
    fn eig_ae_roots_satisfy_polynomial() {
        for k in [[0.2, 0.7], [0.0051, 0.0204], [1.0, 0.3]] {
            for z in eig_ae(&k, 0.1) {
                let p = z * z * z * 0.1 + z * z + z * k[1] + Complex::new(k[0], 0.0);
                assert!(p.norm() < 1e-10, "{k:?} {z}");
            }
        }
    }

    #[test]
    fn baseline_gain_is_stable() {
        assert!(eig_ae(&[0.2, 0.7], 0.1).iter().all(|z| z.re < 0.0));
    }

    #[test]
    fn shifted_routh_matches_eigenvalues() {
        let g = GainBounds::new(0.1, -0.01).unwrap();
        for kp in [0.001, 0.01, 0.05, 0.2] {
            for kd in [0.02, 0.05, 0.1, 0.7, 3.0] {
                let ok = g.margins(kp, kd).iter().skip(4).all(|(_, m)| *m > 0.0);
                let max_re = eig_ae(&[kp, kd], 0.1).iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(ok, max_re < -0.01, "kp={kp} kd={kd} max_re={max_re}");
            }
        }
    }

    #[test]
    fn kbar_star_definition() {
        assert_eq!(kbar_star(0.5, 1.0, 3.0, 1e-3), 1);
        // excess 8 halves to ≤ 1 after three steps
        assert_eq!(kbar_star(0.5, 11.0, 3.0, 1.0), 4);
    }

    #[test]
    fn estimator_program_is_well_formed() {
        let plant = build_plant(&reference_vehicle()).unwrap();
        let w = ObjectiveWeights {
            alpha1: 0.95,
            alpha2: 0.05,
        };
        let ep = estimator_program(&plant, &reference_bounds(), &w, 1e-3, 0.5, 0.5, 0.5, 0.1);
        ep.program.validate().unwrap();
        let dims: Vec<usize> = ep
            .program
            .constraints
            .iter()
            .filter(|c| c.kind == sdp::BlockKind::Lmi)
            .map(|c| c.expr.rows)
            .collect();
        assert_eq!(dims, vec![19, 10, 15, 9]);
    }

    #[test]
    fn controller_program_block_matches_closed_loop() {
        // with x̃ = 1 and X = I the assembled P^ζ𝒜 block equals 𝒜
        let plant = build_plant(&reference_vehicle()).unwrap();
        let bounds = reference_bounds();
        let g = GainBounds::new(0.1, -0.01).unwrap();
        let cp = controller_program(
            &plant,
            &bounds,
            &DMatrix::identity(4, 4),
            &DMatrix::identity(5, 5),
            5.0,
            1e-3,
            &g,
            0.5,
        );
        let mut x = vec![0.0; cp.program.n_vars()];
        for i in 0..NX {
            x[cp.x.index(i, i)] = 1.0;
        }
        x[cp.x_tilde.0] = 1.0;
        x[cp.k_tilde.index(0, 0)] = 0.2;
        x[cp.k_tilde.index(0, 1)] = 0.7;
        let blk = cp.program.constraints.last().unwrap().expr.eval(&x);
        let cl = crate::model::build_closed_loop(&plant, &RowDVector::from_row_slice(&[0.2, 0.7]));
        let pa = blk.view((N_ZETA, 0), (N_ZETA, N_ZETA)).into_owned();
        assert!((pa - &cl.acal).amax() < 1e-15);
        let pb = blk.view((N_ZETA, 2 * N_ZETA), (N_ZETA, 17)).into_owned();
        assert!((pb - cl.b_stacked()).amax() < 1e-15);
    }
}

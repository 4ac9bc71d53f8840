//! Stealthy reachable set of the closed loop, its shadow on the vehicle
//! state, and the distance to the critical states.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    distance_to_halfspace_oracle, distance_to_halfspace_formula, project_ellipsoid, rows, Ellipsoid,
    HalfSpace, LinalgError,
};
use crate::model::{build_closed_loop, DiscretePlant, NoiseBounds, VehicleParams, NX, NY_E};
use crate::sdp::{self, ellipsoid_program, grid_search, EllipsoidProgram, GridSpec, SolverOptions, VerifyReport};
use crate::synthesis::{alpha_inf_zeta, SynthesisError, VERIFY_TOL};

#[derive(Debug, Error)]
pub enum AssessmentError {
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Sdp(#[from] sdp::SdpError),
    #[error("invalid certificate: {0}")]
    Certificate(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, AssessmentError>;

/// Disturbance weights of the six closed-loop channels
/// (`u_{i−1}`, `ω_d`, `ω_u`, `ω_e`, `r`, `e`).
pub fn channel_weights(
    bounds: &NoiseBounds,
    pi: &DMatrix<f64>,
    p_e: &DMatrix<f64>,
    alpha_inf_e: f64,
    eps: f64,
) -> [DMatrix<f64>; 6] {
    [
        DMatrix::from_element(1, 1, 1.0 / bounds.u_bar),
        DMatrix::identity(2, 2) / bounds.w1_bar,
        DMatrix::from_element(1, 1, 1.0 / bounds.w2_bar),
        DMatrix::identity(NY_E, NY_E) / bounds.w3_bar,
        pi.clone(),
        p_e / (alpha_inf_e + eps),
    ]
}

#[allow(clippy::too_many_arguments)]
pub fn reach_program(
    plant: &DiscretePlant,
    k: &[f64; 2],
    bounds: &NoiseBounds,
    pi: &DMatrix<f64>,
    p_e: &DMatrix<f64>,
    alpha_inf_e: f64,
    eps: f64,
    a: f64,
) -> EllipsoidProgram {
    let cl = build_closed_loop(plant, &RowDVector::from_row_slice(k));
    let w = channel_weights(bounds, pi, p_e, alpha_inf_e, eps);
    let mut ep = ellipsoid_program(&cl.acal, &cl.b, &w, a);
    ep.program.name = format!("stealthy reachable set a={a}");
    ep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachCertificate {
    pub k: [f64; 2],
    #[serde(with = "rows")]
    pub p_zeta: DMatrix<f64>,
    pub a: f64,
    pub a_i: Vec<f64>,
    pub alpha_inf_zeta: f64,
    pub objective: f64,
    pub verification: VerifyReport,
    pub marginal_modes: Vec<f64>,
}

impl ReachCertificate {
    pub fn ellipsoid(&self) -> Result<Ellipsoid> {
        Ok(Ellipsoid::new(self.p_zeta.clone(), self.alpha_inf_zeta)?)
    }
}

/// Minimum-volume ellipsoid over the `a` grid for a fixed controller gain.
#[allow(clippy::too_many_arguments)]
pub fn reach_ellipsoid(
    plant: &DiscretePlant,
    k: &[f64; 2],
    bounds: &NoiseBounds,
    pi: &DMatrix<f64>,
    p_e: &DMatrix<f64>,
    alpha_inf_e: f64,
    eps: f64,
    grid_a: &[f64],
    refinement_rounds: usize,
    opts: &SolverOptions,
) -> Result<ReachCertificate> {
    for (name, m) in [("monitor matrix", pi), ("error certificate", p_e)] {
        if m.clone().cholesky().is_none() {
            return Err(AssessmentError::Certificate(format!("{name} is not positive definite")));
        }
    }
    let out = grid_search(
        &GridSpec {
            axes: vec![("a".into(), grid_a.to_vec())],
            refinement_rounds,
        },
        opts,
        |p| {
            let ep = reach_program(plant, k, bounds, pi, p_e, alpha_inf_e, eps, p[0]);
            Ok((ep.program.clone(), ep))
        },
    )?;
    let ep = &out.payload;
    let sol = &out.solution;
    let verification = sdp::verify(&ep.program, &sol.x, VERIFY_TOL);
    if !verification.pass {
        return Err(AssessmentError::Certificate(format!(
            "reachable-set certificate fails verification (min eigenvalue {:.3e})",
            verification.min_eig
        )));
    }
    let a = out.point[0];
    let cl = build_closed_loop(plant, &RowDVector::from_row_slice(k));
    Ok(ReachCertificate {
        k: *k,
        p_zeta: sol.sym(&ep.p),
        a,
        a_i: ep.weights.iter().map(|v| sol.scalar(*v)).collect(),
        alpha_inf_zeta: alpha_inf_zeta(a),
        objective: sol.objective,
        verification,
        marginal_modes: crate::model::marginal_closed_loop_modes(&cl),
    })
}

/// Shadow of `{ζᵀP^ζζ ≤ α}` on the vehicle state; the level is unchanged.
pub fn project_to_state(p_zeta: &DMatrix<f64>, alpha: f64) -> Result<Ellipsoid> {
    if p_zeta.shape() != (NX + 1, NX + 1) {
        return Err(AssessmentError::Certificate(format!(
            "expected a 6x6 shape matrix, got {}x{}",
            p_zeta.nrows(),
            p_zeta.ncols()
        )));
    }
    if !(p_zeta[(NX, NX)] > 0.0) {
        return Err(AssessmentError::Certificate(format!(
            "input block of the certificate must be positive, got {}",
            p_zeta[(NX, NX)]
        )));
    }
    let e = Ellipsoid::new(p_zeta.clone(), alpha)?;
    Ok(project_ellipsoid(&e, &[0, 1, 2, 3, 4])?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalStates {
    pub half_spaces: Vec<(String, HalfSpace)>,
}

impl CriticalStates {
    /// Collision `−e_r − h v > s` and overspeed `v > v_max`.
    pub fn for_vehicle(params: &VehicleParams) -> Self {
        let c1 = DVector::from_row_slice(&[-1.0, -params.h, 0.0, 0.0, 0.0]);
        let c2 = DVector::from_row_slice(&[0.0, 1.0, 0.0, 0.0, 0.0]);
        Self {
            half_spaces: vec![
                (
                    "collision".into(),
                    HalfSpace::new(c1, params.standstill).expect("nonzero normal"),
                ),
                (
                    "overspeed".into(),
                    HalfSpace::new(c2, params.v_max).expect("nonzero normal"),
                ),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSpaceDistance {
    pub name: String,
    pub formula: f64,
    pub oracle: f64,
    pub sign_disagreement: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub d_inf: f64,
    pub d_inf_oracle: f64,
    pub distances: Vec<HalfSpaceDistance>,
    pub resilient: bool,
    pub sign_disagreement: bool,
    #[serde(with = "rows")]
    pub p_x: DMatrix<f64>,
    pub alpha_inf: f64,
}

pub fn assess(p_x: &Ellipsoid, criticals: &CriticalStates) -> SafetyVerdict {
    let distances: Vec<HalfSpaceDistance> = criticals
        .half_spaces
        .iter()
        .map(|(name, h)| {
            let formula = distance_to_halfspace_formula(p_x, h);
            let oracle = distance_to_halfspace_oracle(p_x, h);
            HalfSpaceDistance {
                name: name.clone(),
                formula,
                oracle,
                sign_disagreement: (formula > 0.0) != (oracle > 0.0),
            }
        })
        .collect();
    let d_inf = distances.iter().map(|d| d.formula).fold(f64::INFINITY, f64::min);
    let d_inf_oracle = distances.iter().map(|d| d.oracle).fold(f64::INFINITY, f64::min);
    SafetyVerdict {
        d_inf,
        d_inf_oracle,
        resilient: d_inf > 0.0,
        sign_disagreement: distances.iter().any(|d| d.sign_disagreement),
        distances,
        p_x: p_x.shape().clone(),
        alpha_inf: p_x.level(),
    }
}

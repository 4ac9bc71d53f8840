//! CACC vehicle model, its exact discretization, the estimator structure and
//! the extended closed loop driven by disturbances, residual and estimation
//! error.
//!
//! State ordering throughout: `x = [e_r, v, a, Δv, a_prev]`.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError};

pub const NX: usize = 5;
pub const NY_E: usize = 4;
pub const N_ZETA: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Time headway (s).
    pub h: f64,
    /// Driveline time constant (s).
    pub tau: f64,
    /// Sample time (s).
    pub ts: f64,
    /// Standstill distance (m).
    pub standstill: f64,
    /// Vehicle length (m).
    pub length: f64,
    /// Maximum allowed speed (m/s).
    pub v_max: f64,
}

fn positive(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter {
            name,
            value,
            reason: "must be positive and finite",
        })
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive("h", self.h)?;
        positive("tau", self.tau)?;
        positive("ts", self.ts)?;
        positive("standstill", self.standstill)?;
        positive("v_max", self.v_max)?;
        if !(self.length >= 0.0 && self.length.is_finite()) {
            return Err(ModelError::InvalidParameter {
                name: "length",
                value: self.length,
                reason: "must be nonnegative and finite",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBounds {
    /// Bound on the squared feedforward input, `u_{i-1}² ≤ ū`.
    pub u_bar: f64,
    /// Radar noise energy, `ω_dᵀω_d ≤ ω̄₁`.
    pub w1_bar: f64,
    /// Channel noise, `ω_u² ≤ ω̄₂`.
    pub w2_bar: f64,
    /// Estimation sensor noise, `ω_eᵀω_e ≤ ω̄₃`.
    pub w3_bar: f64,
}

impl NoiseBounds {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive("u_bar", self.u_bar)?;
        positive("w1_bar", self.w1_bar)?;
        positive("w2_bar", self.w2_bar)?;
        positive("w3_bar", self.w3_bar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousPlant {
    pub ac: DMatrix<f64>,
    pub bc1: DMatrix<f64>,
    pub bc2: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePlant {
    pub params: VehicleParams,
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub a_u: f64,
    pub b_u: f64,
    pub c: DMatrix<f64>,
    pub c_e: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub gamma_pinv: DMatrix<f64>,
}

/// Output matrix `C` reading `[e_r, ė_r]` with `ė_r = Δv − h·a`.
fn output_matrix(h: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, NX, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -h, 1.0, 0.0])
}

pub fn build_continuous(params: &VehicleParams) -> Result<ContinuousPlant, ModelError> {
    params.validate()?;
    let h = params.h;
    let it = 1.0 / params.tau;
    #[rustfmt::skip]
    let ac = DMatrix::from_row_slice(NX, NX, &[
        0.0, 0.0, -h,  1.0, 0.0,
        0.0, 0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, -it, 0.0, 0.0,
        0.0, 0.0, -1.0, 0.0, 1.0,
        0.0, 0.0, 0.0, 0.0, -it,
    ]);
    let mut bc1 = DMatrix::zeros(NX, 1);
    bc1[(2, 0)] = it;
    let mut bc2 = DMatrix::zeros(NX, 1);
    bc2[(4, 0)] = it;
    Ok(ContinuousPlant {
        ac,
        bc1,
        bc2,
        c: output_matrix(h),
    })
}

pub fn estimation_output() -> DMatrix<f64> {
    let mut c_e = DMatrix::zeros(NY_E, NX);
    for i in 0..NY_E {
        c_e[(i, i)] = 1.0;
    }
    c_e
}

/// Attacked channels: measured spacing (row 1) and relative velocity (row 4).
pub fn attack_matrix() -> DMatrix<f64> {
    let mut g = DMatrix::zeros(NY_E, 2);
    g[(0, 0)] = 1.0;
    g[(3, 1)] = 1.0;
    g
}

pub fn build_discrete(
    cont: &ContinuousPlant,
    params: &VehicleParams,
) -> Result<DiscretePlant, ModelError> {
    params.validate()?;
    let (a, bs) = linalg::discretize(&cont.ac, &[cont.bc1.clone(), cont.bc2.clone()], params.ts)?;
    let a_u = (-params.ts / params.h).exp();
    // (1/h)∫₀^Ts e^{-(Ts-s)/h} ds = 1 - e^{-Ts/h}; expm1 keeps it exact for small Ts/h
    let b_u = -(-params.ts / params.h).exp_m1();
    let gamma = attack_matrix();
    // Γ has orthonormal columns, so its pseudo-inverse is its transpose
    let gamma_pinv = gamma.transpose();
    Ok(DiscretePlant {
        params: *params,
        a,
        b1: bs[0].clone(),
        b2: bs[1].clone(),
        a_u,
        b_u,
        c: cont.c.clone(),
        c_e: estimation_output(),
        gamma,
        gamma_pinv,
    })
}

pub fn build_plant(params: &VehicleParams) -> Result<DiscretePlant, ModelError> {
    build_discrete(&build_continuous(params)?, params)
}

impl DiscretePlant {
    /// `ΓΓ†`, the projector onto the attacked measurement channels.
    pub fn attacked_projector(&self) -> DMatrix<f64> {
        &self.gamma * &self.gamma_pinv
    }

    /// `I − ΓΓ†`, the projector onto the trusted channels.
    pub fn trusted_projector(&self) -> DMatrix<f64> {
        DMatrix::identity(NY_E, NY_E) - self.attacked_projector()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopExtended {
    pub k: RowDVector<f64>,
    pub acal: DMatrix<f64>,
    /// Input blocks for `u_{i-1}`, `ω_d`, `ω_u`, `ω_e`, `r`, `e` in that order.
    pub b: [DMatrix<f64>; 6],
}

impl ClosedLoopExtended {
    pub fn b_stacked(&self) -> DMatrix<f64> {
        let cols: usize = self.b.iter().map(|m| m.ncols()).sum();
        let mut out = DMatrix::zeros(N_ZETA, cols);
        let mut off = 0;
        for m in &self.b {
            out.view_mut((0, off), (N_ZETA, m.ncols())).copy_from(m);
            off += m.ncols();
        }
        out
    }
}

fn lower_row(row: &RowDVector<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(N_ZETA, row.len());
    m.row_mut(N_ZETA - 1).copy_from(row);
    m
}

pub fn build_closed_loop(plant: &DiscretePlant, k: &RowDVector<f64>) -> ClosedLoopExtended {
    assert_eq!(k.len(), 2, "controller gain must be 1x2");
    let bu = plant.b_u;
    let mut acal = DMatrix::zeros(N_ZETA, N_ZETA);
    acal.view_mut((0, 0), (NX, NX)).copy_from(&plant.a);
    acal.view_mut((0, NX), (NX, 1)).copy_from(&plant.b1);
    let kc = k * &plant.c * bu;
    acal.view_mut((NX, 0), (1, NX)).copy_from(&kc);
    acal[(NX, NX)] = plant.a_u;

    let mut b1 = DMatrix::zeros(N_ZETA, 1);
    b1.view_mut((0, 0), (NX, 1)).copy_from(&plant.b2);
    b1[(NX, 0)] = bu;
    let b2 = lower_row(&(k * bu));
    let b3 = lower_row(&RowDVector::from_element(1, bu));
    let kg = k * &plant.gamma_pinv * bu;
    let b4 = lower_row(&(-&kg));
    let b5 = lower_row(&kg);
    let b6 = lower_row(&(-(&kg * &plant.c_e)));
    ClosedLoopExtended {
        k: k.clone(),
        acal,
        b: [b1, b2, b3, b4, b5, b6],
    }
}

/// Estimation error dynamics after the attack has been eliminated through
/// `δ = Γ†(r − C_e e − ω_e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDynamics {
    pub a_err: DMatrix<f64>,
    pub b_wu: DMatrix<f64>,
    pub b_we: DMatrix<f64>,
    pub b_r: DMatrix<f64>,
}

pub fn build_error_dynamics(plant: &DiscretePlant, l: &DMatrix<f64>) -> ErrorDynamics {
    assert_eq!((l.nrows(), l.ncols()), (NX, NY_E), "estimator gain must be 5x4");
    let trusted = plant.trusted_projector();
    let attacked = plant.attacked_projector();
    ErrorDynamics {
        a_err: &plant.a - l * &trusted * &plant.c_e,
        b_wu: -&plant.b2,
        b_we: -(l * &trusted),
        b_r: -(l * &attacked),
    }
}

impl ErrorDynamics {
    pub fn step(
        &self,
        e: &DVector<f64>,
        w_u: f64,
        w_e: &DVector<f64>,
        r: &DVector<f64>,
    ) -> DVector<f64> {
        &self.a_err * e + &self.b_wu * w_u + &self.b_we * w_e + &self.b_r * r
    }
}

/// Attack-free estimation error step `ē⁺ = (A − L C_e) ē − B₂ω_u − L ω_e`.
pub fn attack_free_error_step(
    plant: &DiscretePlant,
    l: &DMatrix<f64>,
    e: &DVector<f64>,
    w_u: f64,
    w_e: &DVector<f64>,
) -> DVector<f64> {
    (&plant.a - l * &plant.c_e) * e - &plant.b2 * w_u - l * w_e
}

/// Residual `r = C_e e + ω_e + Γδ`.
pub fn residual(
    plant: &DiscretePlant,
    e: &DVector<f64>,
    w_e: &DVector<f64>,
    delta: &DVector<f64>,
) -> DVector<f64> {
    &plant.c_e * e + w_e + &plant.gamma * delta
}

/// `δ = Γ†(r − C_e e − ω_e)`.
pub fn recover_delta(
    r: &DVector<f64>,
    e: &DVector<f64>,
    w_e: &DVector<f64>,
    plant: &DiscretePlant,
) -> DVector<f64> {
    &plant.gamma_pinv * (r - &plant.c_e * e - w_e)
}

/// Eigenvalues of `A` whose right eigenvector is invisible to the trusted
/// channels `(I − ΓΓ†)C_e` and that sit on or outside the unit circle.
///
/// Any such mode is untouched by every estimator gain in the attack-eliminated
/// error dynamics, so no ellipsoidal bound with `a < 1` can exist for them.
pub fn unobservable_marginal_modes(plant: &DiscretePlant) -> Vec<f64> {
    let trusted_c = plant.trusted_projector() * &plant.c_e;
    marginal_unobservable(&plant.a, &trusted_c)
}

/// Same test for the extended closed loop `(𝒜, ·)`: modes of `𝒜` with
/// modulus at least one. These bound the feasibility of the ζ-ellipsoid LMI.
pub fn marginal_closed_loop_modes(cl: &ClosedLoopExtended) -> Vec<f64> {
    let eig = cl.acal.complex_eigenvalues();
    let mut out: Vec<f64> = eig
        .iter()
        .map(|z| z.norm())
        .filter(|m| *m >= 1.0 - 1e-9)
        .collect();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

fn marginal_unobservable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Vec<f64> {
    // PBH test on the real eigenvalues of modulus ≥ 1
    let n = a.nrows();
    let mut out = Vec::new();
    for z in a.complex_eigenvalues().iter() {
        if z.im.abs() > 1e-9 || z.norm() < 1.0 - 1e-9 {
            continue;
        }
        let lam = z.re;
        if out.iter().any(|v: &f64| (v - lam).abs() < 1e-9) {
            continue;
        }
        let mut pbh = DMatrix::zeros(n + c.nrows(), n);
        pbh.view_mut((0, 0), (n, n))
            .copy_from(&(a - DMatrix::identity(n, n) * lam));
        pbh.view_mut((n, 0), (c.nrows(), n)).copy_from(c);
        let sv = pbh.singular_values();
        let rank = sv.iter().filter(|s| **s > 1e-9).count();
        if rank < n {
            out.push(lam);
        }
    }
    out
}

/// Reference vehicle parameters (h = 0.5, τ = 0.1, Ts = 0.1, s = 3, v_max = 35).
pub fn reference_vehicle() -> VehicleParams {
    VehicleParams {
        h: 0.5,
        tau: 0.1,
        ts: 0.1,
        standstill: 3.0,
        length: 4.5,
        v_max: 35.0,
    }
}

pub fn reference_bounds() -> NoiseBounds {
    NoiseBounds {
        u_bar: 4.0,
        w1_bar: 0.01,
        w2_bar: 1e-4,
        w3_bar: 0.02,
    }
}

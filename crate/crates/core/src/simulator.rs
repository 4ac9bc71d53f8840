//! Discrete-time platoon simulation with estimator, residual monitor,
//! bounded disturbances and sensor attacks.
//!
//! Vehicles `1..=m` all run the same CACC loop. Vehicle 1 follows a virtual
//! reference vehicle whose desired acceleration is the lead profile, so every
//! simulated vehicle has a spacing error.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::quad_form;
use crate::model::{build_closed_loop, DiscretePlant, NoiseBounds, NX, NY_E, N_ZETA};

/// Any state entry above this magnitude aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("state diverged at step {step} on vehicle {vehicle} (|x| = {magnitude:.3e})")]
    Divergence {
        step: usize,
        vehicle: usize,
        magnitude: f64,
    },
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LeadInput {
    Constant { value: f64 },
    /// `amplitude · e^{−rate·k}`
    ExpDecay { amplitude: f64, rate: f64 },
    /// Sample `k` is used at step `k`; the last sample is held.
    Samples { values: Vec<f64> },
}

impl LeadInput {
    pub fn at(&self, k: usize) -> f64 {
        match self {
            LeadInput::Constant { value } => *value,
            LeadInput::ExpDecay { amplitude, rate } => amplitude * (-rate * k as f64).exp(),
            LeadInput::Samples { values } => values
                .get(k.saturating_sub(1))
                .or(values.last())
                .copied()
                .unwrap_or(0.0),
        }
    }

    fn scaled(&self, s: f64) -> Self {
        match self {
            LeadInput::Constant { value } => LeadInput::Constant { value: value * s },
            LeadInput::ExpDecay { amplitude, rate } => LeadInput::ExpDecay {
                amplitude: amplitude * s,
                rate: *rate,
            },
            LeadInput::Samples { values } => LeadInput::Samples {
                values: values.iter().map(|v| v * s).collect(),
            },
        }
    }
}

/// Half-widths of the uniform disturbance intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub w_d: f64,
    pub w_u: f64,
    pub w_e: f64,
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        Self {
            w_d: 0.0,
            w_u: 0.0,
            w_e: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttackPolicy {
    None,
    /// `δ` uniform in `[−magnitude, magnitude]²`.
    RandomBounded { magnitude: f64 },
    Constant { delta: [f64; 2] },
    /// Pushes the closed loop along `target` (vehicle-state coordinates)
    /// while keeping `z ≤ gamma`.
    StealthyGreedy {
        target: Option<[f64; 5]>,
        gamma: f64,
        lookahead: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialEstimate {
    Exact,
    /// `x̂(1) = x(1) + U(−spread, spread)⁵`
    Random { spread: f64 },
    Given { values: Vec<[f64; 5]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub steps: usize,
    pub seed: u64,
    pub vehicles: usize,
    pub lead_input: LeadInput,
    pub disturbances: DisturbanceSpec,
    pub attack: AttackPolicy,
    /// 1-based index of the attacked vehicle.
    pub attacked_vehicle: usize,
    /// One state per vehicle, or a single state shared by all of them.
    pub initial_states: Vec<[f64; 5]>,
    pub initial_estimate: InitialEstimate,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        if self.vehicles < 1 {
            return bad("platoon needs at least one vehicle".into());
        }
        if self.attacked_vehicle < 1 || self.attacked_vehicle > self.vehicles {
            return bad(format!(
                "attacked vehicle {} outside 1..={}",
                self.attacked_vehicle, self.vehicles
            ));
        }
        if !(self.initial_states.len() == 1 || self.initial_states.len() == self.vehicles) {
            return bad(format!(
                "expected 1 or {} initial states, got {}",
                self.vehicles,
                self.initial_states.len()
            ));
        }
        let d = &self.disturbances;
        if [d.w_d, d.w_u, d.w_e].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return bad("disturbance half-widths must be finite and nonnegative".into());
        }
        match &self.attack {
            AttackPolicy::StealthyGreedy { gamma, .. } if !(*gamma >= 0.0 && *gamma <= 1.0) => {
                return bad(format!("stealth margin must lie in [0, 1], got {gamma}"));
            }
            AttackPolicy::RandomBounded { magnitude } if !(*magnitude >= 0.0) => {
                return bad("random attack magnitude must be nonnegative".into());
            }
            _ => {}
        }
        match &self.initial_estimate {
            InitialEstimate::Random { spread } if !(*spread >= 0.0) => {
                return bad("initial estimate spread must be nonnegative".into());
            }
            InitialEstimate::Given { values } if !(values.len() == 1 || values.len() == self.vehicles) => {
                return bad("initial estimates must give 1 or m states".into());
            }
            _ => {}
        }
        Ok(())
    }

    fn initial_state(&self, i: usize) -> DVector<f64> {
        let s = self.initial_states.get(i).unwrap_or(&self.initial_states[0]);
        DVector::from_row_slice(s)
    }

    /// Same config with every exogenous input scaled by `s`.
    pub fn scaled_inputs(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.lead_input = self.lead_input.scaled(s);
        out.disturbances = DisturbanceSpec {
            w_d: self.disturbances.w_d * s.abs(),
            w_u: self.disturbances.w_u * s.abs(),
            w_e: self.disturbances.w_e * s.abs(),
        };
        out.initial_states = self
            .initial_states
            .iter()
            .map(|x| x.map(|v| v * s))
            .collect();
        out.attack = match &self.attack {
            AttackPolicy::Constant { delta } => AttackPolicy::Constant {
                delta: delta.map(|v| v * s),
            },
            AttackPolicy::RandomBounded { magnitude } => AttackPolicy::RandomBounded {
                magnitude: magnitude * s.abs(),
            },
            other => other.clone(),
        };
        out
    }
}

/// Estimator gain, monitor and controller gain used by the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    #[serde(with = "crate::linalg::rows")]
    pub l: DMatrix<f64>,
    #[serde(with = "crate::linalg::rows")]
    pub pi: DMatrix<f64>,
    pub k: [f64; 2],
}

impl Design {
    pub fn validate(&self) -> Result<()> {
        if self.l.shape() != (NX, NY_E) {
            return Err(SimError::Config("estimator gain must be 5x4".into()));
        }
        if self.pi.shape() != (NY_E, NY_E) {
            return Err(SimError::Config("monitor matrix must be 4x4".into()));
        }
        if self.pi.clone().cholesky().is_none() {
            return Err(SimError::Config("monitor matrix must be positive definite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub x: [f64; 5],
    pub x_hat: [f64; 5],
    pub e: [f64; 5],
    pub u: f64,
    pub u_prev: f64,
    pub y: [f64; 2],
    pub y_e: [f64; 4],
    pub r: [f64; 4],
    pub z: f64,
    pub alarm: bool,
    pub delta: [f64; 2],
    pub w_d: [f64; 2],
    pub w_u: f64,
    pub w_e: [f64; 4],
    /// Bumper-to-bumper distance `e_r + s + h·v`.
    pub gap: f64,
}

impl StepRecord {
    pub fn zeta(&self) -> DVector<f64> {
        let mut z = DVector::zeros(N_ZETA);
        z.rows_mut(0, NX).copy_from_slice(&self.x);
        z[NX] = self.u;
        z
    }

    pub fn x_vec(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.x)
    }

    pub fn e_vec(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub ts: f64,
    /// `vehicles[i][k-1]` is vehicle `i+1` at step `k`.
    pub vehicles: Vec<Vec<StepRecord>>,
    /// Noise samples scaled back onto their quadratic bound.
    pub clipped_samples: usize,
    /// Steps where the stealthy attacker could not reach `z ≤ γ`.
    pub stealth_infeasible_steps: usize,
}

pub const CSV_COLUMNS: &[&str] = &[
    "vehicle", "k", "e_r", "v", "a", "dv", "a_prev", "xh_e_r", "xh_v", "xh_a", "xh_dv",
    "xh_a_prev", "u", "u_prev", "y1", "y2", "ye1", "ye2", "ye3", "ye4", "r1", "r2", "r3", "r4",
    "z", "alarm", "delta1", "delta2", "w_d1", "w_d2", "w_u", "w_e1", "w_e2", "w_e3", "w_e4",
    "gap",
];

pub const TRACE_FORMAT_HELP: &str = "\
Trace CSV: one row per (vehicle, step), vehicles 1..m, steps 1..N.
  vehicle, k           vehicle index (1 follows the virtual reference) and step
  e_r v a dv a_prev    true state: spacing error, speed, acceleration,
                       relative speed to predecessor, predecessor acceleration
  xh_*                 estimator state in the same order
  u u_prev             own desired acceleration and the received predecessor value
  y1 y2                controller measurements (spacing error, dv - h a), attacked
  ye1..ye4             estimator measurements (e_r, v, a, dv), attacked on ye1 and ye4
  r1..r4               residual y_e - C_e x_hat
  z alarm              monitor statistic r' Pi r and alarm flag (z > 1)
  delta1 delta2        injected sensor attack
  w_d1 w_d2 w_u        controller measurement noise and V2V noise
  w_e1..w_e4           estimator measurement noise
  gap                  bumper distance e_r + s + h v (negative means collision)
";

impl SimTrace {
    pub fn to_csv(&self) -> String {
        let mut s = CSV_COLUMNS.join(",");
        s.push('\n');
        for (i, recs) in self.vehicles.iter().enumerate() {
            for r in recs {
                let mut vals: Vec<String> = vec![(i + 1).to_string(), r.k.to_string()];
                let (uu, zz, wu, gg) = ([r.u, r.u_prev], [r.z], [r.w_u], [r.gap]);
                let nums = r
                    .x
                    .iter()
                    .chain(&r.x_hat)
                    .chain(&uu)
                    .chain(&r.y)
                    .chain(&r.y_e)
                    .chain(&r.r)
                    .chain(&zz);
                vals.extend(nums.map(|v| format!("{v:e}")));
                vals.push(u8::from(r.alarm).to_string());
                let rest = r
                    .delta
                    .iter()
                    .chain(&r.w_d)
                    .chain(&wu)
                    .chain(&r.w_e)
                    .chain(&gg);
                vals.extend(rest.map(|v| format!("{v:e}")));
                let _ = writeln!(s, "{}", vals.join(","));
            }
        }
        s
    }
}

fn to_arr<const N: usize>(v: &DVector<f64>) -> [f64; N] {
    let mut a = [0.0; N];
    a.copy_from_slice(v.as_slice());
    a
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, half: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| if half > 0.0 { rng.gen_range(-half..half) } else { 0.0 })
}

/// Scales `w` onto `{wᵀw ≤ bound}` when it lies outside.
fn clip(w: &mut DVector<f64>, bound: f64, clipped: &mut usize) {
    let q = w.norm_squared();
    if q > bound {
        *w *= (bound / q).sqrt();
        *clipped += 1;
    }
}

/// Residual-space direction `g̃ = ℬ₅ᵀ (𝒜ᵀ)^H t` for a vehicle-state target.
pub fn residual_direction(plant: &DiscretePlant, k: &[f64; 2], target: &[f64; 5], lookahead: usize) -> DVector<f64> {
    let cl = build_closed_loop(plant, &RowDVector::from_row_slice(k));
    let mut t = DVector::zeros(N_ZETA);
    t.rows_mut(0, NX).copy_from_slice(target);
    for _ in 0..lookahead {
        t = cl.acal.transpose() * t;
    }
    cl.b[4].transpose() * t
}

#[derive(Debug, Clone, PartialEq)]
pub struct StealthyStep {
    pub delta: DVector<f64>,
    pub residual: DVector<f64>,
    pub z: f64,
    /// False when the unattackable residual part alone exceeds `γ`.
    pub feasible: bool,
}

/// Greedy stealthy injection.
///
/// With `r = r_c + Γv`, where `r_c = (I − ΓΓ†)(C_e e + ω_e)` is out of the
/// attacker's reach, picks `v` maximizing `g̃ᵀΓv` subject to
/// `(r_c + Γv)ᵀΠ(r_c + Γv) ≤ γ`, then `δ = v − Γ†(C_e e + ω_e)`. When even the
/// best `v` violates the bound, or `Γᵀg̃ = 0`, the minimum-`z` point is used.
pub fn stealthy_attack_step(
    plant: &DiscretePlant,
    e: &DVector<f64>,
    w_e: &DVector<f64>,
    pi: &DMatrix<f64>,
    g_tilde: &DVector<f64>,
    gamma: f64,
) -> StealthyStep {
    let gamma_m = &plant.gamma;
    let honest = &plant.c_e * e + w_e;
    let r_c = plant.trusted_projector() * &honest;
    let m = gamma_m.transpose() * pi * gamma_m;
    let m_chol = m.clone().cholesky().expect("monitor restricted to attacked channels is SPD");
    let v0 = -m_chol.solve(&(gamma_m.transpose() * pi * &r_c));
    let q_min = quad_form(pi, &r_c) - quad_form(&m, &v0);
    let h = gamma_m.transpose() * g_tilde;
    let room = gamma - q_min;
    let (v, feasible) = if room < 0.0 {
        (v0, false)
    } else {
        let minv_h = m_chol.solve(&h);
        let denom = h.dot(&minv_h);
        if denom > 0.0 {
            (&v0 + minv_h * (room / denom).sqrt(), true)
        } else {
            (v0, true)
        }
    };
    let delta = &v - &plant.gamma_pinv * &honest;
    let residual = &honest + gamma_m * &delta;
    let z = quad_form(pi, &residual);
    StealthyStep {
        delta,
        residual,
        z,
        feasible,
    }
}

pub fn simulate(plant: &DiscretePlant, bounds: &NoiseBounds, design: &Design, config: &SimConfig) -> Result<SimTrace> {
    config.validate()?;
    design.validate()?;
    let m = config.vehicles;
    let params = &plant.params;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k_row = RowDVector::from_row_slice(&design.k);

    let mut x: Vec<DVector<f64>> = (0..m).map(|i| config.initial_state(i)).collect();
    let mut x_hat: Vec<DVector<f64>> = match &config.initial_estimate {
        InitialEstimate::Exact => x.clone(),
        InitialEstimate::Random { spread } => x
            .iter()
            .map(|xi| xi + uniform_vec(&mut rng, NX, *spread))
            .collect(),
        InitialEstimate::Given { values } => (0..m)
            .map(|i| DVector::from_row_slice(values.get(i).unwrap_or(&values[0])))
            .collect(),
    };
    let mut u = vec![0.0; m];

    let g_tilde = match &config.attack {
        AttackPolicy::StealthyGreedy { target, lookahead, .. } => {
            let t = target.unwrap_or([-1.0, -params.h, 0.0, 0.0, 0.0]);
            Some(residual_direction(plant, &design.k, &t, *lookahead))
        }
        _ => None,
    };

    let mut trace = SimTrace {
        ts: params.ts,
        vehicles: vec![Vec::with_capacity(config.steps); m],
        clipped_samples: 0,
        stealth_infeasible_steps: 0,
    };

    for k in 1..=config.steps {
        let lead = config.lead_input.at(k);
        let mut next_x = Vec::with_capacity(m);
        let mut next_xh = Vec::with_capacity(m);
        let mut next_u = Vec::with_capacity(m);
        for i in 0..m {
            let u_prev = if i == 0 { lead } else { u[i - 1] };
            let mut w_d = uniform_vec(&mut rng, 2, config.disturbances.w_d);
            clip(&mut w_d, bounds.w1_bar, &mut trace.clipped_samples);
            let mut w_u = uniform_vec(&mut rng, 1, config.disturbances.w_u);
            clip(&mut w_u, bounds.w2_bar, &mut trace.clipped_samples);
            let w_u = w_u[0];
            let mut w_e = uniform_vec(&mut rng, NY_E, config.disturbances.w_e);
            clip(&mut w_e, bounds.w3_bar, &mut trace.clipped_samples);

            let e = &x[i] - &x_hat[i];
            let attacked = i + 1 == config.attacked_vehicle;
            let delta = if !attacked {
                DVector::zeros(2)
            } else {
                match &config.attack {
                    AttackPolicy::None => DVector::zeros(2),
                    AttackPolicy::RandomBounded { magnitude } => uniform_vec(&mut rng, 2, *magnitude),
                    AttackPolicy::Constant { delta } => DVector::from_row_slice(delta),
                    AttackPolicy::StealthyGreedy { gamma, .. } => {
                        let step = stealthy_attack_step(
                            plant,
                            &e,
                            &w_e,
                            &design.pi,
                            g_tilde.as_ref().expect("direction computed for this policy"),
                            *gamma,
                        );
                        if !step.feasible {
                            trace.stealth_infeasible_steps += 1;
                        }
                        step.delta
                    }
                }
            };

            let y = &plant.c * &x[i] + &w_d + &delta;
            let y_e = &plant.c_e * &x[i] + &w_e + &plant.gamma * &delta;
            let r = &y_e - &plant.c_e * &x_hat[i];
            let z = quad_form(&design.pi, &r);

            trace.vehicles[i].push(StepRecord {
                k,
                x: to_arr(&x[i]),
                x_hat: to_arr(&x_hat[i]),
                e: to_arr(&e),
                u: u[i],
                u_prev,
                y: to_arr(&y),
                y_e: to_arr(&y_e),
                r: to_arr(&r),
                z,
                alarm: z > 1.0,
                delta: to_arr(&delta),
                w_d: to_arr(&w_d),
                w_u,
                w_e: to_arr(&w_e),
                gap: x[i][0] + params.standstill + params.h * x[i][1],
            });

            let xn = &plant.a * &x[i] + &plant.b1 * u[i] + &plant.b2 * u_prev;
            let un = plant.a_u * u[i]
                + plant.b_u * (&k_row * &y)[0]
                + plant.b_u * (u_prev + w_u);
            let xhn = &plant.a * &x_hat[i]
                + &plant.b1 * u[i]
                + &plant.b2 * (u_prev + w_u)
                + &design.l * &r;
            let mag = xn.amax().max(un.abs()).max(xhn.amax());
            if !(mag <= DIVERGENCE_LIMIT) {
                return Err(SimError::Divergence {
                    step: k + 1,
                    vehicle: i + 1,
                    magnitude: mag,
                });
            }
            next_x.push(xn);
            next_xh.push(xhn);
            next_u.push(un);
        }
        x = next_x;
        x_hat = next_xh;
        u = next_u;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRatios {
    pub signal: String,
    /// `norms[i]` for vehicle `i+1`.
    pub norms: Vec<f64>,
    /// `ratios[j]` is `‖z_{j+2}‖ / ‖z_{j+1}‖`; `None` when the upstream norm is zero.
    pub ratios: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StringStabilityReport {
    pub signals: Vec<SignalRatios>,
}

impl StringStabilityReport {
    pub fn signal(&self, name: &str) -> Option<&SignalRatios> {
        self.signals.iter().find(|s| s.signal == name)
    }
}

/// `Ts`-weighted discrete L₂ norms of `e_r`, `v − v(1)` and `a` per vehicle.
pub fn string_stability_report(trace: &SimTrace) -> StringStabilityReport {
    let signals = [("e_r", 0usize), ("v", 1), ("a", 2)]
        .iter()
        .map(|(name, idx)| {
            let norms: Vec<f64> = trace
                .vehicles
                .iter()
                .map(|recs| {
                    let base = if *idx == 1 { recs.first().map_or(0.0, |r| r.x[1]) } else { 0.0 };
                    (trace.ts * recs.iter().map(|r| (r.x[*idx] - base).powi(2)).sum::<f64>()).sqrt()
                })
                .collect();
            let ratios = norms
                .windows(2)
                .map(|w| if w[0] > 0.0 { Some(w[1] / w[0]) } else { None })
                .collect();
            SignalRatios {
                signal: name.to_string(),
                norms,
                ratios,
            }
        })
        .collect();
    StringStabilityReport { signals }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub vehicle: usize,
    pub kbar_star: usize,
    pub steps_after_kbar: usize,
    pub alarms_after_kbar: usize,
    pub false_alarm_rate: f64,
    pub max_z: f64,
    pub first_alarm_step: Option<usize>,
}

/// Alarm statistics for one vehicle (1-based); the rate counts steps `k ≥ k̄*`.
pub fn detection_metrics(trace: &SimTrace, vehicle: usize, kbar_star: usize) -> DetectionMetrics {
    let recs = &trace.vehicles[vehicle - 1];
    let after: Vec<&StepRecord> = recs.iter().filter(|r| r.k >= kbar_star).collect();
    let alarms = after.iter().filter(|r| r.alarm).count();
    DetectionMetrics {
        vehicle,
        kbar_star,
        steps_after_kbar: after.len(),
        alarms_after_kbar: alarms,
        false_alarm_rate: if after.is_empty() { 0.0 } else { alarms as f64 / after.len() as f64 },
        max_z: recs.iter().map(|r| r.z).fold(0.0, f64::max),
        first_alarm_step: recs.iter().find(|r| r.alarm).map(|r| r.k),
    }
}

/// Largest excess `vᵀPv − α_k` along a trajectory, with
/// `α_k = a^{k−1} v(1)ᵀPv(1) + (N − a)(1 − a^{k−1})/(1 − a)`.
pub fn max_level_excess(states: &[DVector<f64>], p: &DMatrix<f64>, a: f64, n_channels: usize) -> f64 {
    let Some(first) = states.first() else {
        return f64::NEG_INFINITY;
    };
    let v1 = quad_form(p, first);
    states
        .iter()
        .enumerate()
        .map(|(i, s)| quad_form(p, s) - crate::sdp::ellipsoid_level(a, n_channels, v1, i + 1))
        .fold(f64::NEG_INFINITY, f64::max)
}

//! Scenario configuration: a sectioned TOML file covering the vehicle, the
//! noise bounds, synthesis options and the simulation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{NoiseBounds, VehicleParams};
use crate::sdp::{unit_grid, SolverOptions};
use crate::simulator::{AttackPolicy, DisturbanceSpec, InitialEstimate, LeadInput, SimConfig};
use crate::synthesis::{EstimatorGrid, ObjectiveWeights};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {key}: {message}")]
    Invalid {
        line: usize,
        key: String,
        message: String,
    },
    /// A constraint on a key that is not written in the file (a default).
    #[error("{key}: {message}")]
    InvalidDefault { key: String, message: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub eps: f64,
    pub lambda_max: f64,
    /// Step of the `a` and `c` axes (and of the controller `a` axis).
    pub grid_step: f64,
    /// Step of the `a₃` and τ₁-fraction axes.
    pub inner_grid_step: f64,
    pub refinement_rounds: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.95,
            alpha2: 0.05,
            eps: 1e-3,
            lambda_max: -0.01,
            grid_step: 0.05,
            inner_grid_step: 0.1,
            refinement_rounds: 1,
        }
    }
}

impl SynthesisConfig {
    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
        }
    }

    pub fn estimator_grid(&self) -> EstimatorGrid {
        EstimatorGrid::with_steps(self.grid_step, self.inner_grid_step, self.refinement_rounds)
    }

    pub fn scalar_grid(&self) -> Vec<f64> {
        unit_grid(self.grid_step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub steps: usize,
    pub seed: u64,
    pub vehicles: usize,
    pub attacked_vehicle: usize,
    pub initial_states: Vec<[f64; 5]>,
    pub lead_input: LeadInput,
    pub disturbances: DisturbanceSpec,
    pub attack: AttackPolicy,
    pub initial_estimate: InitialEstimate,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            steps: 500,
            seed: 1,
            vehicles: 2,
            attacked_vehicle: 2,
            initial_states: vec![[0.0, 30.0, 0.0, 0.0, 0.0]],
            lead_input: LeadInput::ExpDecay {
                amplitude: 2.0,
                rate: 0.1,
            },
            disturbances: DisturbanceSpec {
                w_d: 0.07,
                w_u: 0.01,
                w_e: 0.07,
            },
            attack: AttackPolicy::None,
            initial_estimate: InitialEstimate::Random { spread: 1.0 },
        }
    }
}

impl SimulationSection {
    pub fn to_sim_config(&self) -> SimConfig {
        SimConfig {
            steps: self.steps,
            seed: self.seed,
            vehicles: self.vehicles,
            lead_input: self.lead_input.clone(),
            disturbances: self.disturbances,
            attack: self.attack.clone(),
            attacked_vehicle: self.attacked_vehicle,
            initial_states: self.initial_states.clone(),
            initial_estimate: self.initial_estimate.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub vehicle: VehicleParams,
    pub noise: NoiseBounds,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Line (1-based) of `key = ...` inside `[section]`, if written in the file.
pub fn locate_key(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(h) = line.strip_prefix('[') {
            current = h.trim_end_matches(']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

struct Checker<'a> {
    text: Option<&'a str>,
}

impl Checker<'_> {
    fn fail(&self, section: &str, key: &str, message: String) -> ConfigError {
        let full = format!("{section}.{key}");
        match self.text.and_then(|t| locate_key(t, section, key)) {
            Some(line) => ConfigError::Invalid {
                line,
                key: full,
                message,
            },
            None => ConfigError::InvalidDefault { key: full, message },
        }
    }

    fn positive(&self, section: &str, key: &str, v: f64) -> Result<()> {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(self.fail(section, key, format!("must be positive and finite, got {v}")))
        }
    }

    fn open_unit(&self, section: &str, key: &str, v: f64) -> Result<()> {
        if v > 0.0 && v < 1.0 {
            Ok(())
        } else {
            Err(self.fail(section, key, format!("must lie in (0, 1), got {v}")))
        }
    }
}

impl ScenarioConfig {
    pub fn reference() -> Self {
        Self::from_str(REFERENCE_CONFIG).expect("bundled config is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.span().map_or(1, |s| line_of_offset(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.check(Some(text))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.check(None)
    }

    fn check(&self, text: Option<&str>) -> Result<()> {
        let c = Checker { text };
        let v = &self.vehicle;
        for (k, x) in [
            ("h", v.h),
            ("tau", v.tau),
            ("ts", v.ts),
            ("standstill", v.standstill),
            ("length", v.length),
            ("v_max", v.v_max),
        ] {
            c.positive("vehicle", k, x)?;
        }
        let n = &self.noise;
        for (k, x) in [
            ("u_bar", n.u_bar),
            ("w1_bar", n.w1_bar),
            ("w2_bar", n.w2_bar),
            ("w3_bar", n.w3_bar),
        ] {
            c.positive("noise", k, x)?;
        }

        let s = &self.synthesis;
        c.open_unit("synthesis", "alpha1", s.alpha1)?;
        c.open_unit("synthesis", "alpha2", s.alpha2)?;
        if (s.alpha1 + s.alpha2 - 1.0).abs() > 1e-12 {
            return Err(c.fail("synthesis", "alpha2", format!("alpha1 + alpha2 must equal 1, got {}", s.alpha1 + s.alpha2)));
        }
        c.positive("synthesis", "eps", s.eps)?;
        if !(s.lambda_max < 0.0 && s.lambda_max.is_finite()) {
            return Err(c.fail("synthesis", "lambda_max", format!("must be negative, got {}", s.lambda_max)));
        }
        c.open_unit("synthesis", "grid_step", s.grid_step)?;
        c.open_unit("synthesis", "inner_grid_step", s.inner_grid_step)?;

        let o = &self.solver;
        for (k, x) in [("relax", o.relax), ("gap_tol", o.gap_tol), ("radius", o.radius)] {
            c.positive("solver", k, x)?;
        }
        if !(o.mu > 1.0) {
            return Err(c.fail("solver", "mu", format!("must exceed 1, got {}", o.mu)));
        }

        let sim = &self.simulation;
        if sim.steps == 0 {
            return Err(c.fail("simulation", "steps", "must be at least 1".into()));
        }
        if sim.vehicles == 0 {
            return Err(c.fail("simulation", "vehicles", "must be at least 1".into()));
        }
        if sim.attacked_vehicle == 0 || sim.attacked_vehicle > sim.vehicles {
            return Err(c.fail(
                "simulation",
                "attacked_vehicle",
                format!("must lie in 1..={}, got {}", sim.vehicles, sim.attacked_vehicle),
            ));
        }
        if !(sim.initial_states.len() == 1 || sim.initial_states.len() == sim.vehicles) {
            return Err(c.fail(
                "simulation",
                "initial_states",
                format!("expected 1 or {} states, got {}", sim.vehicles, sim.initial_states.len()),
            ));
        }
        for (k, x) in [
            ("w_d", sim.disturbances.w_d),
            ("w_u", sim.disturbances.w_u),
            ("w_e", sim.disturbances.w_e),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(c.fail("simulation.disturbances", k, format!("must be nonnegative, got {x}")));
            }
        }
        if let AttackPolicy::StealthyGreedy { gamma, .. } = sim.attack {
            if !(0.0..=1.0).contains(&gamma) {
                return Err(c.fail("simulation.attack", "gamma", format!("must lie in [0, 1], got {gamma}")));
            }
        }
        sim.to_sim_config()
            .validate()
            .map_err(|e| c.fail("simulation", "attack", e.to_string()))?;
        Ok(())
    }
}

/// The bundled reference scenario.
pub const REFERENCE_CONFIG: &str = include_str!("../data/reference.cfg");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_round_trips() {
        let a = ScenarioConfig::reference();
        let b = ScenarioConfig::from_str(&a.to_toml()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_channel_bound_names_its_line() {
        let text = REFERENCE_CONFIG.replace("w2_bar = 1e-4", "w2_bar = 0.0");
        let want = locate_key(&text, "noise", "w2_bar").unwrap();
        match ScenarioConfig::from_str(&text) {
            Err(ConfigError::Invalid { line, key, .. }) => {
                assert_eq!(line, want);
                assert_eq!(key, "noise.w2_bar");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nonnegative_lambda_rejected() {
        let text = REFERENCE_CONFIG.replace("lambda_max = -0.01", "lambda_max = 0.0");
        assert!(matches!(
            ScenarioConfig::from_str(&text),
            Err(ConfigError::Invalid { ref key, .. }) if key == "synthesis.lambda_max"
        ));
    }

    #[test]
    fn syntax_error_has_line() {
        let text = "[vehicle]\nh = 0.5\ntau = = 1\n";
        match ScenarioConfig::from_str(text) {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let text = REFERENCE_CONFIG.replace("[synthesis]", "[synthesis]\nbogus = 1");
        assert!(matches!(ScenarioConfig::from_str(&text), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let text = "[vehicle]\nh = 0.5\ntau = 0.1\nts = 0.1\nstandstill = 3\nlength = 4.5\nv_max = 35\n\
                    [noise]\nu_bar = 4\nw1_bar = 0.01\nw2_bar = 1e-4\nw3_bar = 0.02\n";
        let c = ScenarioConfig::from_str(text).unwrap();
        assert_eq!(c.synthesis, SynthesisConfig::default());
        assert_eq!(c.simulation, SimulationSection::default());
    }
}

//! End-to-end runs: synthesize a design, certify and assess it, simulate it,
//! and compare against a fixed baseline.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessment::{self, project_to_state, reach_ellipsoid, CriticalStates, ReachCertificate, SafetyVerdict};
use crate::config::{ConfigError, ScenarioConfig};
use crate::linalg::{quad_form, rows};
use crate::model::{build_plant, DiscretePlant, ModelError};
use crate::simulator::{self, detection_metrics, string_stability_report, Design, DetectionMetrics, SimTrace, StringStabilityReport};
use crate::synthesis::{
    self, certify_error_bound, kbar_star, synthesize_controller, synthesize_estimator_monitor, ControllerResult,
    ErrorCertificate, EstimatorMonitorResult,
};

pub const BASELINE_DESIGN: &str = include_str!("../data/baseline_design.toml");
pub const PUBLISHED_DESIGN: &str = include_str!("../data/published_design.toml");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("design file {0} not found")]
    DesignMissing(String),
    #[error("design file {path}: {message}")]
    Design { path: String, message: String },
    #[error("synthesis: {0}")]
    Synthesis(#[from] synthesis::SynthesisError),
    #[error("assessment: {0}")]
    Assessment(#[from] assessment::AssessmentError),
    #[error("simulation: {0}")]
    Simulation(#[from] simulator::SimError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Certified bound `eᵀPᵉe ≤ α_∞ᵉ` on the attacked estimation error, with the
/// attack-free contraction rate `c` when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    #[serde(with = "rows")]
    pub p_e: DMatrix<f64>,
    pub alpha_inf_e: f64,
    pub c: Option<f64>,
    pub alpha_bar_inf_e: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignFile {
    pub label: String,
    #[serde(with = "rows")]
    pub l: DMatrix<f64>,
    #[serde(with = "rows")]
    pub pi: DMatrix<f64>,
    pub k: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hinf_gain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_bound: Option<ErrorBound>,
}

impl DesignFile {
    pub fn baseline() -> Self {
        Self::from_toml(BASELINE_DESIGN).expect("bundled baseline design parses")
    }

    pub fn published() -> Self {
        Self::from_toml(PUBLISHED_DESIGN).expect("bundled published design parses")
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let d: DesignFile = toml::from_str(text).map_err(|e| e.to_string())?;
        d.design().validate().map_err(|e| e.to_string())?;
        Ok(d)
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let d: DesignFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        d.design().validate().map_err(|e| e.to_string())?;
        Ok(d)
    }

    /// JSON for `.json` paths, TOML otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let err = |message: String| PipelineError::Design {
            path: path.display().to_string(),
            message,
        };
        if !path.exists() {
            return Err(PipelineError::DesignMissing(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text).map_err(err)
        } else {
            Self::from_toml(&text).map_err(err)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("design serializes")
    }

    pub fn design(&self) -> Design {
        Design {
            l: self.l.clone(),
            pi: self.pi.clone(),
            k: self.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOutcome {
    pub estimator: EstimatorMonitorResult,
    pub controller: ControllerResult,
    pub design: DesignFile,
}

pub fn plant_for(cfg: &ScenarioConfig) -> Result<DiscretePlant> {
    Ok(build_plant(&cfg.vehicle)?)
}

pub fn synthesize(cfg: &ScenarioConfig) -> Result<SynthesisOutcome> {
    cfg.validate()?;
    let plant = plant_for(cfg)?;
    let s = &cfg.synthesis;
    // fail on the gain bounds before spending time on the estimator sweep
    synthesis::GainBounds::new(plant.params.tau, s.lambda_max)?;
    let est = synthesize_estimator_monitor(&plant, &cfg.noise, &s.weights(), s.eps, &s.estimator_grid(), &cfg.solver)?;
    let ctl = synthesize_controller(
        &plant,
        &cfg.noise,
        &est.pi,
        &est.p_e,
        est.alpha_inf_e,
        s.eps,
        s.lambda_max,
        &s.scalar_grid(),
        s.refinement_rounds,
        &cfg.solver,
    )?;
    let design = DesignFile {
        label: "synthesized".into(),
        l: est.l.clone(),
        pi: est.pi.clone(),
        k: ctl.k,
        hinf_gain: None,
        error_bound: Some(ErrorBound {
            p_e: est.p_e.clone(),
            alpha_inf_e: est.alpha_inf_e,
            c: Some(est.scalars.c),
            alpha_bar_inf_e: Some(est.alpha_bar_inf_e),
        }),
    };
    Ok(SynthesisOutcome {
        estimator: est,
        controller: ctl,
        design,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentOutcome {
    pub label: String,
    /// Present when the design carried no error bound and one was certified here.
    pub error_certificate: Option<ErrorCertificate>,
    pub reach: ReachCertificate,
    pub verdict: SafetyVerdict,
}

pub fn error_bound_for(cfg: &ScenarioConfig, design: &DesignFile) -> Result<(ErrorBound, Option<ErrorCertificate>)> {
    if let Some(b) = &design.error_bound {
        return Ok((b.clone(), None));
    }
    let plant = plant_for(cfg)?;
    let cert = certify_error_bound(
        &plant,
        &cfg.noise,
        &design.l,
        &design.pi,
        &cfg.synthesis.scalar_grid(),
        cfg.synthesis.refinement_rounds,
        &cfg.solver,
    )?;
    let bound = ErrorBound {
        p_e: cert.p_e.clone(),
        alpha_inf_e: cert.alpha_inf_e,
        c: None,
        alpha_bar_inf_e: None,
    };
    Ok((bound, Some(cert)))
}

pub fn assess_design(cfg: &ScenarioConfig, design: &DesignFile) -> Result<AssessmentOutcome> {
    cfg.validate()?;
    let plant = plant_for(cfg)?;
    let (bound, error_certificate) = error_bound_for(cfg, design)?;
    let reach = reach_ellipsoid(
        &plant,
        &design.k,
        &cfg.noise,
        &design.pi,
        &bound.p_e,
        bound.alpha_inf_e,
        cfg.synthesis.eps,
        &cfg.synthesis.scalar_grid(),
        cfg.synthesis.refinement_rounds,
        &cfg.solver,
    )?;
    let p_x = project_to_state(&reach.p_zeta, reach.alpha_inf_zeta)?;
    let verdict = assessment::assess(&p_x, &CriticalStates::for_vehicle(&cfg.vehicle));
    Ok(AssessmentOutcome {
        label: design.label.clone(),
        error_certificate,
        reach,
        verdict,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub string_stability: StringStabilityReport,
    pub detection: Vec<DetectionMetrics>,
    /// Start of the alarm-free window, when the design carries an attack-free bound.
    pub kbar_star: Option<usize>,
    pub clipped_samples: usize,
    pub stealth_infeasible_steps: usize,
    pub min_gap: f64,
    pub collision: bool,
}

pub fn simulate_design(cfg: &ScenarioConfig, design: &DesignFile) -> Result<(SimTrace, SimulationSummary)> {
    cfg.validate()?;
    let plant = plant_for(cfg)?;
    let trace = simulator::simulate(&plant, &cfg.noise, &design.design(), &cfg.simulation.to_sim_config())?;
    let summary = summarize(cfg, design, &trace);
    Ok((trace, summary))
}

pub fn summarize(cfg: &ScenarioConfig, design: &DesignFile, trace: &SimTrace) -> SimulationSummary {
    let kbar = |vehicle: usize| -> Option<usize> {
        let b = design.error_bound.as_ref()?;
        let (c, alpha_bar) = (b.c?, b.alpha_bar_inf_e?);
        let e1 = trace.vehicles[vehicle - 1].first()?.e_vec();
        Some(kbar_star(c, quad_form(&b.p_e, &e1), alpha_bar, cfg.synthesis.eps))
    };
    let detection: Vec<DetectionMetrics> = (1..=trace.vehicles.len())
        .map(|v| detection_metrics(trace, v, kbar(v).unwrap_or(1)))
        .collect();
    let min_gap = trace
        .vehicles
        .iter()
        .flatten()
        .map(|r| r.gap)
        .fold(f64::INFINITY, f64::min);
    SimulationSummary {
        string_stability: string_stability_report(trace),
        detection,
        kbar_star: kbar(cfg.simulation.attacked_vehicle),
        clipped_samples: trace.clipped_samples,
        stealth_infeasible_steps: trace.stealth_infeasible_steps,
        min_gap,
        collision: min_gap < 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceOutcome {
    pub synthesis: SynthesisOutcome,
    pub synthesized: AssessmentOutcome,
    pub baseline: AssessmentOutcome,
    pub checks: Vec<Check>,
}

impl ReproduceOutcome {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>9} {:>14} {:>14} {:>14} {:>14}\n",
            "design", "k", "collision", "overspeed", "d_inf", "d_inf oracle"
        );
        for (o, k) in [
            (&self.synthesized, self.synthesis.design.k),
            (&self.baseline, self.baseline.reach.k),
        ] {
            let v = &o.verdict;
            let d = |n: &str| v.distances.iter().find(|d| d.name == n).map_or(f64::NAN, |d| d.formula);
            s.push_str(&format!(
                "{:<12} {:>9} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}\n",
                o.label,
                format!("{:.3},{:.3}", k[0], k[1]),
                d("collision"),
                d("overspeed"),
                v.d_inf,
                v.d_inf_oracle
            ));
        }
        for c in &self.checks {
            s.push_str(&format!("{} {}: {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        s
    }
}

pub fn reproduce_checks(synth: &SafetyVerdict, base: &SafetyVerdict) -> Vec<Check> {
    vec![
        Check {
            name: "synthesized d_inf > 0".into(),
            pass: synth.d_inf > 0.0,
            detail: format!("d_inf = {:.6e} (oracle {:.6e})", synth.d_inf, synth.d_inf_oracle),
        },
        Check {
            name: "baseline d_inf < 0".into(),
            pass: base.d_inf < 0.0,
            detail: format!("d_inf = {:.6e} (oracle {:.6e})", base.d_inf, base.d_inf_oracle),
        },
        Check {
            name: "baseline |d_inf| > 100".into(),
            pass: base.d_inf.abs() > 100.0,
            detail: format!("|d_inf| = {:.6e}", base.d_inf.abs()),
        },
    ]
}

pub fn reproduce(cfg: &ScenarioConfig, baseline: &DesignFile) -> Result<ReproduceOutcome> {
    let synthesis = synthesize(cfg)?;
    let synthesized = assess_design(cfg, &synthesis.design)?;
    let baseline = assess_design(cfg, baseline)?;
    let checks = reproduce_checks(&synthesized.verdict, &baseline.verdict);
    Ok(ReproduceOutcome {
        synthesis,
        synthesized,
        baseline,
        checks,
    })
}

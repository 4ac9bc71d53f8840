//! JSON run reports. A report carries the fully resolved config so the run can
//! be repeated from the report alone.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ScenarioConfig;
use crate::pipeline::{AssessmentOutcome, Check, SimulationSummary, SynthesisOutcome};

pub const TOOL_NAME: &str = "platoon-shield";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// SHA-256 of the canonical TOML rendering of `config`.
    pub config_digest: String,
    pub config: ScenarioConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesisOutcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub assessments: Vec<AssessmentOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<Check>,
}

pub fn config_digest(cfg: &ScenarioConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunReport {
    pub fn new(command: &str, config: &ScenarioConfig) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            config_digest: config_digest(config),
            config: config.clone(),
            synthesis: None,
            assessments: Vec::new(),
            simulation: None,
            checks: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// The embedded config still hashes to the recorded digest.
    pub fn digest_matches(&self) -> bool {
        config_digest(&self.config) == self.config_digest
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_config() {
        let mut cfg = ScenarioConfig::reference();
        let r = RunReport::new("simulate", &cfg);
        assert!(r.digest_matches());
        assert_eq!(r.config_digest.len(), 64);
        cfg.simulation.seed += 1;
        assert_ne!(config_digest(&cfg), r.config_digest);
    }

    #[test]
    fn report_json_round_trip() {
        let r = RunReport::new("assess", &ScenarioConfig::reference());
        let back = RunReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(back.digest_matches());
    }
}

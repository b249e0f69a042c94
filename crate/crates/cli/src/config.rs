use std::path::Path;

use serde::{Deserialize, Serialize};

use mpmrestore::baselines::PenalizedConfig;
use mpmrestore::calibrate::CalibrationConfig;
use mpmrestore::noise::NoiseEstimateConfig;
use mpmrestore::pmms::{PenaltySchedule, RestorationConfig};
use mpmrestore::sim::{BeadSetup, RestorationSetup};

use crate::error::CliError;

/// Every tunable of the pipeline; missing keys take their defaults, unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub bead: BeadSetup,
    pub restoration_setup: RestorationSetup,
    pub calibration: CalibrationConfig,
    pub noise: NoiseEstimateConfig,
    pub restoration: RestorationConfig,
    pub schedule: PenaltySchedule,
    pub baselines: BaselineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            bead: BeadSetup::default(),
            restoration_setup: RestorationSetup::default(),
            calibration: CalibrationConfig::default(),
            noise: NoiseEstimateConfig::default(),
            restoration: RestorationConfig::default(),
            schedule: PenaltySchedule::simulation(),
            baselines: BaselineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub rl_iters: usize,
    pub penalized: PenalizedConfig,
    /// Log-spaced χ grid `[lo, hi]` with `chi_points` values.
    pub chi_range: [f64; 2],
    pub chi_points: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { rl_iters: 50, penalized: PenalizedConfig::default(), chi_range: [1e-5, 1.0], chi_points: 15 }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn dump(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&c.dump()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::parse("seed = 3\nbogus = 1\n").is_err());
        assert!(PipelineConfig::parse("[calibration]\ncrop = [8, 8, 8]\nwhat = 2\n").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = PipelineConfig::parse("seed = 9\n[schedule]\nmax_outer = 3\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.schedule.max_outer, 3);
        assert_eq!(c.schedule.gamma_power, 2.0);
        assert_eq!(c.baselines.rl_iters, 50);
    }
}

use std::path::Path;

use arena_core::bootstrap::BootstrapConfig;
use arena_core::{FitOptions, SchedulerConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Contents of the `--config` TOML file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scheduler: SchedulerConfig,
    pub fit: FitOptions,
    pub bootstrap: BootstrapConfig,
    pub simulation: SimulationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub prompts: usize,
    /// Half-width of the uniform noise on synthetic feature scores.
    pub feature_noise: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            prompts: 200,
            feature_noise: 0.5,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        let config: Config =
            toml::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
        config.scheduler.validate()?;
        config.bootstrap.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_are_optional() {
        let c: Config = toml::from_str("[scheduler]\nalpha = 2.0\n").unwrap();
        assert_eq!(c.scheduler.alpha, 2.0);
        assert_eq!(c.scheduler.n0_pairs, SchedulerConfig::default().n0_pairs);
        assert_eq!(c.simulation, SimulationConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("[scheduler]\nalhpa = 2.0\n").is_err());
        assert!(toml::from_str::<Config>("[nope]\n").is_err());
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::TrainConfig;
use crate::env::{EnvConfig, DEFAULT_D_MAX};
use crate::error::{config_err, Result};

/// Environment section of an experiment file. `arrival_rates`, when given,
/// overrides the uniform `arrival_rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub n_users: usize,
    pub arrival_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arrival_rates: Option<Vec<f64>>,
    pub success_prob: f64,
    pub d_max: u32,
    pub eta_max: f64,
    pub reward_on_next_state: bool,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            n_users: 20,
            arrival_rate: 0.75,
            arrival_rates: None,
            success_prob: 0.9,
            d_max: DEFAULT_D_MAX,
            eta_max: 0.85,
            reward_on_next_state: false,
        }
    }
}

impl EnvSection {
    pub fn to_config(&self) -> EnvConfig {
        EnvConfig {
            n_users: self.n_users,
            arrival_rates: self
                .arrival_rates
                .clone()
                .unwrap_or_else(|| vec![self.arrival_rate; self.n_users]),
            success_prob: self.success_prob,
            d_max: self.d_max,
            eta_max: self.eta_max,
            reward_on_next_state: self.reward_on_next_state,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub slots: usize,
    pub alphas: Vec<f64>,
    /// Independent evaluation episodes per policy.
    pub episodes: usize,
    /// Deploy the most likely action instead of sampling.
    pub greedy: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            slots: 5000,
            alphas: vec![0.75],
            episodes: 1,
            greedy: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    /// Training seeds used by sweeps.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Twenty users, as in the reference setup.
    Full,
    /// Five users and 200 iterations; finishes on a laptop.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(crate::error::arg_err(format!("unknown profile '{other}'"))),
        }
    }
}

/// Gradient steps per iteration in the desk profile.
pub const DESK_UPDATES_PER_ITERATION: usize = 4;

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Full => Self::default(),
            Profile::Desk => {
                let mut cfg = Self::default();
                cfg.env.n_users = 5;
                cfg.train.iterations = 200;
                cfg.train.updates_per_iteration = DESK_UPDATES_PER_ITERATION;
                cfg
            }
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        self.env.to_config()
    }

    pub fn validate(&self) -> Result<()> {
        self.env_config().validate()?;
        self.train.validate()?;
        if self.eval.slots == 0 {
            return Err(config_err("eval.slots must be positive"));
        }
        if self.eval.episodes == 0 {
            return Err(config_err("eval.episodes must be positive"));
        }
        if let Some(a) = self.eval.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(config_err(format!("eval alpha {a} outside (0, 1)")));
        }
        Ok(())
    }

    /// Parse TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| config_err(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }
}

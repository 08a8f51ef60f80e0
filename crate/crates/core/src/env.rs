//! Slotted multi-user status-update system.
//!
//! A scheduler keeps the newest packet of each of `N` users and may forward at
//! most one of them per slot over an unreliable channel. For every user it
//! tracks the newest version generated (`G`) and the newest version delivered
//! (`B`); the version age of information (VAoI) is the gap `G - B`, truncated at
//! `d_max`.
//!
//! Slot semantics used by [`StatusUpdateEnv::step`]: the observed state already
//! includes the arrivals of the current slot. A scheduled transmission is
//! resolved first (on success `B <- G`), the reward is charged on the
//! decision-time state, and then the arrivals of the next slot are drawn.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Result};

pub const DEFAULT_D_MAX: u32 = 50;

fn default_d_max() -> u32 {
    DEFAULT_D_MAX
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_users: usize,
    /// Per-user Bernoulli packet generation probabilities.
    pub arrival_rates: Vec<f64>,
    /// Probability that a scheduled transmission is delivered.
    pub success_prob: f64,
    #[serde(default = "default_d_max")]
    pub d_max: u32,
    /// Long-run average transmission budget.
    pub eta_max: f64,
    /// Charge the VAoI penalty on the post-transition state instead of the
    /// decision-time state.
    #[serde(default)]
    pub reward_on_next_state: bool,
}

impl EnvConfig {
    pub fn uniform(n_users: usize, rate: f64, success_prob: f64, eta_max: f64) -> Self {
        Self {
            n_users,
            arrival_rates: vec![rate; n_users],
            success_prob,
            d_max: DEFAULT_D_MAX,
            eta_max,
            reward_on_next_state: false,
        }
    }

    pub fn with_d_max(mut self, d_max: u32) -> Self {
        self.d_max = d_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(config_err("n_users must be positive"));
        }
        if self.arrival_rates.len() != self.n_users {
            return Err(config_err(format!(
                "expected {} arrival rates, got {}",
                self.n_users,
                self.arrival_rates.len()
            )));
        }
        if let Some(r) = self.arrival_rates.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(config_err(format!("arrival rate {r} outside (0, 1]")));
        }
        if !(self.success_prob > 0.0 && self.success_prob <= 1.0) {
            return Err(config_err(format!(
                "success probability {} outside (0, 1]",
                self.success_prob
            )));
        }
        if self.d_max == 0 {
            return Err(config_err("d_max must be at least 1"));
        }
        if !(self.eta_max > 0.0 && self.eta_max <= 1.0) {
            return Err(config_err(format!("eta_max {} outside (0, 1]", self.eta_max)));
        }
        Ok(())
    }

    pub fn n_actions(&self) -> usize {
        self.n_users + 1
    }
}

/// Observable VAoI vector plus the version counters behind it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub vaoi: Vec<u32>,
    pub scheduler_versions: Vec<u64>,
    pub destination_versions: Vec<u64>,
    pub slot: u64,
}

impl EnvState {
    fn zeros(n: usize) -> Self {
        Self {
            vaoi: vec![0; n],
            scheduler_versions: vec![0; n],
            destination_versions: vec![0; n],
            slot: 0,
        }
    }

    pub fn vaoi_sum(&self) -> u64 {
        self.vaoi.iter().map(|&v| v as u64).sum()
    }

    /// VAoI scaled by `1 / d_max` into `[0, 1]`, the network input features.
    pub fn features(&self, d_max: u32) -> Vec<f64> {
        normalize_vaoi(&self.vaoi, d_max)
    }
}

pub fn normalize_vaoi(vaoi: &[u32], d_max: u32) -> Vec<f64> {
    let scale = 1.0 / d_max as f64;
    vaoi.iter().map(|&v| v as f64 * scale).collect()
}

/// Random outcomes of one slot. `success` is ignored when the action idles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotDraws {
    pub success: bool,
    pub arrivals: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub arrivals: Vec<bool>,
    /// `None` when the scheduler idled.
    pub success: Option<bool>,
    /// Untruncated `G - B` after the transition.
    pub raw_vaoi: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub reward: f64,
    pub cost: u8,
    pub info: StepInfo,
}

/// Single-user VAoI transition shared by the simulator and the exact oracles.
#[inline]
pub fn next_vaoi(vaoi: u32, delivered: bool, arrived: bool, d_max: u32) -> u32 {
    let base = if delivered { 0 } else { vaoi };
    (base + arrived as u32).min(d_max)
}

/// `-sum(vaoi) - lambda * 1[action != 0]`.
pub fn compute_reward(vaoi: &[u32], action: usize, lambda: f64) -> f64 {
    let penalty: u64 = vaoi.iter().map(|&v| v as u64).sum();
    -(penalty as f64) - lambda * transmission_cost(action) as f64
}

#[inline]
pub fn transmission_cost(action: usize) -> u8 {
    (action != 0) as u8
}

pub struct StatusUpdateEnv {
    config: EnvConfig,
    state: EnvState,
    rng: ChaCha8Rng,
}

impl StatusUpdateEnv {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let state = EnvState::zeros(config.n_users);
        Ok(Self {
            config,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Zero all version counters and reseed the slot randomness.
    pub fn reset(&mut self, seed: u64) -> &EnvState {
        self.state = EnvState::zeros(self.config.n_users);
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        &self.state
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    fn check_action(&self, action: usize) -> Result<()> {
        if action > self.config.n_users {
            return Err(arg_err(format!(
                "action {action} outside [0, {}]",
                self.config.n_users
            )));
        }
        Ok(())
    }

    /// Draw the randomness of one slot. The channel outcome is only sampled
    /// when the action transmits, so idle slots consume `N` draws.
    pub fn draw(&mut self, action: usize) -> SlotDraws {
        let success = action != 0 && self.rng.random_bool(self.config.success_prob);
        let arrivals = self
            .config
            .arrival_rates
            .iter()
            .map(|&r| self.rng.random_bool(r))
            .collect();
        SlotDraws { success, arrivals }
    }

    pub fn step(&mut self, action: usize, lambda: f64) -> Result<StepOutcome> {
        self.check_action(action)?;
        let draws = self.draw(action);
        self.step_with(action, lambda, &draws)
    }

    /// Advance one slot using externally supplied outcomes.
    pub fn step_with(&mut self, action: usize, lambda: f64, draws: &SlotDraws) -> Result<StepOutcome> {
        self.check_action(action)?;
        let n = self.config.n_users;
        if draws.arrivals.len() != n {
            return Err(arg_err(format!(
                "expected {n} arrival flags, got {}",
                draws.arrivals.len()
            )));
        }
        let d_max = self.config.d_max;
        let decision_reward = compute_reward(&self.state.vaoi, action, lambda);
        let success = (action != 0).then_some(draws.success);

        let s = &mut self.state;
        for u in 0..n {
            let delivered = action == u + 1 && draws.success;
            if delivered {
                s.destination_versions[u] = s.scheduler_versions[u];
            }
            if draws.arrivals[u] {
                s.scheduler_versions[u] += 1;
            }
            s.vaoi[u] = next_vaoi(s.vaoi[u], delivered, draws.arrivals[u], d_max);
        }
        s.slot += 1;

        let raw_vaoi = s
            .scheduler_versions
            .iter()
            .zip(&s.destination_versions)
            .map(|(g, b)| g - b)
            .collect();
        let reward = if self.config.reward_on_next_state {
            compute_reward(&s.vaoi, action, lambda)
        } else {
            decision_reward
        };
        Ok(StepOutcome {
            next_state: s.clone(),
            reward,
            cost: transmission_cost(action),
            info: StepInfo {
                arrivals: draws.arrivals.clone(),
                success,
                raw_vaoi,
            },
        })
    }
}

/// CSV trace with columns `t, action, success, cost, vaoi_1..vaoi_N`.
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(writer: W, n_users: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string(), "action".into(), "success".into(), "cost".into()];
        header.extend((1..=n_users).map(|n| format!("vaoi_{n}")));
        inner.write_record(&header)?;
        Ok(Self { inner })
    }

    pub fn record(&mut self, action: usize, outcome: &StepOutcome) -> Result<()> {
        let success = match outcome.info.success {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        let mut row = vec![
            outcome.next_state.slot.to_string(),
            action.to_string(),
            success.to_string(),
            outcome.cost.to_string(),
        ];
        row.extend(outcome.next_state.vaoi.iter().map(|v| v.to_string()));
        self.inner.write_record(&row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_user(d_max: u32) -> StatusUpdateEnv {
        StatusUpdateEnv::new(EnvConfig::uniform(1, 0.5, 0.9, 0.85).with_d_max(d_max), 0).unwrap()
    }

    fn draws(success: bool, arrival: bool) -> SlotDraws {
        SlotDraws {
            success,
            arrivals: vec![arrival],
        }
    }

    #[test]
    fn reset_zeroes_versions() {
        let mut env = StatusUpdateEnv::new(EnvConfig::uniform(2, 0.3, 0.9, 0.85), 7).unwrap();
        let s = env.reset(7).clone();
        assert_eq!(s.vaoi, vec![0, 0]);
        assert_eq!(s.slot, 0);

        let mut one = single_user(5);
        let s = one.reset(0);
        assert_eq!(s.scheduler_versions, vec![0]);
        assert_eq!(s.destination_versions, vec![0]);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let cfg = EnvConfig::uniform(3, 0.6, 0.7, 0.85);
        let run = |seed| {
            let mut env = StatusUpdateEnv::new(cfg.clone(), seed).unwrap();
            (0..200)
                .map(|t| env.step(t % 4, 0.3).unwrap().next_state)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn scheduled_success_resets_vaoi() {
        let mut env = single_user(50);
        env.step_with(0, 0.0, &draws(false, true)).unwrap();
        env.step_with(0, 0.0, &draws(false, true)).unwrap();
        assert_eq!(env.state().vaoi, vec![2]);
        let out = env.step_with(1, 0.0, &draws(true, false)).unwrap();
        assert_eq!(out.next_state.vaoi, vec![0]);
        assert_eq!(out.cost, 1);
    }

    #[test]
    fn failed_transmission_with_arrival_grows_vaoi() {
        let mut env = single_user(50);
        env.step_with(0, 0.0, &draws(false, true)).unwrap();
        let out = env.step_with(1, 0.0, &draws(false, true)).unwrap();
        assert_eq!(out.next_state.vaoi, vec![2]);
        assert_eq!(out.info.success, Some(false));
    }

    #[test]
    fn idle_without_arrival_is_identity() {
        let mut env = single_user(50);
        env.step_with(0, 0.0, &draws(false, true)).unwrap();
        let before = env.state().vaoi.clone();
        let out = env.step_with(0, 1.0, &draws(true, false)).unwrap();
        assert_eq!(out.next_state.vaoi, before);
        assert_eq!(out.cost, 0);
        assert_eq!(out.info.success, None);
    }

    #[test]
    fn reward_formula() {
        assert!((compute_reward(&[1, 3], 1, 0.2) - (-4.2)).abs() < 1e-12);
        assert_eq!(compute_reward(&[0, 0, 0], 0, 7.0), 0.0);
        assert_eq!(compute_reward(&[5], 0, 10.0), -5.0);
    }

    #[test]
    fn reward_charged_on_decision_state_by_default() {
        let mut env = single_user(50);
        env.step_with(0, 0.0, &draws(false, true)).unwrap();
        let out = env.step_with(1, 0.5, &draws(true, true)).unwrap();
        assert_eq!(out.reward, -1.5);

        let mut cfg = EnvConfig::uniform(1, 0.5, 0.9, 0.85);
        cfg.reward_on_next_state = true;
        let mut env = StatusUpdateEnv::new(cfg, 0).unwrap();
        env.step_with(0, 0.0, &draws(false, true)).unwrap();
        let out = env.step_with(1, 0.5, &draws(true, true)).unwrap();
        assert_eq!(out.reward, -1.5);
        let out = env.step_with(0, 0.5, &draws(false, true)).unwrap();
        assert_eq!(out.reward, -2.0);
    }

    #[test]
    fn truncation_keeps_raw_gap() {
        let mut env = single_user(3);
        let mut last = None;
        for _ in 0..6 {
            last = Some(env.step_with(0, 0.0, &draws(false, true)).unwrap());
        }
        let out = last.unwrap();
        assert_eq!(out.next_state.vaoi, vec![3]);
        assert_eq!(out.info.raw_vaoi, vec![6]);
    }

    #[test]
    fn deterministic_chain_stays_at_one() {
        let cfg = EnvConfig::uniform(1, 1.0, 1.0, 1.0);
        let mut env = StatusUpdateEnv::new(cfg, 3).unwrap();
        for _ in 0..100 {
            let out = env.step(1, 0.0).unwrap();
            assert_eq!(out.next_state.vaoi, vec![1]);
        }
    }

    #[test]
    fn out_of_range_action_rejected() {
        let mut env = single_user(5);
        assert!(env.step(2, 0.0).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let ok = EnvConfig::uniform(2, 0.5, 0.9, 0.85);
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.arrival_rates[1] = 0.0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.success_prob = 1.5;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.d_max = 0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.eta_max = 0.0;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.arrival_rates.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn trace_csv_header_and_rows() {
        let mut env = StatusUpdateEnv::new(EnvConfig::uniform(2, 0.5, 0.9, 0.85), 1).unwrap();
        let mut buf = Vec::new();
        {
            let mut w = TraceWriter::new(&mut buf, 2).unwrap();
            let out = env.step(1, 0.0).unwrap();
            w.record(1, &out).unwrap();
            w.finish().unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,action,success,cost,vaoi_1,vaoi_2"));
        assert!(lines.next().unwrap().starts_with("1,1,"));
    }
}

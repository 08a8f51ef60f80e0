//! Frozen-policy deployment and evaluation summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actor::Actor;
use crate::agents::Algo;
use crate::env::{EnvConfig, StatusUpdateEnv};
use crate::error::{arg_err, Result};
use crate::metrics::{average_cost, average_vaoi, cost_trajectory, empirical_cvar, EvalTrace};

/// Offset separating evaluation seeds from training seeds.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

/// Tolerance on the evaluated cost when flagging constraint satisfaction.
pub const CONSTRAINT_SLACK: f64 = 0.02;

pub fn eval_seed(train_seed: u64, index: usize) -> u64 {
    train_seed + EVAL_SEED_OFFSET + index as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    GreedyMaxVaoi,
    RandomBudget,
    AlwaysIdle,
}

impl HeuristicKind {
    pub const ALL: [HeuristicKind; 3] = [
        HeuristicKind::GreedyMaxVaoi,
        HeuristicKind::RandomBudget,
        HeuristicKind::AlwaysIdle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeuristicKind::GreedyMaxVaoi => "greedy_max_vaoi",
            HeuristicKind::RandomBudget => "random_budget",
            HeuristicKind::AlwaysIdle => "always_idle",
        }
    }
}

impl FromStr for HeuristicKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| arg_err(format!("unknown heuristic '{s}'")))
    }
}

/// Baseline schedulers. `running_cost` is the fraction of earlier slots that
/// transmitted.
pub fn heuristic_action<R: Rng + ?Sized>(
    kind: HeuristicKind,
    vaoi: &[u32],
    running_cost: f64,
    eta_max: f64,
    rng: &mut R,
) -> usize {
    match kind {
        HeuristicKind::AlwaysIdle => 0,
        HeuristicKind::GreedyMaxVaoi => {
            let mut best = 0;
            for (u, &v) in vaoi.iter().enumerate() {
                if v > vaoi[best] {
                    best = u;
                }
            }
            if vaoi[best] > 0 && running_cost <= eta_max {
                best + 1
            } else {
                0
            }
        }
        HeuristicKind::RandomBudget => {
            if rng.random_bool(eta_max.clamp(0.0, 1.0)) {
                rng.random_range(1..=vaoi.len())
            } else {
                0
            }
        }
    }
}

/// A learned algorithm or a heuristic baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Method {
    Learned(Algo),
    Heuristic(HeuristicKind),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Learned(a) => a.name(),
            Method::Heuristic(h) => h.name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse::<Algo>()
            .map(Method::Learned)
            .or_else(|_| s.parse::<HeuristicKind>().map(Method::Heuristic))
            .map_err(|_| arg_err(format!("unknown method '{s}'")))
    }
}

/// Policy deployed during evaluation.
pub enum Scheduler<'a> {
    Learned { actor: &'a Actor, greedy: bool },
    Heuristic(HeuristicKind),
}

/// Run `scheduler` for `slots` slots from a fresh environment and record the
/// post-step VAoI of every slot with the action that produced it.
pub fn deploy(scheduler: &Scheduler<'_>, env_cfg: &EnvConfig, slots: usize, seed: u64) -> Result<EvalTrace> {
    if slots == 0 {
        return Err(arg_err("evaluation needs at least one slot"));
    }
    let mut env = StatusUpdateEnv::new(env_cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut trace = EvalTrace::with_capacity(env_cfg.n_users, slots);
    let mut transmitted = 0usize;
    for t in 0..slots {
        let state = env.state();
        let action = match scheduler {
            Scheduler::Learned { actor, greedy } => {
                let dist = actor.distribution(&state.features(env_cfg.d_max), &mut rng);
                if *greedy {
                    dist.argmax()
                } else {
                    dist.sample(&mut rng)
                }
            }
            Scheduler::Heuristic(kind) => {
                let running = if t == 0 { 0.0 } else { transmitted as f64 / t as f64 };
                heuristic_action(*kind, &state.vaoi, running, env_cfg.eta_max, &mut rng)
            }
        };
        let out = env.step(action, 0.0)?;
        transmitted += (action != 0) as usize;
        trace.push(action, &out.next_state.vaoi);
    }
    Ok(trace)
}

fn alpha_key(alpha: f64) -> String {
    format!("{alpha}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub avg_vaoi: f64,
    pub cvar: BTreeMap<String, f64>,
    pub avg_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub avg_vaoi: f64,
    /// CVaR of the pooled samples keyed by confidence level.
    pub cvar: BTreeMap<String, f64>,
    pub avg_cost: f64,
    pub slots: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub eta_max: f64,
    pub constraint_satisfied: bool,
    pub episodes: Vec<EpisodeSummary>,
}

impl EvalSummary {
    pub fn cvar_at(&self, alpha: f64) -> Option<f64> {
        self.cvar.get(&alpha_key(alpha)).copied()
    }
}

fn cvar_map(samples: &[f64], alphas: &[f64]) -> Result<BTreeMap<String, f64>> {
    alphas
        .iter()
        .map(|&a| Ok((alpha_key(a), empirical_cvar(samples, a)?)))
        .collect()
}

/// Summarise one or more episodes; metrics are computed on the pooled samples.
pub fn summarize(
    method: &str,
    traces: &[(u64, EvalTrace)],
    alphas: &[f64],
    eta_max: f64,
) -> Result<EvalSummary> {
    let (first_seed, first) = traces.first().ok_or_else(|| arg_err("no evaluation episodes"))?;
    let mut pooled = EvalTrace::new(first.n_users);
    let mut episodes = Vec::with_capacity(traces.len());
    for (seed, tr) in traces {
        episodes.push(EpisodeSummary {
            seed: *seed,
            avg_vaoi: average_vaoi(tr)?,
            cvar: cvar_map(&tr.pooled(), alphas)?,
            avg_cost: average_cost(&tr.actions)?,
        });
        pooled.vaoi.extend_from_slice(&tr.vaoi);
        pooled.actions.extend_from_slice(&tr.actions);
    }
    let avg_cost = average_cost(&pooled.actions)?;
    Ok(EvalSummary {
        method: method.to_string(),
        avg_vaoi: average_vaoi(&pooled)?,
        cvar: cvar_map(&pooled.pooled(), alphas)?,
        avg_cost,
        slots: first.slots(),
        seed: *first_seed,
        seeds: traces.iter().map(|(s, _)| *s).collect(),
        eta_max,
        constraint_satisfied: avg_cost <= eta_max + CONSTRAINT_SLACK,
        episodes,
    })
}

/// Evaluate a scheduler over `episodes` seeds derived from `train_seed`.
pub fn evaluate(
    method: &str,
    scheduler: &Scheduler<'_>,
    env_cfg: &EnvConfig,
    slots: usize,
    episodes: usize,
    train_seed: u64,
    alphas: &[f64],
) -> Result<(EvalSummary, Vec<(u64, EvalTrace)>)> {
    let traces = (0..episodes)
        .map(|i| {
            let seed = eval_seed(train_seed, i);
            deploy(scheduler, env_cfg, slots, seed).map(|tr| (seed, tr))
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(method, &traces, alphas, env_cfg.eta_max)?;
    Ok((summary, traces))
}

/// Samples CSV: `seed, t, action, eta, vaoi_1..vaoi_N`, where `eta` is the
/// running average cost after slot `t`.
pub fn write_samples<W: Write>(writer: W, traces: &[(u64, EvalTrace)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let n = traces.first().map_or(0, |(_, t)| t.n_users);
    let mut header = vec!["seed".to_string(), "t".into(), "action".into(), "eta".into()];
    header.extend((1..=n).map(|u| format!("vaoi_{u}")));
    w.write_record(&header)?;
    for (seed, tr) in traces {
        let eta = cost_trajectory(&tr.actions);
        for t in 0..tr.slots() {
            let mut rec = vec![seed.to_string(), (t + 1).to_string(), tr.actions[t].to_string(), eta[t].to_string()];
            rec.extend(tr.row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{stationary_average_vaoi, SmallInstance};

    #[test]
    fn greedy_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(heuristic_action(HeuristicKind::GreedyMaxVaoi, &[0, 3, 3], 0.0, 0.85, &mut rng), 2);
        assert_eq!(heuristic_action(HeuristicKind::GreedyMaxVaoi, &[0, 0, 0], 0.0, 0.85, &mut rng), 0);
        assert_eq!(heuristic_action(HeuristicKind::GreedyMaxVaoi, &[1, 5, 0], 0.9, 0.85, &mut rng), 0);
        for v in [[0, 0, 0], [4, 1, 9]] {
            assert_eq!(heuristic_action(HeuristicKind::AlwaysIdle, &v, 0.0, 0.85, &mut rng), 0);
        }
    }

    #[test]
    fn random_budget_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let acts: Vec<usize> = (0..20000)
            .map(|_| heuristic_action(HeuristicKind::RandomBudget, &[1, 1, 1, 1], 0.0, 0.6, &mut rng))
            .collect();
        let cost = average_cost(&acts).unwrap();
        assert!((cost - 0.6).abs() < 0.02);
        assert!(acts.iter().all(|&a| a <= 4));
    }

    #[test]
    fn method_parsing() {
        assert_eq!("d2sac".parse::<Method>().unwrap(), Method::Learned(Algo::D2sac));
        assert_eq!(
            "random_budget".parse::<Method>().unwrap(),
            Method::Heuristic(HeuristicKind::RandomBudget)
        );
        assert!("ppo".parse::<Method>().is_err());
    }

    #[test]
    fn deterministic_chain_matches_oracle() {
        let inst = SmallInstance::single(1.0, 1.0, 4, 0.9, 0.0).unwrap();
        let cfg = EnvConfig::uniform(1, 1.0, 1.0, 1.0).with_d_max(4);
        let tr = deploy(&Scheduler::Heuristic(HeuristicKind::GreedyMaxVaoi), &cfg, 500, 3).unwrap();
        let oracle = stationary_average_vaoi(&inst, &[1; 5]).unwrap();
        assert_eq!(average_vaoi(&tr).unwrap(), oracle);
    }

    #[test]
    fn zero_slots_rejected() {
        let cfg = EnvConfig::uniform(2, 0.5, 0.9, 0.85);
        assert!(deploy(&Scheduler::Heuristic(HeuristicKind::AlwaysIdle), &cfg, 0, 0).is_err());
    }

    #[test]
    fn summary_and_cost_series_agree() {
        let cfg = EnvConfig::uniform(3, 0.75, 0.9, 0.5);
        let (summary, traces) = evaluate(
            "random_budget",
            &Scheduler::Heuristic(HeuristicKind::RandomBudget),
            &cfg,
            400,
            2,
            5,
            &[0.5, 0.75],
        )
        .unwrap();
        assert_eq!(summary.seeds, vec![1_000_005, 1_000_006]);
        assert_eq!(summary.slots, 400);
        for (_, tr) in &traces {
            let eta = cost_trajectory(&tr.actions);
            assert_eq!(*eta.last().unwrap(), average_cost(&tr.actions).unwrap());
        }
        assert!(summary.cvar_at(0.75).unwrap() >= summary.cvar_at(0.5).unwrap());
        let mut buf = Vec::new();
        write_samples(&mut buf, &traces).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("seed,t,action,eta,vaoi_1,vaoi_2,vaoi_3\n"));
        assert_eq!(text.lines().count(), 801);
    }
}

//! Exact references for small instances: enumerated transition matrices,
//! stationary evaluation of fixed policies, value iteration, exhaustive
//! policy search and long-run Monte Carlo estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::{compute_reward, next_vaoi, EnvConfig, StatusUpdateEnv};
use crate::error::{arg_err, config_err, Error, Result};
use crate::metrics::{average_vaoi, empirical_cvar, weighted_cvar, EvalTrace};

pub const MAX_USERS: usize = 2;
pub const MAX_D_MAX: u32 = 6;
const VI_MAX_ITERS: usize = 1_000_000;
const VI_TOL: f64 = 1e-10;
const TIE_TOL: f64 = 1e-9;

/// A deterministic stationary policy: one action per enumerated state.
pub type Policy = Vec<usize>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallInstance {
    pub arrival_rates: Vec<f64>,
    pub success_prob: f64,
    pub d_max: u32,
    pub gamma: f64,
    pub lambda: f64,
}

impl SmallInstance {
    pub fn single(rate: f64, success_prob: f64, d_max: u32, gamma: f64, lambda: f64) -> Result<Self> {
        let inst = Self {
            arrival_rates: vec![rate],
            success_prob,
            d_max,
            gamma,
            lambda,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.arrival_rates.len();
        if n == 0 || n > MAX_USERS {
            return Err(config_err(format!("oracle supports 1..={MAX_USERS} users, got {n}")));
        }
        if self.d_max == 0 || self.d_max > MAX_D_MAX {
            return Err(config_err(format!("oracle supports d_max in 1..={MAX_D_MAX}")));
        }
        if self.arrival_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(config_err("arrival rates must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.success_prob) {
            return Err(config_err("success probability must lie in [0, 1]"));
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) || !(self.lambda >= 0.0) {
            return Err(config_err("gamma must lie in [0, 1] and lambda must be nonnegative"));
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.arrival_rates.len()
    }

    pub fn n_actions(&self) -> usize {
        self.n_users() + 1
    }

    pub fn n_states(&self) -> usize {
        (self.d_max as usize + 1).pow(self.n_users() as u32)
    }

    /// Mixed-radix decoding with user 1 as the least significant digit.
    pub fn decode(&self, index: usize) -> Vec<u32> {
        let base = self.d_max as usize + 1;
        let mut rest = index;
        (0..self.n_users())
            .map(|_| {
                let v = (rest % base) as u32;
                rest /= base;
                v
            })
            .collect()
    }

    pub fn encode(&self, vaoi: &[u32]) -> usize {
        let base = self.d_max as usize + 1;
        vaoi.iter().rev().fold(0, |acc, &v| acc * base + v as usize)
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            n_users: self.n_users(),
            arrival_rates: self.arrival_rates.clone(),
            success_prob: self.success_prob,
            d_max: self.d_max,
            eta_max: 1.0,
            reward_on_next_state: false,
        }
    }

    /// Next-state distribution of `(state, action)` as `(index, probability)`.
    pub fn successors(&self, state: usize, action: usize) -> Vec<(usize, f64)> {
        let vaoi = self.decode(state);
        let n = self.n_users();
        let channel: &[(bool, f64)] = if action == 0 {
            &[(false, 1.0)]
        } else {
            &[(true, self.success_prob), (false, 1.0 - self.success_prob)]
        };
        let mut out = Vec::with_capacity(channel.len() << n);
        for &(success, p_channel) in channel {
            for mask in 0..(1usize << n) {
                let mut prob = p_channel;
                let mut next = vec![0u32; n];
                for u in 0..n {
                    let arrived = mask >> u & 1 == 1;
                    let r = self.arrival_rates[u];
                    prob *= if arrived { r } else { 1.0 - r };
                    next[u] = next_vaoi(vaoi[u], success && action == u + 1, arrived, self.d_max);
                }
                if prob > 0.0 {
                    out.push((self.encode(&next), prob));
                }
            }
        }
        out
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        compute_reward(&self.decode(state), action, self.lambda)
    }

    fn check_policy(&self, policy: &[usize]) -> Result<()> {
        if policy.len() != self.n_states() {
            return Err(arg_err(format!(
                "policy covers {} states, instance has {}",
                policy.len(),
                self.n_states()
            )));
        }
        if policy.iter().any(|&a| a >= self.n_actions()) {
            return Err(arg_err("policy action out of range"));
        }
        Ok(())
    }

    /// Row-stochastic transition matrix induced by `policy`.
    pub fn transition_matrix(&self, policy: &[usize]) -> Result<DMatrix<f64>> {
        self.check_policy(policy)?;
        let s = self.n_states();
        let mut p = DMatrix::zeros(s, s);
        for (i, &a) in policy.iter().enumerate() {
            for (j, prob) in self.successors(i, a) {
                p[(i, j)] += prob;
            }
        }
        Ok(p)
    }

    pub fn mean_vaoi(&self, state: usize) -> f64 {
        let v = self.decode(state);
        v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
    }
}

/// Stationary distribution of a row-stochastic matrix, solved as
/// `pi (P - I) = 0` with the normalisation replacing one row.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<Vec<f64>> {
    let s = p.nrows();
    let mut a = p.transpose() - DMatrix::identity(s, s);
    for j in 0..s {
        a[(s - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(s);
    b[s - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical("no unique stationary distribution".into()))?;
    let residual = (pi.transpose() * p - pi.transpose()).amax();
    if residual > 1e-9 || pi.iter().any(|&x| x < -1e-9) {
        return Err(Error::Numerical(format!(
            "stationary solve inaccurate (residual {residual:.3e})"
        )));
    }
    let mut pi: Vec<f64> = pi.iter().map(|&x| x.max(0.0)).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|x| *x /= total);
    Ok(pi)
}

pub fn stationary_average_vaoi(inst: &SmallInstance, policy: &[usize]) -> Result<f64> {
    let pi = stationary_distribution(&inst.transition_matrix(policy)?)?;
    Ok(pi.iter().enumerate().map(|(s, w)| w * inst.mean_vaoi(s)).sum())
}

/// CVaR of the per-user VAoI pooled under the stationary distribution.
pub fn stationary_cvar(inst: &SmallInstance, policy: &[usize], alpha: f64) -> Result<f64> {
    let pi = stationary_distribution(&inst.transition_matrix(policy)?)?;
    let n = inst.n_users();
    let mut values = Vec::with_capacity(pi.len() * n);
    let mut weights = Vec::with_capacity(pi.len() * n);
    for (s, &w) in pi.iter().enumerate() {
        for v in inst.decode(s) {
            values.push(v as f64);
            weights.push(w / n as f64);
        }
    }
    weighted_cvar(&values, &weights, alpha)
}

/// Run the simulator under a fixed policy and record post-step VAoI.
pub fn simulate_policy(inst: &SmallInstance, policy: &[usize], slots: usize, seed: u64) -> Result<EvalTrace> {
    inst.check_policy(policy)?;
    let mut env = StatusUpdateEnv::new(inst.env_config(), seed)?;
    let mut trace = EvalTrace::with_capacity(inst.n_users(), slots);
    for _ in 0..slots {
        let action = policy[inst.encode(&env.state().vaoi)];
        let out = env.step(action, inst.lambda)?;
        trace.push(action, &out.next_state.vaoi);
    }
    Ok(trace)
}

pub const MC_MIN_SLOTS: usize = 100_000;

pub fn mc_average_vaoi(inst: &SmallInstance, policy: &[usize], slots: usize, seed: u64) -> Result<f64> {
    average_vaoi(&simulate_policy(inst, policy, slots, seed)?)
}

pub fn mc_cvar_oracle(inst: &SmallInstance, policy: &[usize], slots: usize, alpha: f64, seed: u64) -> Result<f64> {
    if slots < MC_MIN_SLOTS {
        return Err(arg_err(format!("Monte Carlo oracle needs at least {MC_MIN_SLOTS} slots")));
    }
    empirical_cvar(&simulate_policy(inst, policy, slots, seed)?.pooled(), alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpSolution {
    pub policy: Policy,
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Sup-norm change of the value function after each sweep.
    pub residuals: Vec<f64>,
}

fn q_value(inst: &SmallInstance, values: &[f64], s: usize, a: usize) -> f64 {
    let future: f64 = inst.successors(s, a).iter().map(|&(j, p)| p * values[j]).sum();
    inst.reward(s, a) + inst.gamma * future
}

/// Greedy policy with respect to `values`; ties go to the lower action.
pub fn greedy_policy(inst: &SmallInstance, values: &[f64]) -> Policy {
    (0..inst.n_states())
        .map(|s| {
            let mut best = 0;
            let mut best_q = q_value(inst, values, s, 0);
            for a in 1..inst.n_actions() {
                let q = q_value(inst, values, s, a);
                if q > best_q + TIE_TOL * best_q.abs().max(1.0) {
                    best = a;
                    best_q = q;
                }
            }
            best
        })
        .collect()
}

/// Value iteration for the fixed-multiplier shaped reward.
pub fn solve_lagrangian_mdp(inst: &SmallInstance) -> Result<MdpSolution> {
    inst.validate()?;
    if !(inst.gamma < 1.0) {
        return Err(config_err("value iteration requires gamma < 1"));
    }
    let s = inst.n_states();
    let mut values = vec![0.0; s];
    let mut residuals = Vec::new();
    for it in 1..=VI_MAX_ITERS {
        let next: Vec<f64> = (0..s)
            .map(|i| {
                (0..inst.n_actions())
                    .map(|a| q_value(inst, &values, i, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let delta = next
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = next;
        residuals.push(delta);
        if delta < VI_TOL {
            return Ok(MdpSolution {
                policy: greedy_policy(inst, &values),
                values,
                iterations: it,
                residuals,
            });
        }
    }
    Err(Error::Numerical(format!(
        "value iteration did not converge in {VI_MAX_ITERS} sweeps"
    )))
}

/// Exact discounted value `(I - gamma P_pi)^{-1} r_pi` of a fixed policy.
pub fn policy_value(inst: &SmallInstance, policy: &[usize]) -> Result<Vec<f64>> {
    let p = inst.transition_matrix(policy)?;
    let s = inst.n_states();
    let r = DVector::from_iterator(s, policy.iter().enumerate().map(|(i, &a)| inst.reward(i, a)));
    let a = DMatrix::identity(s, s) - p * inst.gamma;
    let v = a
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::Numerical("singular policy evaluation system".into()))?;
    Ok(v.iter().copied().collect())
}

pub const MAX_ENUMERATED_POLICIES: usize = 1 << 16;

/// Best deterministic stationary policy by exhaustive search, scored by the
/// sum of state values; the lexicographically first policy wins ties.
pub fn enumerate_best_policy(inst: &SmallInstance) -> Result<(Policy, Vec<f64>)> {
    inst.validate()?;
    let s = inst.n_states();
    let a = inst.n_actions();
    let count = (a as f64).powi(s as i32);
    if count > MAX_ENUMERATED_POLICIES as f64 {
        return Err(arg_err(format!("{count} policies exceed the enumeration limit")));
    }
    let mut best: Option<(Policy, Vec<f64>, f64)> = None;
    for code in 0..count as usize {
        // The first state is the most significant digit, so codes run in
        // lexicographic order of the policy table.
        let mut rest = code;
        let mut policy = vec![0; s];
        for slot in policy.iter_mut().rev() {
            *slot = rest % a;
            rest /= a;
        }
        let values = policy_value(inst, &policy)?;
        let score: f64 = values.iter().sum();
        let better = match &best {
            None => true,
            Some((_, _, b)) => score > b + TIE_TOL * b.abs().max(1.0),
        };
        if better {
            best = Some((policy, values, score));
        }
    }
    let (policy, values, _) = best.expect("at least one policy");
    Ok((policy, values))
}

/// Row of the policy table in an [`OracleReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub vaoi: Vec<u32>,
    pub action: usize,
    pub value: f64,
}

/// Value-iteration solution with its stationary metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instance: SmallInstance,
    pub iterations: usize,
    pub policy: Vec<PolicyEntry>,
    pub average_vaoi: f64,
    pub average_cost: f64,
    /// Stationary CVaR keyed by confidence level.
    pub cvar: std::collections::BTreeMap<String, f64>,
    /// Whether exhaustive search agrees with value iteration; absent when the
    /// policy space is too large to enumerate.
    pub matches_enumeration: Option<bool>,
}

pub fn oracle_report(inst: &SmallInstance, alphas: &[f64]) -> Result<OracleReport> {
    let sol = solve_lagrangian_mdp(inst)?;
    let pi = stationary_distribution(&inst.transition_matrix(&sol.policy)?)?;
    let average_cost = pi
        .iter()
        .zip(&sol.policy)
        .filter(|(_, &a)| a != 0)
        .map(|(w, _)| w)
        .sum();
    let cvar = alphas
        .iter()
        .map(|&a| Ok((format!("{a}"), stationary_cvar(inst, &sol.policy, a)?)))
        .collect::<Result<_>>()?;
    let matches_enumeration = match enumerate_best_policy(inst) {
        Ok((best, _)) => Some(best == sol.policy),
        Err(Error::Argument(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(OracleReport {
        instance: inst.clone(),
        iterations: sol.iterations,
        policy: (0..inst.n_states())
            .map(|s| PolicyEntry {
                vaoi: inst.decode(s),
                action: sol.policy[s],
                value: sol.values[s],
            })
            .collect(),
        average_vaoi: stationary_average_vaoi(inst, &sol.policy)?,
        average_cost,
        cvar,
        matches_enumeration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_roundtrip() {
        let inst = SmallInstance {
            arrival_rates: vec![0.5, 0.3],
            success_prob: 0.9,
            d_max: 6,
            gamma: 0.9,
            lambda: 0.0,
        };
        assert_eq!(inst.n_states(), 49);
        for s in 0..49 {
            assert_eq!(inst.encode(&inst.decode(s)), s);
        }
    }

    #[test]
    fn rows_are_stochastic() {
        let inst = SmallInstance {
            arrival_rates: vec![0.7, 0.2],
            success_prob: 0.6,
            d_max: 4,
            gamma: 0.9,
            lambda: 0.5,
        };
        for a in 0..3 {
            let p = inst.transition_matrix(&vec![a; inst.n_states()]).unwrap();
            for row in p.row_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stationary_reference_chains() {
        let always = vec![1; 6];
        let det = SmallInstance::single(1.0, 1.0, 5, 0.9, 0.0).unwrap();
        assert!((stationary_average_vaoi(&det, &always).unwrap() - 1.0).abs() < 1e-12);
        for r in [0.2, 0.5, 0.9] {
            let inst = SmallInstance::single(r, 1.0, 5, 0.9, 0.0).unwrap();
            assert!((stationary_average_vaoi(&inst, &always).unwrap() - r).abs() < 1e-12);
        }
        let stuck = SmallInstance::single(1.0, 0.0, 5, 0.9, 0.0).unwrap();
        assert!((stationary_average_vaoi(&stuck, &always).unwrap() - 5.0).abs() < 1e-12);
        assert!((stationary_cvar(&det, &always, 0.9).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vi_reference_policies() {
        let inst = SmallInstance::single(1.0, 1.0, 4, 0.9, 0.0).unwrap();
        let sol = solve_lagrangian_mdp(&inst).unwrap();
        assert_eq!(sol.policy, vec![0, 1, 1, 1, 1]);
        let inst = SmallInstance::single(0.5, 0.9, 4, 0.9, 1e6).unwrap();
        assert_eq!(solve_lagrangian_mdp(&inst).unwrap().policy, vec![0; 5]);
    }

    #[test]
    fn vi_matches_enumeration() {
        let inst = SmallInstance::single(0.5, 0.9, 3, 0.95, 0.3).unwrap();
        let sol = solve_lagrangian_mdp(&inst).unwrap();
        let (best, values) = enumerate_best_policy(&inst).unwrap();
        assert_eq!(sol.policy, best);
        for (a, b) in sol.values.iter().zip(&values) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(sol.residuals.windows(2).skip(1).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rejects_oversized_instances() {
        assert!(SmallInstance::single(0.5, 0.9, 7, 0.9, 0.0).is_err());
        let inst = SmallInstance {
            arrival_rates: vec![0.5; 3],
            success_prob: 0.9,
            d_max: 2,
            gamma: 0.9,
            lambda: 0.0,
        };
        assert!(inst.validate().is_err());
        let inst = SmallInstance::single(0.5, 0.9, 3, 1.0, 0.0).unwrap();
        assert!(solve_lagrangian_mdp(&inst).is_err());
    }

    #[test]
    fn mc_requires_long_runs() {
        let inst = SmallInstance::single(1.0, 1.0, 3, 0.9, 0.0).unwrap();
        assert!(mc_cvar_oracle(&inst, &[1; 4], 10, 0.5, 0).is_err());
        let c = mc_cvar_oracle(&inst, &[1; 4], MC_MIN_SLOTS, 0.75, 0).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn report_for_free_transmissions() {
        let inst = SmallInstance::single(1.0, 1.0, 3, 0.9, 0.0).unwrap();
        let r = oracle_report(&inst, &[0.5, 0.9]).unwrap();
        assert_eq!(r.policy.len(), 4);
        assert!(r.policy.iter().all(|e| e.action == usize::from(e.vaoi[0] > 0)));
        assert_eq!(r.matches_enumeration, Some(true));
        assert!((r.average_vaoi - 1.0).abs() < 1e-9);
        assert!((r.average_cost - 1.0).abs() < 1e-9);
        assert!((r.cvar["0.9"] - 1.0).abs() < 1e-9);
    }
}

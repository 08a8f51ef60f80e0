//! Trajectory metrics: average VAoI, empirical CVaR of the pooled VAoI
//! samples, and average transmission cost.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

/// Per-slot VAoI vectors together with the actions that produced them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    pub n_users: usize,
    /// Row-major `T x N` samples.
    pub vaoi: Vec<u32>,
    pub actions: Vec<usize>,
}

impl EvalTrace {
    pub fn new(n_users: usize) -> Self {
        Self {
            n_users,
            ..Self::default()
        }
    }

    pub fn with_capacity(n_users: usize, slots: usize) -> Self {
        Self {
            n_users,
            vaoi: Vec::with_capacity(slots * n_users),
            actions: Vec::with_capacity(slots),
        }
    }

    pub fn push(&mut self, action: usize, vaoi: &[u32]) {
        debug_assert_eq!(vaoi.len(), self.n_users);
        self.actions.push(action);
        self.vaoi.extend_from_slice(vaoi);
    }

    pub fn slots(&self) -> usize {
        self.actions.len()
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.vaoi[t * self.n_users..(t + 1) * self.n_users]
    }

    /// All samples pooled across users and slots.
    pub fn pooled(&self) -> Vec<f64> {
        self.vaoi.iter().map(|&v| v as f64).collect()
    }
}

pub fn average_vaoi(trace: &EvalTrace) -> Result<f64> {
    if trace.vaoi.is_empty() {
        return Err(arg_err("empty trace"));
    }
    Ok(trace.vaoi.iter().map(|&v| v as f64).sum::<f64>() / trace.vaoi.len() as f64)
}

pub fn average_cost(actions: &[usize]) -> Result<f64> {
    if actions.is_empty() {
        return Err(arg_err("empty action sequence"));
    }
    Ok(actions.iter().filter(|&&a| a != 0).count() as f64 / actions.len() as f64)
}

/// Running average cost after each slot.
pub fn cost_trajectory(actions: &[usize]) -> Vec<f64> {
    let mut hits = 0usize;
    actions
        .iter()
        .enumerate()
        .map(|(t, &a)| {
            hits += (a != 0) as usize;
            hits as f64 / (t + 1) as f64
        })
        .collect()
}

fn check_cvar_args(samples: &[f64], alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(arg_err(format!("confidence level {alpha} outside (0, 1)")));
    }
    if samples.is_empty() {
        return Err(arg_err("empty sample set"));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(arg_err("non-finite sample"));
    }
    Ok(())
}

fn sorted_desc(samples: &[f64]) -> Vec<f64> {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| b.total_cmp(a));
    xs
}

/// `min_z z + sum_i [x_i - z]_+ / ((1 - alpha) m)`, minimised exactly by
/// scanning the sample values (the objective is piecewise linear and convex
/// with breakpoints at the samples).
pub fn cvar_rockafellar_uryasev(samples: &[f64], alpha: f64) -> Result<f64> {
    check_cvar_args(samples, alpha)?;
    let xs = sorted_desc(samples);
    let scale = 1.0 / ((1.0 - alpha) * xs.len() as f64);
    let mut best = f64::INFINITY;
    let mut prefix = 0.0;
    for (i, &z) in xs.iter().enumerate() {
        // xs[..i] are >= z; their excess over z is prefix - i * z.
        let excess = (prefix - i as f64 * z).max(0.0);
        best = best.min(z + scale * excess);
        prefix += z;
    }
    Ok(best)
}

/// Average of the worst `(1 - alpha) m` samples with the boundary sample
/// weighted fractionally.
pub fn cvar_tail_average(samples: &[f64], alpha: f64) -> Result<f64> {
    check_cvar_args(samples, alpha)?;
    let xs = sorted_desc(samples);
    let k = (1.0 - alpha) * xs.len() as f64;
    let whole = (k.floor() as usize).min(xs.len());
    let frac = k - whole as f64;
    let mut total: f64 = xs[..whole].iter().sum();
    if whole < xs.len() && frac > 0.0 {
        total += frac * xs[whole];
    }
    Ok(total / k)
}

/// Empirical CVaR at level `alpha`. Both the variational and the tail-average
/// forms are evaluated and must agree.
pub fn empirical_cvar(samples: &[f64], alpha: f64) -> Result<f64> {
    let ru = cvar_rockafellar_uryasev(samples, alpha)?;
    let tail = cvar_tail_average(samples, alpha)?;
    if (ru - tail).abs() > 1e-9 * ru.abs().max(1.0) {
        return Err(Error::Numerical(format!(
            "CVaR forms disagree: {ru} vs {tail}"
        )));
    }
    Ok(tail)
}

/// CVaR of a discrete distribution given as `(value, probability)` pairs.
pub fn weighted_cvar(values: &[f64], weights: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(arg_err(format!("confidence level {alpha} outside (0, 1)")));
    }
    if values.len() != weights.len() || values.is_empty() {
        return Err(arg_err("values and weights must be nonempty and of equal length"));
    }
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let tail = 1.0 - alpha;
    let mut mass = 0.0;
    let mut acc = 0.0;
    for i in order {
        if mass >= tail {
            break;
        }
        let take = (weights[i] / total).min(tail - mass);
        acc += take * values[i];
        mass += take;
    }
    Ok(acc / tail)
}

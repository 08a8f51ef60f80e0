//! Scalar and quantile critics, and the quantile-regression helpers used by
//! the distributional learners.
//!
//! A quantile critic maps a state to `(N + 1) x M` values laid out row-major by
//! action: entry `a * M + j` is the `tau_hat_j = (2j + 1) / (2M)` quantile
//! (zero-based `j`) of the return of action `a`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Result};
use crate::nn::{Activation, Mlp, Parameters, TensorRef};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarCritic {
    pub net: Mlp,
}

impl ScalarCritic {
    pub fn new<R: Rng + ?Sized>(n_users: usize, hidden: &[usize], rng: &mut R) -> Self {
        Self {
            net: Mlp::with_hidden(n_users, hidden, n_users + 1, Activation::Identity, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileCritic {
    pub net: Mlp,
    pub n_quantiles: usize,
}

impl QuantileCritic {
    pub fn new<R: Rng + ?Sized>(n_users: usize, hidden: &[usize], n_quantiles: usize, rng: &mut R) -> Self {
        Self {
            net: Mlp::with_hidden(n_users, hidden, (n_users + 1) * n_quantiles, Activation::Identity, rng),
            n_quantiles,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.net.outputs() / self.n_quantiles
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Critic {
    Scalar(ScalarCritic),
    Quantile(QuantileCritic),
}

impl Critic {
    pub fn net(&self) -> &Mlp {
        match self {
            Critic::Scalar(c) => &c.net,
            Critic::Quantile(c) => &c.net,
        }
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        match self {
            Critic::Scalar(c) => &mut c.net,
            Critic::Quantile(c) => &mut c.net,
        }
    }

    /// Quantiles per action; 1 for a scalar critic.
    pub fn n_quantiles(&self) -> usize {
        match self {
            Critic::Scalar(_) => 1,
            Critic::Quantile(c) => c.n_quantiles,
        }
    }

    pub fn forward(&self, states: &Array2<f64>) -> Array2<f64> {
        self.net().forward(states)
    }
}

impl Parameters for Critic {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.net().tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.net_mut().tensors_mut()
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(arg_err(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Element-wise minimum of two critics' per-action values.
pub fn min_q(q1: &[f64], q2: &[f64]) -> Result<Vec<f64>> {
    same_len(q1, q2)?;
    Ok(q1.iter().zip(q2).map(|(a, b)| a.min(*b)).collect())
}

/// Per-index minimum of two quantile sets for the same state-action pair.
pub fn target_quantiles(set1: &[f64], set2: &[f64]) -> Result<Vec<f64>> {
    min_q(set1, set2)
}

/// `tau_hat_j = (2j - 1) / (2M)` for `j = 1..=M`.
pub fn quantile_midpoints(n: usize) -> Vec<f64> {
    (0..n).map(|j| (2 * j + 1) as f64 / (2 * n) as f64).collect()
}

/// Asymmetric Huber penalty `rho_tau^kappa(u)`.
#[inline]
pub fn quantile_huber(u: f64, tau: f64, kappa: f64) -> f64 {
    let w = (tau - if u < 0.0 { 1.0 } else { 0.0 }).abs();
    if u.abs() <= kappa {
        w * 0.5 * u * u
    } else {
        w * kappa * (u.abs() - 0.5 * kappa)
    }
}

/// Derivative of [`quantile_huber`] with respect to `u`.
#[inline]
pub fn quantile_huber_grad(u: f64, tau: f64, kappa: f64) -> f64 {
    let w = (tau - if u < 0.0 { 1.0 } else { 0.0 }).abs();
    if u.abs() <= kappa {
        w * u
    } else {
        w * kappa * u.signum()
    }
}

/// Quantile-regression Huber loss over all `(prediction, target)` pairs,
/// `(1/M) sum_j sum_j' rho_{tau_j}(target_j' - pred_j)`, together with its
/// gradient with respect to `pred`. `taus` holds one fraction per prediction.
pub fn quantile_huber_loss_with_taus(
    pred: &[f64],
    targets: &[f64],
    taus: &[f64],
    kappa: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(kappa > 0.0) {
        return Err(config_err(format!("huber threshold must be positive, got {kappa}")));
    }
    same_len(pred, taus)?;
    if pred.is_empty() || targets.is_empty() {
        return Err(arg_err("empty quantile set"));
    }
    let norm = 1.0 / pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (j, (&p, &tau)) in pred.iter().zip(taus).enumerate() {
        for &t in targets {
            let u = t - p;
            loss += quantile_huber(u, tau, kappa);
            grad[j] -= quantile_huber_grad(u, tau, kappa);
        }
    }
    grad.iter_mut().for_each(|g| *g *= norm);
    Ok((loss * norm, grad))
}

/// [`quantile_huber_loss_with_taus`] at the midpoint fractions.
pub fn quantile_huber_loss(pred: &[f64], targets: &[f64], kappa: f64) -> Result<f64> {
    let taus = quantile_midpoints(pred.len());
    Ok(quantile_huber_loss_with_taus(pred, targets, &taus, kappa)?.0)
}

/// Number of leading quantiles averaged by [`cvar_from_quantiles`].
pub fn cvar_quantile_count(n: usize, phi: f64) -> usize {
    quantile_midpoints(n).iter().filter(|&&t| t <= phi).count().max(1)
}

/// Lower-tail CVaR of a quantile set: mean of the quantiles whose midpoint
/// fraction is at most `phi`, or the first quantile when none qualifies.
pub fn cvar_from_quantiles(q: &[f64], phi: f64) -> Result<f64> {
    if !(phi > 0.0 && phi < 1.0) {
        return Err(config_err(format!("risk level {phi} outside (0, 1)")));
    }
    if q.is_empty() {
        return Err(arg_err("empty quantile set"));
    }
    let m = cvar_quantile_count(q.len(), phi);
    Ok(q[..m].iter().sum::<f64>() / m as f64)
}

pub fn mean_from_quantiles(q: &[f64]) -> f64 {
    q.iter().sum::<f64>() / q.len() as f64
}

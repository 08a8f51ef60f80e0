//! Critic targets and losses, and the actor objective, in batched form.

use ndarray::Array2;
use rand::Rng;

use crate::actor::{policy_entropy, policy_entropy_grad, sample_index, PROB_FLOOR};
use crate::critics::{cvar_from_quantiles, min_q, quantile_huber_loss_with_taus, quantile_midpoints};
use crate::error::{arg_err, Result};

/// `r + gamma (pi^T min(Q1, Q2) + psi H(pi))` for one transition.
pub fn td_target_scalar(reward: f64, next_probs: &[f64], q1: &[f64], q2: &[f64], gamma: f64, psi: f64) -> Result<f64> {
    let q = min_q(q1, q2)?;
    if q.len() != next_probs.len() {
        return Err(arg_err("policy and critic dimensions differ"));
    }
    let value: f64 = next_probs.iter().zip(&q).map(|(p, q)| p * q).sum();
    Ok(reward + gamma * (value + psi * policy_entropy(next_probs)))
}

/// Batch of scalar targets from target-network outputs.
pub fn td_targets_scalar(
    rewards: &[f64],
    next_probs: &Array2<f64>,
    tq1: &Array2<f64>,
    tq2: &Array2<f64>,
    gamma: f64,
    psi: f64,
) -> Result<Vec<f64>> {
    rewards
        .iter()
        .enumerate()
        .map(|(b, &r)| {
            td_target_scalar(
                r,
                next_probs.row(b).as_slice().unwrap(),
                tq1.row(b).as_slice().unwrap(),
                tq2.row(b).as_slice().unwrap(),
                gamma,
                psi,
            )
        })
        .collect()
}

/// `mean_b sum_i (y_hat - y^i)^2`.
pub fn critic_loss_scalar(targets: &[f64], y1: &[f64], y2: &[f64]) -> Result<f64> {
    if targets.is_empty() {
        return Err(arg_err("empty batch"));
    }
    if targets.len() != y1.len() || targets.len() != y2.len() {
        return Err(arg_err("batch dimensions differ"));
    }
    let total: f64 = targets
        .iter()
        .zip(y1.iter().zip(y2))
        .map(|(t, (a, b))| (t - a).powi(2) + (t - b).powi(2))
        .sum();
    Ok(total / targets.len() as f64)
}

/// Gradient of the scalar critic loss for one critic with respect to its
/// full output matrix; only the taken actions receive signal.
pub fn scalar_critic_grad(q: &Array2<f64>, actions: &[usize], targets: &[f64]) -> Array2<f64> {
    let scale = 2.0 / targets.len() as f64;
    let mut g = Array2::zeros(q.raw_dim());
    for (b, (&a, &t)) in actions.iter().zip(targets).enumerate() {
        g[(b, a)] = scale * (q[(b, a)] - t);
    }
    g
}

/// Values of the taken actions.
pub fn gather(q: &Array2<f64>, actions: &[usize]) -> Vec<f64> {
    actions.iter().enumerate().map(|(b, &a)| q[(b, a)]).collect()
}

/// Element-wise minimum of two output matrices.
pub fn min_rows(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::Zip::from(a).and(b).map_collect(|x, y| x.min(*y))
}

/// Mean over the batch of `-(pi^T q + psi H(pi))`, and its gradient with
/// respect to `probs`.
pub fn actor_loss(probs: &Array2<f64>, q: &Array2<f64>, psi: f64) -> Result<(f64, Array2<f64>)> {
    if probs.dim() != q.dim() {
        return Err(arg_err("policy and value dimensions differ"));
    }
    if probs.nrows() == 0 {
        return Err(arg_err("empty batch"));
    }
    let scale = 1.0 / probs.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(probs.raw_dim());
    for b in 0..probs.nrows() {
        let p = probs.row(b);
        let qs = q.row(b);
        let value: f64 = p.iter().zip(qs.iter()).map(|(p, q)| p * q).sum();
        loss -= value + psi * policy_entropy(p.as_slice().unwrap());
        for a in 0..p.len() {
            grad[(b, a)] = -scale * (qs[a] + psi * policy_entropy_grad(p[a]));
        }
    }
    Ok((loss * scale, grad))
}

/// Per-action CVaR of the min-merged quantile outputs, shape `B x (N + 1)`.
pub fn risk_q_values(z1: &Array2<f64>, z2: &Array2<f64>, n_quantiles: usize, phi: f64) -> Result<Array2<f64>> {
    let merged = min_rows(z1, z2);
    let n_actions = merged.ncols() / n_quantiles;
    let mut out = Array2::zeros((merged.nrows(), n_actions));
    for b in 0..merged.nrows() {
        let row = merged.row(b);
        let row = row.as_slice().unwrap();
        for a in 0..n_actions {
            out[(b, a)] = cvar_from_quantiles(&row[a * n_quantiles..(a + 1) * n_quantiles], phi)?;
        }
    }
    Ok(out)
}

/// Per-action mean of the min-merged quantile outputs.
pub fn mean_q_values(z1: &Array2<f64>, z2: &Array2<f64>, n_quantiles: usize) -> Array2<f64> {
    let merged = min_rows(z1, z2);
    let n_actions = merged.ncols() / n_quantiles;
    Array2::from_shape_fn((merged.nrows(), n_actions), |(b, a)| {
        (0..n_quantiles).map(|j| merged[(b, a * n_quantiles + j)]).sum::<f64>() / n_quantiles as f64
    })
}

/// Distributional targets `r + gamma (sigma_hat_j(s', a') - psi ln pi_hat(a'|s'))`
/// with one `a' ~ pi_hat(.|s')` per transition.
pub fn distributional_targets<R: Rng + ?Sized>(
    rewards: &[f64],
    next_probs: &Array2<f64>,
    tz1: &Array2<f64>,
    tz2: &Array2<f64>,
    n_quantiles: usize,
    gamma: f64,
    psi: f64,
    rng: &mut R,
) -> Array2<f64> {
    let mut out = Array2::zeros((rewards.len(), n_quantiles));
    for (b, &r) in rewards.iter().enumerate() {
        let probs = next_probs.row(b);
        let a = sample_index(probs.as_slice().unwrap(), rng);
        let bonus = psi * probs[a].max(PROB_FLOOR).ln();
        for j in 0..n_quantiles {
            let k = a * n_quantiles + j;
            out[(b, j)] = r + gamma * (tz1[(b, k)].min(tz2[(b, k)]) - bonus);
        }
    }
    out
}

/// Batch-mean quantile Huber loss of one critic on the taken actions, and the
/// gradient with respect to its full output matrix.
pub fn quantile_critic_loss(
    z: &Array2<f64>,
    actions: &[usize],
    targets: &Array2<f64>,
    kappa: f64,
) -> Result<(f64, Array2<f64>)> {
    if actions.is_empty() {
        return Err(arg_err("empty batch"));
    }
    let m = targets.ncols();
    let taus = quantile_midpoints(m);
    let scale = 1.0 / actions.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(z.raw_dim());
    for (b, &a) in actions.iter().enumerate() {
        let row = z.row(b);
        let pred = &row.as_slice().unwrap()[a * m..(a + 1) * m];
        let (l, g) = quantile_huber_loss_with_taus(pred, targets.row(b).as_slice().unwrap(), &taus, kappa)?;
        loss += l;
        for j in 0..m {
            grad[(b, a * m + j)] = scale * g[j];
        }
    }
    Ok((loss * scale, grad))
}

/// Sum of both critics' quantile losses.
pub fn distributional_loss(
    z1: &Array2<f64>,
    z2: &Array2<f64>,
    actions: &[usize],
    targets: &Array2<f64>,
    kappa: f64,
) -> Result<f64> {
    Ok(quantile_critic_loss(z1, actions, targets, kappa)?.0 + quantile_critic_loss(z2, actions, targets, kappa)?.0)
}

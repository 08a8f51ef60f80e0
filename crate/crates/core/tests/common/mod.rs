#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vaoi_core::actor::Actor;
use vaoi_core::agents::losses::{actor_loss, quantile_critic_loss};
use vaoi_core::critics::{quantile_huber_loss_with_taus, quantile_midpoints, QuantileCritic};
use vaoi_core::diffusion::{ChainNoise, DiffusionActor, DiffusionArch, DiffusionSchedule};
use vaoi_core::nn::{Mlp, Parameters};

pub const FD_STEP: f64 = 1e-5;

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-300)
}

/// Central differences of `loss` over every parameter of `params`.
pub fn numeric_grad<P: Parameters + Clone>(params: &P, loss: impl Fn(&P) -> f64) -> Vec<f64> {
    let mut probe = params.clone();
    let mut out = Vec::new();
    let n_tensors = probe.tensors_mut().len();
    for t in 0..n_tensors {
        let len = probe.tensors_mut()[t].len();
        for i in 0..len {
            let orig = probe.tensors_mut()[t][i];
            probe.tensors_mut()[t][i] = orig + FD_STEP;
            let up = loss(&probe);
            probe.tensors_mut()[t][i] = orig - FD_STEP;
            let down = loss(&probe);
            probe.tensors_mut()[t][i] = orig;
            out.push((up - down) / (2.0 * FD_STEP));
        }
    }
    out
}

/// Actor loss through the full K = 5 reverse chain with width-4 networks and
/// fixed chain noise. Returns the relative error of the backward pass.
pub fn actor_chain_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_users = 2;
    let schedule = DiffusionSchedule::new(5, 0.1, 10.0).unwrap();
    let actor = Actor::Diffusion(DiffusionActor::new(n_users, &DiffusionArch::tiny(4), schedule, &mut rng));
    let batch = 3;
    let states = Array2::from_shape_simple_fn((batch, n_users), || rng.random_range(0.0..1.0));
    let q = Array2::from_shape_simple_fn((batch, n_users + 1), || rng.random_range(-5.0..0.0));
    let noise = ChainNoise::sample(batch, n_users + 1, 5, &mut rng);
    let psi = 0.05;
    let loss = |a: &Actor| actor_loss(&a.probs_with_noise(states.view(), Some(&noise)), &q, psi).unwrap().0;
    let cache = actor.forward_train_with_noise(states.view(), Some(&noise));
    let (_, d_probs) = actor_loss(cache.probs(), &q, psi).unwrap();
    let analytic = actor.backward(&cache, &d_probs).flatten();
    relative_error(&analytic, &numeric_grad(&actor, loss))
}

/// Quantile Huber loss of a small quantile critic, differentiated through the
/// network. Targets straddle the Huber threshold.
pub fn quantile_critic_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_users, m, batch) = (2, 4, 3);
    let critic = QuantileCritic::new(n_users, &[4, 4], m, &mut rng);
    let states = Array2::from_shape_simple_fn((batch, n_users), || rng.random_range(0.0..1.0));
    let actions: Vec<usize> = (0..batch).map(|_| rng.random_range(0..=n_users)).collect();
    let targets = Array2::from_shape_simple_fn((batch, m), || rng.random_range(-3.0..3.0));
    let loss = |net: &Mlp| quantile_critic_loss(&net.forward(&states), &actions, &targets, 1.0).unwrap().0;
    let cache = critic.net.forward_cached(&states);
    let (_, d_out) = quantile_critic_loss(cache.output(), &actions, &targets, 1.0).unwrap();
    let mut grads = critic.net.zeros_like();
    critic.net.backward(&cache, &d_out, &mut grads);
    relative_error(&grads.flatten(), &numeric_grad(&critic.net, loss))
}

/// Quantile Huber loss differentiated with respect to the predictions.
pub fn quantile_huber_pred_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 8;
    let pred: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
    let targets: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
    let taus = quantile_midpoints(m);
    let (_, analytic) = quantile_huber_loss_with_taus(&pred, &targets, &taus, 1.0).unwrap();
    let numeric: Vec<f64> = (0..m)
        .map(|j| {
            let mut p = pred.clone();
            p[j] += FD_STEP;
            let up = quantile_huber_loss_with_taus(&p, &targets, &taus, 1.0).unwrap().0;
            p[j] -= 2.0 * FD_STEP;
            let down = quantile_huber_loss_with_taus(&p, &targets, &taus, 1.0).unwrap().0;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect();
    relative_error(&analytic, &numeric)
}

//! Policies over the `N + 1` scheduling actions.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ChainCache, ChainNoise, DiffusionActor};
use crate::error::{arg_err, Result};
use crate::nn::{softmax_backward, softmax_rows, Activation, Mlp, MlpCache, Parameters, TensorRef};

/// Floor applied inside logarithms of probabilities.
pub const PROB_FLOOR: f64 = 1e-8;

/// `-sum_i p_i ln max(p_i, 1e-8)`.
pub fn policy_entropy(probs: &[f64]) -> f64 {
    -probs.iter().map(|&p| p * p.max(PROB_FLOOR).ln()).sum::<f64>()
}

/// Derivative of [`policy_entropy`] with respect to each probability.
pub fn policy_entropy_grad(p: f64) -> f64 {
    if p > PROB_FLOOR {
        -(p.ln() + 1.0)
    } else {
        -PROB_FLOOR.ln()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDistribution {
    pub probs: Vec<f64>,
}

impl PolicyDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(arg_err("probabilities must be finite and non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(arg_err(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn entropy(&self) -> f64 {
        policy_entropy(&self.probs)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.probs, rng)
    }

    /// Most likely action, ties to the lower index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative sum; take the last positive entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Direct state-to-logits MLP with a softmax head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpActor {
    pub net: Mlp,
}

impl MlpActor {
    pub fn new<R: Rng + ?Sized>(n_users: usize, hidden: &[usize], rng: &mut R) -> Self {
        Self {
            net: Mlp::with_hidden(n_users, hidden, n_users + 1, Activation::Identity, rng),
        }
    }
}

impl Parameters for MlpActor {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.net.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.tensors_mut()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Actor {
    Diffusion(DiffusionActor),
    Mlp(MlpActor),
}

pub enum ActorCache {
    Diffusion { chain: ChainCache, probs: Array2<f64> },
    Mlp { mlp: MlpCache, probs: Array2<f64> },
}

impl ActorCache {
    pub fn probs(&self) -> &Array2<f64> {
        match self {
            ActorCache::Diffusion { probs, .. } | ActorCache::Mlp { probs, .. } => probs,
        }
    }
}

impl Actor {
    pub fn n_actions(&self) -> usize {
        match self {
            Actor::Diffusion(d) => d.n_actions(),
            Actor::Mlp(m) => m.net.outputs(),
        }
    }

    pub fn is_diffusion(&self) -> bool {
        matches!(self, Actor::Diffusion(_))
    }

    fn sample_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Option<ChainNoise> {
        match self {
            Actor::Diffusion(d) => Some(ChainNoise::sample(rows, d.n_actions(), d.schedule.steps, rng)),
            Actor::Mlp(_) => None,
        }
    }

    /// Action probabilities for a batch of normalised states.
    pub fn probs<R: Rng + ?Sized>(&self, states: ArrayView2<f64>, rng: &mut R) -> Array2<f64> {
        let noise = self.sample_noise(states.nrows(), rng);
        self.probs_with_noise(states, noise.as_ref())
    }

    /// As [`Actor::probs`] with the chain noise supplied; `noise` is ignored
    /// by the MLP actor.
    pub fn probs_with_noise(&self, states: ArrayView2<f64>, noise: Option<&ChainNoise>) -> Array2<f64> {
        match self {
            Actor::Diffusion(d) => softmax_rows(&d.sample_x0(states, noise.expect("diffusion actor needs chain noise"))),
            Actor::Mlp(m) => softmax_rows(&m.net.forward(&states.to_owned())),
        }
    }

    pub fn distribution<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> PolicyDistribution {
        let s = ArrayView2::from_shape((1, state.len()), state).expect("state row");
        PolicyDistribution {
            probs: self.probs(s, rng).into_raw_vec_and_offset().0,
        }
    }

    pub fn forward_train<R: Rng + ?Sized>(&self, states: ArrayView2<f64>, rng: &mut R) -> ActorCache {
        let noise = self.sample_noise(states.nrows(), rng);
        self.forward_train_with_noise(states, noise.as_ref())
    }

    pub fn forward_train_with_noise(&self, states: ArrayView2<f64>, noise: Option<&ChainNoise>) -> ActorCache {
        match self {
            Actor::Diffusion(d) => {
                let (x0, chain) = d.sample_x0_cached(states, noise.expect("diffusion actor needs chain noise"));
                ActorCache::Diffusion {
                    chain,
                    probs: softmax_rows(&x0),
                }
            }
            Actor::Mlp(m) => {
                let mlp = m.net.forward_cached(&states.to_owned());
                let probs = softmax_rows(mlp.output());
                ActorCache::Mlp { mlp, probs }
            }
        }
    }

    /// Gradients of a loss with respect to the parameters given `dL/dprobs`.
    pub fn backward(&self, cache: &ActorCache, d_probs: &Array2<f64>) -> Actor {
        let d_logits = softmax_backward(cache.probs(), d_probs);
        match (self, cache) {
            (Actor::Diffusion(d), ActorCache::Diffusion { chain, .. }) => {
                let mut grads = d.zeros_like();
                d.backward_x0(chain, &d_logits, &mut grads.net);
                Actor::Diffusion(grads)
            }
            (Actor::Mlp(m), ActorCache::Mlp { mlp, .. }) => {
                let mut grads = m.zeros_like();
                m.net.backward(mlp, &d_logits, &mut grads.net);
                Actor::Mlp(grads)
            }
            _ => panic!("actor cache does not match actor kind"),
        }
    }
}

impl Parameters for Actor {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        match self {
            Actor::Diffusion(d) => d.tensors(),
            Actor::Mlp(m) => m.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Actor::Diffusion(d) => d.tensors_mut(),
            Actor::Mlp(m) => m.tensors_mut(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DiffusionArch, DiffusionSchedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_reference_values() {
        assert!((policy_entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert!((policy_entropy(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-12);
        assert!(policy_entropy(&[1.0 - 1e-12, 1e-12]).abs() < 1e-9);
        assert_eq!(policy_entropy(&[1.0, 0.0]), 0.0);
        let uniform = vec![1.0 / 21.0; 21];
        assert!((policy_entropy(&uniform) - 3.0445).abs() < 1e-4);
    }

    #[test]
    fn constant_x0_gives_uniform() {
        let p = softmax_rows(&Array2::from_elem((1, 6), 2.5));
        for &v in p.iter() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sampling_is_reproducible_and_in_range() {
        let dist = PolicyDistribution::new(vec![0.1, 0.2, 0.7]).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<_> = (0..100).map(|_| dist.sample(&mut a)).collect();
        let ys: Vec<_> = (0..100).map(|_| dist.sample(&mut b)).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().all(|&x| x < 3));
        assert_eq!(dist.argmax(), 2);
        assert_eq!(PolicyDistribution::new(vec![0.5, 0.5]).unwrap().argmax(), 0);
    }

    #[test]
    fn distribution_validation() {
        assert!(PolicyDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(PolicyDistribution::new(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn diffusion_policy_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let schedule = DiffusionSchedule::new(5, 0.1, 10.0).unwrap();
        let actor = Actor::Diffusion(DiffusionActor::new(4, &DiffusionArch::tiny(8), schedule, &mut rng));
        let s = [0.1, 0.0, 0.3, 0.9];
        let a = actor.distribution(&s, &mut ChaCha8Rng::seed_from_u64(10));
        let b = actor.distribution(&s, &mut ChaCha8Rng::seed_from_u64(10));
        assert_eq!(a, b);
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(a.probs.iter().all(|&p| p > 0.0));
        let h = a.entropy();
        assert!(h >= 0.0 && h <= 5f64.ln() + 1e-12);
    }
}

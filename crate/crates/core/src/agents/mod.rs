//! SAC-family learners for the constrained scheduling problem.
//!
//! One parametric trainer covers all four variants: the actor is either the
//! diffusion policy or a direct MLP-softmax policy, and the critics are either
//! scalar or quantile double critics.

mod lagrange;
pub mod losses;
mod replay;

pub use lagrange::LagrangeState;
pub use replay::{Batch, ReplayBuffer, Transition};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actor::{Actor, MlpActor};
use crate::critics::{Critic, QuantileCritic, ScalarCritic};
use crate::diffusion::{DiffusionActor, DiffusionArch, DiffusionSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN};
use crate::env::{EnvConfig, StatusUpdateEnv};
use crate::error::{arg_err, config_err, Result};
use crate::nn::{clip_grad_norm, soft_update, Adam, Parameters};
use losses::{
    actor_loss, critic_loss_scalar, distributional_targets, gather, min_rows, quantile_critic_loss, risk_q_values,
    scalar_critic_grad, td_targets_scalar,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Sac,
    D2sac,
    RsDsac,
    RsD3sac,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Sac, Algo::D2sac, Algo::RsDsac, Algo::RsD3sac];

    pub fn uses_diffusion(self) -> bool {
        matches!(self, Algo::D2sac | Algo::RsD3sac)
    }

    pub fn is_distributional(self) -> bool {
        matches!(self, Algo::RsDsac | Algo::RsD3sac)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algo::Sac => "sac",
            Algo::D2sac => "d2sac",
            Algo::RsDsac => "rs_dsac",
            Algo::RsD3sac => "rs_d3sac",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sac" => Ok(Algo::Sac),
            "d2sac" => Ok(Algo::D2sac),
            "rs_dsac" => Ok(Algo::RsDsac),
            "rs_d3sac" => Ok(Algo::RsD3sac),
            other => Err(arg_err(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Entropy temperature.
    pub psi: f64,
    /// Soft update coefficient.
    pub zeta: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub buffer_capacity: usize,
    pub transitions_per_iteration: usize,
    pub kappa: f64,
    /// Dual step size.
    pub delta: f64,
    pub n_quantiles: usize,
    /// CVaR confidence level; the critic risk level is `1 - alpha`.
    pub alpha: f64,
    /// Gradient steps per training iteration.
    pub updates_per_iteration: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub initial_lambda: f64,
    /// Rebuild replayed rewards with the current multiplier.
    pub reshape_rewards_at_sample: bool,
    pub hidden: Vec<usize>,
    pub diffusion_arch: DiffusionArch,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            actor_lr: 2e-4,
            critic_lr: 2e-3,
            psi: 0.05,
            zeta: 0.005,
            batch_size: 512,
            gamma: 0.95,
            diffusion_steps: 5,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            buffer_capacity: 5_000_000,
            transitions_per_iteration: 1000,
            kappa: 1.0,
            delta: 1.0,
            n_quantiles: 64,
            alpha: 0.75,
            updates_per_iteration: 1,
            grad_clip: 10.0,
            initial_lambda: 0.0,
            reshape_rewards_at_sample: false,
            hidden: vec![256, 256],
            diffusion_arch: DiffusionArch::default(),
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn phi(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("kappa", self.kappa),
            ("delta", self.delta),
            ("beta_min", self.beta_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(config_err(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.psi >= 0.0) {
            return Err(config_err("psi must be nonnegative"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(config_err(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.zeta >= 0.0 && self.zeta <= 1.0) {
            return Err(config_err(format!("zeta {} outside [0, 1]", self.zeta)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(config_err(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("diffusion_steps", self.diffusion_steps),
            ("buffer_capacity", self.buffer_capacity),
            ("transitions_per_iteration", self.transitions_per_iteration),
            ("n_quantiles", self.n_quantiles),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(config_err("hidden widths must be nonempty and positive"));
        }
        if !(self.initial_lambda >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(config_err("initial_lambda and grad_clip must be nonnegative"));
        }
        DiffusionSchedule::new(self.diffusion_steps, self.beta_min, self.beta_max)?;
        Ok(())
    }
}

/// Per-iteration training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_vaoi: f64,
    pub lambda: f64,
    pub eta: f64,
    /// `NaN` while the buffer is still warming up.
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub updates: usize,
}

/// Everything needed to restore a trained policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub algo: Algo,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub iteration: usize,
    pub lagrange: LagrangeState,
    pub actor: Actor,
}

pub const CHECKPOINT_FORMAT: &str = "vaoi-policy-v1";

impl PolicyCheckpoint {
    pub fn check_env(&self, env: &EnvConfig) -> Result<()> {
        if env.n_users != self.env.n_users || env.d_max != self.env.d_max {
            return Err(crate::Error::Mismatch(format!(
                "checkpoint trained for N={} d_max={}, requested N={} d_max={}",
                self.env.n_users, self.env.d_max, env.n_users, env.d_max
            )));
        }
        Ok(())
    }
}

struct Optimizers {
    actor: Adam,
    critics: [Adam; 2],
}

pub struct Trainer {
    algo: Algo,
    env_cfg: EnvConfig,
    cfg: TrainConfig,
    seed: u64,
    env: StatusUpdateEnv,
    actor: Actor,
    target_actor: Actor,
    critics: [Critic; 2],
    target_critics: [Critic; 2],
    opt: Optimizers,
    buffer: ReplayBuffer,
    lagrange: LagrangeState,
    rng: ChaCha8Rng,
    iteration: usize,
}

fn build_actor<R: Rng + ?Sized>(algo: Algo, n: usize, cfg: &TrainConfig, rng: &mut R) -> Result<Actor> {
    Ok(if algo.uses_diffusion() {
        let schedule = DiffusionSchedule::new(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)?;
        Actor::Diffusion(DiffusionActor::new(n, &cfg.diffusion_arch, schedule, rng))
    } else {
        Actor::Mlp(MlpActor::new(n, &cfg.hidden, rng))
    })
}

fn build_critic<R: Rng + ?Sized>(algo: Algo, n: usize, cfg: &TrainConfig, rng: &mut R) -> Critic {
    if algo.is_distributional() {
        Critic::Quantile(QuantileCritic::new(n, &cfg.hidden, cfg.n_quantiles, rng))
    } else {
        Critic::Scalar(ScalarCritic::new(n, &cfg.hidden, rng))
    }
}

impl Trainer {
    pub fn new(algo: Algo, env_cfg: EnvConfig, cfg: TrainConfig, seed: u64) -> Result<Self> {
        env_cfg.validate()?;
        cfg.validate()?;
        let n = env_cfg.n_users;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let actor = build_actor(algo, n, &cfg, &mut rng)?;
        let critics = [build_critic(algo, n, &cfg, &mut rng), build_critic(algo, n, &cfg, &mut rng)];
        let opt = Optimizers {
            actor: Adam::new(&actor, cfg.actor_lr),
            critics: [Adam::new(&critics[0], cfg.critic_lr), Adam::new(&critics[1], cfg.critic_lr)],
        };
        Ok(Self {
            algo,
            env: StatusUpdateEnv::new(env_cfg.clone(), seed)?,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, n)?,
            lagrange: LagrangeState::new(cfg.initial_lambda),
            target_actor: actor.clone(),
            target_critics: critics.clone(),
            actor,
            critics,
            opt,
            env_cfg,
            cfg,
            seed,
            rng,
            iteration: 0,
        })
    }

    pub fn algo(&self) -> Algo {
        self.algo
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env_cfg
    }

    pub fn actor(&self) -> &Actor {
        &self.actor
    }

    pub fn target_actor(&self) -> &Actor {
        &self.target_actor
    }

    pub fn critics(&self) -> &[Critic; 2] {
        &self.critics
    }

    pub fn target_critics(&self) -> &[Critic; 2] {
        &self.target_critics
    }

    pub fn lagrange(&self) -> LagrangeState {
        self.lagrange
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            algo: self.algo,
            env: self.env_cfg.clone(),
            train: self.cfg.clone(),
            seed: self.seed,
            iteration: self.iteration,
            lagrange: self.lagrange,
            actor: self.actor.clone(),
        }
    }

    /// Collect `T` transitions with the current policy, update the multiplier
    /// once, then run the configured number of critic/actor/target updates.
    pub fn train_iteration(&mut self) -> Result<IterationMetrics> {
        self.iteration += 1;
        let d_max = self.env_cfg.d_max;
        let steps = self.cfg.transitions_per_iteration;
        let mut reward_sum = 0.0;
        let mut vaoi_sum = 0.0;
        for _ in 0..steps {
            let state = self.env.state().vaoi.clone();
            let features = self.env.state().features(d_max);
            let action = self.actor.distribution(&features, &mut self.rng).sample(&mut self.rng);
            let lambda = self.lagrange.lambda;
            let out = self.env.step(action, lambda)?;
            let cost = out.cost;
            self.buffer.push(Transition {
                state,
                action,
                next_state: out.next_state.vaoi.clone(),
                reward: out.reward,
                penalty: out.reward + lambda * cost as f64,
                cost,
            });
            reward_sum += out.reward;
            vaoi_sum += out.next_state.vaoi_sum() as f64;
            self.lagrange.running_cost_update(cost as f64);
        }
        self.lagrange.lagrange_update(self.env_cfg.eta_max, self.cfg.delta);

        let mut critic_loss = f64::NAN;
        let mut actor_loss = f64::NAN;
        let mut updates = 0;
        if self.buffer.len() >= self.cfg.batch_size {
            let (mut cl, mut al) = (0.0, 0.0);
            for _ in 0..self.cfg.updates_per_iteration {
                let (c, a) = self.update()?;
                cl += c;
                al += a;
                updates += 1;
            }
            if updates > 0 {
                critic_loss = cl / updates as f64;
                actor_loss = al / updates as f64;
            }
        }
        Ok(IterationMetrics {
            iteration: self.iteration,
            mean_reward: reward_sum / steps as f64,
            mean_vaoi: vaoi_sum / (steps * self.env_cfg.n_users) as f64,
            lambda: self.lagrange.lambda,
            eta: self.lagrange.eta,
            critic_loss,
            actor_loss,
            updates,
        })
    }

    /// One critic step, one actor step and a soft target update on a fresh
    /// minibatch. Returns the critic and actor losses.
    pub fn update(&mut self) -> Result<(f64, f64)> {
        let reshape = self.cfg.reshape_rewards_at_sample.then_some(self.lagrange.lambda);
        let batch = self
            .buffer
            .sample(self.cfg.batch_size, self.env_cfg.d_max, reshape, &mut self.rng)?;
        let critic_loss = self.critic_step(&batch)?;
        let actor_loss = self.actor_step(batch.states.view())?;
        self.soft_update_targets();
        Ok((critic_loss, actor_loss))
    }

    fn critic_step(&mut self, batch: &Batch) -> Result<f64> {
        let cfg = &self.cfg;
        let next_probs = self.target_actor.probs(batch.next_states.view(), &mut self.rng);
        let t1 = self.target_critics[0].forward(&batch.next_states);
        let t2 = self.target_critics[1].forward(&batch.next_states);
        let caches = [
            self.critics[0].net().forward_cached(&batch.states),
            self.critics[1].net().forward_cached(&batch.states),
        ];
        let (loss, grads_out) = if self.algo.is_distributional() {
            let targets = distributional_targets(
                &batch.rewards,
                &next_probs,
                &t1,
                &t2,
                cfg.n_quantiles,
                cfg.gamma,
                cfg.psi,
                &mut self.rng,
            );
            let (l1, g1) = quantile_critic_loss(caches[0].output(), &batch.actions, &targets, cfg.kappa)?;
            let (l2, g2) = quantile_critic_loss(caches[1].output(), &batch.actions, &targets, cfg.kappa)?;
            (l1 + l2, [g1, g2])
        } else {
            let targets = td_targets_scalar(&batch.rewards, &next_probs, &t1, &t2, cfg.gamma, cfg.psi)?;
            let y1 = gather(caches[0].output(), &batch.actions);
            let y2 = gather(caches[1].output(), &batch.actions);
            let loss = critic_loss_scalar(&targets, &y1, &y2)?;
            (
                loss,
                [
                    scalar_critic_grad(caches[0].output(), &batch.actions, &targets),
                    scalar_critic_grad(caches[1].output(), &batch.actions, &targets),
                ],
            )
        };
        for i in 0..2 {
            let mut grads = self.critics[i].zeros_like();
            self.critics[i].net().backward(&caches[i], &grads_out[i], grads.net_mut());
            clip_grad_norm(&mut grads, self.cfg.grad_clip);
            self.opt.critics[i].step(&mut self.critics[i], &grads);
        }
        Ok(loss)
    }

    /// Action values fed to the actor: the min of the scalar critics, or the
    /// per-action CVaR of the min-merged quantile critics.
    pub fn actor_q_values(&self, states: &Array2<f64>) -> Result<Array2<f64>> {
        let q1 = self.critics[0].forward(states);
        let q2 = self.critics[1].forward(states);
        if self.algo.is_distributional() {
            risk_q_values(&q1, &q2, self.cfg.n_quantiles, self.cfg.phi())
        } else {
            Ok(min_rows(&q1, &q2))
        }
    }

    fn actor_step(&mut self, states: ArrayView2<f64>) -> Result<f64> {
        let q = self.actor_q_values(&states.to_owned())?;
        let cache = self.actor.forward_train(states, &mut self.rng);
        let (loss, d_probs) = actor_loss(cache.probs(), &q, self.cfg.psi)?;
        let mut grads = self.actor.backward(&cache, &d_probs);
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        self.opt.actor.step(&mut self.actor, &grads);
        Ok(loss)
    }

    fn soft_update_targets(&mut self) {
        let zeta = self.cfg.zeta;
        soft_update(&mut self.target_actor, &self.actor, zeta);
        for i in 0..2 {
            soft_update(&mut self.target_critics[i], &self.critics[i], zeta);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            transitions_per_iteration: 32,
            hidden: vec![8, 8],
            diffusion_arch: DiffusionArch::tiny(4),
            n_quantiles: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn algo_names_roundtrip() {
        for a in Algo::ALL {
            assert_eq!(a.name().parse::<Algo>().unwrap(), a);
        }
        assert!("ppo".parse::<Algo>().is_err());
        assert_eq!("RS-D3SAC".parse::<Algo>().unwrap(), Algo::RsD3sac);
    }

    #[test]
    fn defaults_match_reference_table() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.actor_lr, c.critic_lr, c.psi, c.zeta, c.batch_size, c.gamma),
            (2e-4, 2e-3, 0.05, 0.005, 512, 0.95)
        );
        assert_eq!((c.diffusion_steps, c.buffer_capacity, c.transitions_per_iteration), (5, 5_000_000, 1000));
        assert_eq!((c.kappa, c.delta, c.n_quantiles, c.alpha), (1.0, 1.0, 64, 0.75));
        assert!((c.phi() - 0.25).abs() < 1e-15);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            TrainConfig { gamma: 0.0, ..tiny_config() },
            TrainConfig { alpha: 1.0, ..tiny_config() },
            TrainConfig { zeta: 1.5, ..tiny_config() },
            TrainConfig { batch_size: 0, ..tiny_config() },
            TrainConfig { kappa: 0.0, ..tiny_config() },
            TrainConfig { beta_min: 2.0, beta_max: 1.0, ..tiny_config() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    fn run(algo: Algo, cfg: TrainConfig, iters: usize) -> (Trainer, Vec<IterationMetrics>) {
        let env = EnvConfig::uniform(3, 0.75, 0.9, 0.85);
        let mut t = Trainer::new(algo, env, cfg, 7).unwrap();
        let m = (0..iters).map(|_| t.train_iteration().unwrap()).collect();
        (t, m)
    }

    #[test]
    fn iteration_bookkeeping() {
        for algo in Algo::ALL {
            let (t, metrics) = run(algo, tiny_config(), 3);
            assert_eq!(t.buffer().len(), 96);
            assert_eq!(t.lagrange().steps, 96);
            assert!(metrics[0].critic_loss.is_finite());
            assert!(metrics.iter().all(|m| m.lambda >= 0.0 && (0.0..=1.0).contains(&m.eta)));
        }
    }

    #[test]
    fn warmup_skips_updates() {
        let cfg = TrainConfig { batch_size: 64, ..tiny_config() };
        let (_, metrics) = run(Algo::D2sac, cfg, 2);
        assert_eq!(metrics[0].updates, 0);
        assert!(metrics[0].critic_loss.is_nan());
        assert_eq!(metrics[1].updates, 1);
    }

    #[test]
    fn seeded_runs_are_identical() {
        for algo in [Algo::D2sac, Algo::RsD3sac] {
            let (_, a) = run(algo, tiny_config(), 3);
            let (_, b) = run(algo, tiny_config(), 3);
            assert_eq!(format!("{a:?}"), format!("{b:?}"));
        }
    }

    #[test]
    fn hard_and_frozen_target_updates() {
        let (t, _) = run(Algo::RsD3sac, TrainConfig { zeta: 1.0, ..tiny_config() }, 1);
        assert_eq!(t.target_actor().flatten(), t.actor().flatten());
        assert_eq!(t.target_critics()[1].flatten(), t.critics()[1].flatten());

        let env = EnvConfig::uniform(3, 0.75, 0.9, 0.85);
        let mut frozen = Trainer::new(Algo::Sac, env, TrainConfig { zeta: 0.0, ..tiny_config() }, 7).unwrap();
        let before = frozen.target_critics()[0].flatten();
        let actor_before = frozen.target_actor().flatten();
        frozen.train_iteration().unwrap();
        assert_eq!(frozen.target_critics()[0].flatten(), before);
        assert_eq!(frozen.target_actor().flatten(), actor_before);
        assert_ne!(frozen.critics()[0].flatten(), before);
    }

    #[test]
    fn soft_update_stays_between() {
        let env = EnvConfig::uniform(3, 0.75, 0.9, 0.85);
        let mut t = Trainer::new(Algo::D2sac, env, tiny_config(), 3).unwrap();
        t.train_iteration().unwrap();
        let old_target = t.target_actor().flatten();
        t.train_iteration().unwrap();
        let online = t.actor().flatten();
        let new_target = t.target_actor().flatten();
        for ((o, n), w) in old_target.iter().zip(&new_target).zip(&online) {
            let (lo, hi) = if o < w { (o, w) } else { (w, o) };
            assert!(*n >= lo - 1e-15 && *n <= hi + 1e-15);
        }
    }
}

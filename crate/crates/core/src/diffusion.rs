//! Variance-preserving diffusion policy over the `N + 1` scheduling actions.
//!
//! The reverse chain starts from `x_K ~ N(0, I)` and applies `K` denoising
//! steps, each driven by a noise predictor conditioned on the current sample,
//! the normalised VAoI state and a sinusoidal embedding of the step index. The
//! final sample `x_0` is mapped to action probabilities with a softmax. The
//! forward (noising) process is never run during training; only its schedule
//! tables are needed.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Result};
use crate::nn::{prefixed, Activation, Mlp, MlpCache, Parameters, TensorRef};

pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 10.0;

/// Precomputed `beta`, `alpha`, `alpha_bar` and posterior variance tables.
/// Vectors are indexed by `k - 1` for step `k` in `1..=K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub beta_tildes: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(config_err("diffusion needs at least one step"));
        }
        if !(beta_min.is_finite() && beta_max.is_finite()) || beta_min <= 0.0 || beta_max < beta_min {
            return Err(config_err(format!(
                "need 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        let kf = steps as f64;
        let betas: Vec<f64> = (1..=steps)
            .map(|k| {
                let expo = -beta_min / kf - (2.0 * k as f64 - 1.0) / (2.0 * kf * kf) * (beta_max - beta_min);
                -expo.exp_m1()
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let beta_tildes = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Ok(Self {
            steps,
            beta_min,
            beta_max,
            betas,
            alphas,
            alpha_bars,
            beta_tildes,
        })
    }

    pub fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps {
            return Err(arg_err(format!("diffusion step {k} outside [1, {}]", self.steps)));
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    /// `alpha_bar_{k-1}` with `alpha_bar_0 = 1`.
    pub fn alpha_bar_prev(&self, k: usize) -> f64 {
        if k == 1 {
            1.0
        } else {
            self.alpha_bars[k - 2]
        }
    }

    pub fn beta_tilde(&self, k: usize) -> f64 {
        self.beta_tildes[k - 1]
    }

    /// Coefficient of the bounded noise prediction in the reverse mean,
    /// `beta_k / (sqrt(alpha_k) * sqrt(1 - alpha_bar_k))`.
    fn noise_coefficient(&self, k: usize) -> f64 {
        self.beta(k) / ((1.0 - self.alpha_bar(k)).sqrt() * self.alpha(k).sqrt())
    }

    /// `x_0 = x_k / sqrt(abar_k) - sqrt(1/abar_k - 1) * tanh(eps)`, where
    /// `bounded_noise` is the already squashed prediction.
    pub fn reconstruct_x0(&self, x_k: &[f64], k: usize, bounded_noise: &[f64]) -> Result<Vec<f64>> {
        self.check_step(k)?;
        check_len(x_k, bounded_noise)?;
        let ab = self.alpha_bar(k);
        let a = 1.0 / ab.sqrt();
        let b = (1.0 / ab - 1.0).sqrt();
        Ok(x_k.iter().zip(bounded_noise).map(|(x, e)| a * x - b * e).collect())
    }

    /// Reverse-process mean in noise form,
    /// `(x_k - beta_k / sqrt(1 - abar_k) * tanh(eps)) / sqrt(alpha_k)`.
    pub fn posterior_mean(&self, x_k: &[f64], k: usize, bounded_noise: &[f64]) -> Result<Vec<f64>> {
        self.check_step(k)?;
        check_len(x_k, bounded_noise)?;
        let inv = 1.0 / self.alpha(k).sqrt();
        let c = self.noise_coefficient(k);
        Ok(x_k.iter().zip(bounded_noise).map(|(x, e)| inv * x - c * e).collect())
    }

    /// Reverse-process mean as the posterior `q(x_{k-1} | x_k, x_0)` mean.
    pub fn posterior_mean_from_x0(&self, x_k: &[f64], k: usize, x0: &[f64]) -> Result<Vec<f64>> {
        self.check_step(k)?;
        check_len(x_k, x0)?;
        let ab = self.alpha_bar(k);
        let ab_prev = self.alpha_bar_prev(k);
        let c_xk = self.alpha(k).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let c_x0 = ab_prev.sqrt() * self.beta(k) / (1.0 - ab);
        Ok(x_k.iter().zip(x0).map(|(x, z)| c_xk * x + c_x0 * z).collect())
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(arg_err(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Sinusoidal embedding of a scalar position, `[sin(k f_i), cos(k f_i)]`.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let scale = if half > 1 {
        (10_000f64).ln() / (half - 1) as f64
    } else {
        0.0
    };
    let freqs: Vec<f64> = (0..half).map(|i| (-scale * i as f64).exp()).collect();
    freqs
        .iter()
        .map(|f| (position * f).sin())
        .chain(freqs.iter().map(|f| (position * f).cos()))
        .collect()
}

/// Layer widths of the diffusion noise predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionArch {
    pub time_embed_dim: usize,
    pub time_hidden: usize,
    pub time_out: usize,
    pub hidden: Vec<usize>,
}

impl Default for DiffusionArch {
    fn default() -> Self {
        Self {
            time_embed_dim: 16,
            time_hidden: 32,
            time_out: 16,
            hidden: vec![256, 256],
        }
    }
}

impl DiffusionArch {
    pub fn tiny(width: usize) -> Self {
        Self {
            time_embed_dim: width,
            time_hidden: width,
            time_out: width,
            hidden: vec![width, width],
        }
    }
}

/// Noise predictor `tanh(eps_theta(x_k, k, s))`.
///
/// Wiring: step index -> sinusoidal embedding -> dense+Mish -> dense, then the
/// trunk consumes `[x_k, state, time_features]` through Mish hidden layers and a
/// Tanh output of width `N + 1`. The Tanh head is the squashing of the noise
/// estimate, so the network output is used directly as `tanh(eps)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePredictor {
    pub n_users: usize,
    pub time_embed_dim: usize,
    pub time_mlp: Mlp,
    pub trunk: Mlp,
}

pub struct StepCache {
    time: MlpCache,
    trunk: MlpCache,
}

impl NoisePredictor {
    pub fn new<R: Rng + ?Sized>(n_users: usize, arch: &DiffusionArch, rng: &mut R) -> Self {
        let n_actions = n_users + 1;
        let time_mlp = Mlp::new(
            &[arch.time_embed_dim, arch.time_hidden, arch.time_out],
            &[Activation::Mish, Activation::Identity],
            rng,
        );
        let trunk = Mlp::with_hidden(
            n_actions + n_users + arch.time_out,
            &arch.hidden,
            n_actions,
            Activation::Tanh,
            rng,
        );
        Self {
            n_users,
            time_embed_dim: arch.time_embed_dim,
            time_mlp,
            trunk,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_users + 1
    }

    fn time_input(&self, k: usize) -> Array2<f64> {
        let emb = sinusoidal_embedding(k as f64, self.time_embed_dim);
        Array2::from_shape_vec((1, self.time_embed_dim), emb).expect("embedding shape")
    }

    fn trunk_input(&self, x_k: ArrayView2<f64>, states: ArrayView2<f64>, time: &Array2<f64>) -> Array2<f64> {
        let time_rows = time.broadcast((x_k.nrows(), time.ncols())).expect("broadcast time features");
        concatenate(Axis(1), &[x_k, states, time_rows]).expect("trunk input")
    }

    /// Bounded noise prediction for a batch at step `k`.
    pub fn predict(&self, x_k: ArrayView2<f64>, states: ArrayView2<f64>, k: usize) -> Array2<f64> {
        let time = self.time_mlp.forward(&self.time_input(k));
        self.trunk.forward(&self.trunk_input(x_k, states, &time))
    }

    pub fn predict_cached(&self, x_k: ArrayView2<f64>, states: ArrayView2<f64>, k: usize) -> (Array2<f64>, StepCache) {
        let time = self.time_mlp.forward_cached(&self.time_input(k));
        let trunk = self.trunk.forward_cached(&self.trunk_input(x_k, states, time.output()));
        (trunk.output().clone(), StepCache { time, trunk })
    }

    /// Accumulate parameter gradients and return `dL/dx_k`.
    pub fn backward(&self, cache: &StepCache, d_out: &Array2<f64>, grads: &mut NoisePredictor) -> Array2<f64> {
        let d_in = self.trunk.backward(&cache.trunk, d_out, &mut grads.trunk);
        let a = self.n_actions();
        let d_x = d_in.slice(s![.., ..a]).to_owned();
        let d_time = d_in.slice(s![.., a + self.n_users..]).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.time_mlp.backward(&cache.time, &d_time, &mut grads.time_mlp);
        d_x
    }
}

impl Parameters for NoisePredictor {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = prefixed("time_mlp", self.time_mlp.tensors());
        out.extend(prefixed("trunk", self.trunk.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.time_mlp.tensors_mut();
        out.extend(self.trunk.tensors_mut());
        out
    }
}

/// Gaussian draws consumed by one pass of the reverse chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainNoise {
    /// `x_K`.
    pub initial: Array2<f64>,
    /// Injection noise of step `k` at index `k - 1`.
    pub steps: Vec<Array2<f64>>,
}

impl ChainNoise {
    pub fn sample<R: Rng + ?Sized>(rows: usize, dim: usize, steps: usize, rng: &mut R) -> Self {
        let mut draw = || Array2::from_shape_simple_fn((rows, dim), || rng.sample::<f64, _>(StandardNormal));
        let initial = draw();
        let steps = (0..steps).map(|_| draw()).collect();
        Self { initial, steps }
    }
}

/// Noise predictor plus schedule: the full diffusion actor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionActor {
    pub net: NoisePredictor,
    pub schedule: DiffusionSchedule,
}

pub struct ChainCache {
    /// Step caches in execution order, `k = K, K-1, ..., 1`.
    steps: Vec<StepCache>,
}

impl DiffusionActor {
    pub fn new<R: Rng + ?Sized>(n_users: usize, arch: &DiffusionArch, schedule: DiffusionSchedule, rng: &mut R) -> Self {
        Self {
            net: NoisePredictor::new(n_users, arch, rng),
            schedule,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.net.n_actions()
    }

    fn predict_single(&self, x_k: &[f64], state: &[f64], k: usize) -> Result<Vec<f64>> {
        self.schedule.check_step(k)?;
        if x_k.len() != self.n_actions() {
            return Err(arg_err(format!("x_k has {} entries, expected {}", x_k.len(), self.n_actions())));
        }
        if state.len() != self.net.n_users {
            return Err(arg_err(format!("state has {} entries, expected {}", state.len(), self.net.n_users)));
        }
        let x = ArrayView2::from_shape((1, x_k.len()), x_k).unwrap();
        let s = ArrayView2::from_shape((1, state.len()), state).unwrap();
        Ok(self.net.predict(x, s, k).into_raw_vec_and_offset().0)
    }

    pub fn reconstruct_x0(&self, x_k: &[f64], k: usize, state: &[f64]) -> Result<Vec<f64>> {
        let eps = self.predict_single(x_k, state, k)?;
        self.schedule.reconstruct_x0(x_k, k, &eps)
    }

    pub fn posterior_mean(&self, x_k: &[f64], k: usize, state: &[f64]) -> Result<Vec<f64>> {
        let eps = self.predict_single(x_k, state, k)?;
        self.schedule.posterior_mean(x_k, k, &eps)
    }

    /// `x_{k-1} = mu_theta(x_k, k, s) + sqrt(beta_tilde_k) * noise`.
    pub fn denoise_step(&self, x_k: &[f64], k: usize, state: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.n_actions() {
            return Err(arg_err(format!(
                "noise has {} entries, expected {}",
                noise.len(),
                self.n_actions()
            )));
        }
        let mu = self.posterior_mean(x_k, k, state)?;
        let sd = self.schedule.beta_tilde(k).sqrt();
        Ok(mu.iter().zip(noise).map(|(m, z)| m + sd * z).collect())
    }

    fn chain_update(&self, x: &mut Array2<f64>, eps: &Array2<f64>, noise: &Array2<f64>, k: usize) {
        let inv = 1.0 / self.schedule.alpha(k).sqrt();
        let c = self.schedule.noise_coefficient(k);
        let sd = self.schedule.beta_tilde(k).sqrt();
        ndarray::Zip::from(x)
            .and(eps)
            .and(noise)
            .for_each(|x, &e, &z| *x = inv * *x - c * e + sd * z);
    }

    /// Run the reverse chain for a batch and return `x_0` (no caches kept).
    pub fn sample_x0(&self, states: ArrayView2<f64>, noise: &ChainNoise) -> Array2<f64> {
        let mut x = noise.initial.clone();
        for k in (1..=self.schedule.steps).rev() {
            let eps = self.net.predict(x.view(), states, k);
            self.chain_update(&mut x, &eps, &noise.steps[k - 1], k);
        }
        x
    }

    pub fn sample_x0_cached(&self, states: ArrayView2<f64>, noise: &ChainNoise) -> (Array2<f64>, ChainCache) {
        let mut x = noise.initial.clone();
        let mut steps = Vec::with_capacity(self.schedule.steps);
        for k in (1..=self.schedule.steps).rev() {
            let (eps, cache) = self.net.predict_cached(x.view(), states, k);
            self.chain_update(&mut x, &eps, &noise.steps[k - 1], k);
            steps.push(cache);
        }
        (x, ChainCache { steps })
    }

    /// Backpropagate `dL/dx_0` through every denoising step into `grads`.
    pub fn backward_x0(&self, cache: &ChainCache, d_x0: &Array2<f64>, grads: &mut NoisePredictor) {
        let mut d_x = d_x0.clone();
        for (k, step) in (1..=self.schedule.steps).zip(cache.steps.iter().rev()) {
            let inv = 1.0 / self.schedule.alpha(k).sqrt();
            let c = self.schedule.noise_coefficient(k);
            let d_eps = d_x.mapv(|g| -c * g);
            let d_input = self.net.backward(step, &d_eps, grads);
            d_x.mapv_inplace(|g| g * inv);
            d_x += &d_input;
        }
    }
}

impl Parameters for DiffusionActor {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.net.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.tensors_mut()
    }
}

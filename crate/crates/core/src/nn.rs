//! Minimal double-precision MLP machinery with explicit backpropagation.
//!
//! Gradients of a network are stored in a value of the same type, so the
//! optimizer, soft updates, checkpoints and finite-difference checks all walk
//! parameters through the [`Parameters`] visitor in one fixed order.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Mish,
    Tanh,
}

/// `tanh(softplus(x))` written as `n / (n + 2)` with `n = e^x (e^x + 2)`.
#[inline]
fn tanh_softplus(x: f64) -> (f64, f64) {
    if x > 20.0 {
        return (1.0, 1.0);
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    (n / (n + 2.0), e / (1.0 + e))
}

#[inline]
pub fn mish(x: f64) -> f64 {
    x * tanh_softplus(x).0
}

#[inline]
pub fn mish_grad(x: f64) -> f64 {
    let (t, sigmoid) = tanh_softplus(x);
    t + x * (1.0 - t * t) * sigmoid
}

impl Activation {
    fn apply(self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => pre.clone(),
            Activation::Mish => pre.mapv(mish),
            Activation::Tanh => pre.mapv(f64::tanh),
        }
    }

    /// Multiply `grad` in place by the activation derivative.
    fn backprop(self, pre: &Array2<f64>, out: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Mish => grad.zip_mut_with(pre, |g, &x| *g *= mish_grad(x)),
            Activation::Tanh => grad.zip_mut_with(out, |g, &y| *g *= 1.0 - y * y),
        }
    }
}

/// Fully connected layer, `y = x W + b` with `W` stored `(in, out)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialisation for weights and bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || rng.random_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(outputs, || rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        if x.nrows() <= 4 {
            return self.forward_rows(x);
        }
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    // Row-at-a-time axpy; avoids the packing cost of a blocked product on
    // tiny batches.
    fn forward_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((x.nrows(), self.outputs()));
        for (xr, mut yr) in x.rows().into_iter().zip(y.rows_mut()) {
            let out = yr.as_slice_mut().unwrap();
            out.copy_from_slice(self.bias.as_slice().unwrap());
            for (&xi, w) in xr.iter().zip(self.weight.rows()) {
                for (o, &wj) in out.iter_mut().zip(w.as_slice().unwrap()) {
                    *o += xi * wj;
                }
            }
        }
        y
    }
}

impl Parameters for Dense {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            TensorRef::new("weight", self.weight.shape(), self.weight.as_slice().unwrap()),
            TensorRef::new("bias", self.bias.shape(), self.bias.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_slice_mut().unwrap(), self.bias.as_slice_mut().unwrap()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activations: Vec<Activation>,
}

/// Per-layer inputs, pre-activations and outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("non-empty mlp")
    }
}

impl Mlp {
    /// `widths` lists every layer width including input and output;
    /// `activations` has one entry per layer.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an mlp needs at least one layer");
        assert_eq!(activations.len(), widths.len() - 1);
        let layers = widths.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Self {
            layers,
            activations: activations.to_vec(),
        }
    }

    /// Hidden layers with Mish and a final layer with `head`.
    pub fn with_hidden<R: Rng + ?Sized>(
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        head: Activation,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![inputs];
        widths.extend_from_slice(hidden);
        widths.push(outputs);
        let mut acts = vec![Activation::Mish; hidden.len()];
        acts.push(head);
        Self::new(&widths, &acts, rng)
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let mut pre = layer.forward(&h);
            match act {
                Activation::Identity => {}
                Activation::Mish => pre.mapv_inplace(mish),
                Activation::Tanh => pre.mapv_inplace(f64::tanh),
            }
            h = pre;
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> MlpCache {
        let n = self.layers.len();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
        };
        let mut h = x.to_owned();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let pre = layer.forward(&h);
            let out = act.apply(&pre);
            cache.inputs.push(h);
            cache.pre.push(pre);
            h = out.clone();
            cache.outputs.push(out);
        }
        cache
    }

    /// Accumulate parameter gradients into `grads` and return `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>, grads: &mut Mlp) -> Array2<f64> {
        let mut grad = d_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            self.activations[i].backprop(&cache.pre[i], &cache.outputs[i], &mut grad);
            let g = &mut grads.layers[i];
            general_mat_mul(1.0, &cache.inputs[i].t(), &grad, 1.0, &mut g.weight);
            g.bias += &grad.sum_axis(Axis(0));
            grad = grad.dot(&self.layers[i].weight.t());
        }
        grad
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("{i}"), l.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// Borrowed view of one named parameter array.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl<'a> TensorRef<'a> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: &'a [f64]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        }
    }
}

pub fn prefixed<'a>(prefix: &str, tensors: Vec<TensorRef<'a>>) -> Vec<TensorRef<'a>> {
    tensors
        .into_iter()
        .map(|mut t| {
            t.name = format!("{prefix}.{}", t.name);
            t
        })
        .collect()
}

/// Ordered access to every trainable array of a model. `tensors` and
/// `tensors_mut` must enumerate the same arrays in the same order.
pub trait Parameters {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

/// `target <- zeta * online + (1 - zeta) * target`.
pub fn soft_update<P: Parameters>(target: &mut P, online: &P, zeta: f64) {
    let src = online.tensors();
    for (dst, src) in target.tensors_mut().into_iter().zip(src) {
        for (d, s) in dst.iter_mut().zip(src.data) {
            *d = zeta * s + (1.0 - zeta) * *d;
        }
    }
}

/// Rescale gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / (norm + 1e-12));
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters>(params: &P, lr: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let grads = grads.tensors();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Backpropagate `dL/dprobs` through a row-wise softmax.
pub fn softmax_backward(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, dp), mut o) in probs.rows().into_iter().zip(d_probs.rows()).zip(out.rows_mut()) {
        let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
        for i in 0..p.len() {
            o[i] = p[i] * (dp[i] - dot);
        }
    }
    out
}

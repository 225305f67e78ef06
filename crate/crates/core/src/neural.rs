//! Small dense feed-forward networks with manual backprop, Adam and a
//! running input normaliser.
//!
//! Weights are row-major `out x in`. All arithmetic is `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    /// `z^2`; handy for building exact quadratic surrogates in tests.
    Square,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
            Activation::Square => z * z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn grad(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
            Activation::Square => 2.0 * z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Dense {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
            activation,
        }
    }

    /// Uniform `[-limit, limit]` initialisation of weights and biases.
    pub fn uniform(in_dim: usize, out_dim: usize, activation: Activation, limit: f64, rng: &mut impl Rng) -> Self {
        let mut layer = Dense::zeros(in_dim, out_dim, activation);
        for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
            *w = rng.random_range(-limit..=limit);
        }
        layer
    }

    fn forward_into(&self, x: &[f64], z: &mut Vec<f64>, a: &mut Vec<f64>) {
        z.clear();
        a.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.biases) {
            let pre = row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b;
            z.push(pre);
            a.push(self.activation.apply(pre));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Inputs, pre-activations and outputs of every layer from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    out: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.out.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parameter gradients with the same shapes as the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(|v| v.iter().all(|x| *x == 0.0))
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("network needs at least one layer".into()));
        }
        for l in &layers {
            if l.weights.len() != l.in_dim * l.out_dim || l.biases.len() != l.out_dim {
                return Err(Error::Parameter("layer parameter shapes do not match dims".into()));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Dimension {
                    what: "layer chain",
                    expected: pair[0].out_dim,
                    got: pair[1].in_dim,
                });
            }
        }
        Ok(Mlp { layers })
    }

    /// Fan-in uniform initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// with the last layer drawn from `U(-final_limit, final_limit)` when given.
    pub fn new(
        sizes: &[usize],
        activations: &[Activation],
        final_limit: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::Parameter(format!(
                "need one activation per layer: sizes {sizes:?}, activations {activations:?}"
            )));
        }
        let last = activations.len() - 1;
        let layers = sizes
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (dims, &act))| {
                let limit = match final_limit {
                    Some(f) if i == last => f,
                    _ => 1.0 / (dims[0] as f64).sqrt(),
                };
                Dense::uniform(dims[0], dims[1], act, limit, rng)
            })
            .collect();
        Mlp::from_layers(layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension {
                what: "flat parameter vector",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            for p in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *p = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|x| x.is_finite()))
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: self.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.in_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let (mut z, mut a) = (Vec::new(), Vec::new());
        for l in &self.layers {
            l.forward_into(&cur, &mut z, &mut a);
            std::mem::swap(&mut cur, &mut a);
        }
        Ok(cur)
    }

    /// Forward pass keeping what [`Mlp::backward`] needs.
    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            out: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.to_vec();
        for l in &self.layers {
            let (mut z, mut a) = (Vec::with_capacity(l.out_dim), Vec::with_capacity(l.out_dim));
            l.forward_into(&cur, &mut z, &mut a);
            cache.inputs.push(cur);
            cache.pre.push(z);
            cur = a.clone();
            cache.out.push(a);
        }
        Ok(cache)
    }

    /// Backpropagate `upstream = dL/d(output)` through a cached pass.
    ///
    /// Parameter gradients are accumulated into `grads`; the gradient with
    /// respect to the network input is returned.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64], grads: &mut Gradients) -> Result<Vec<f64>> {
        if cache.out.len() != self.layers.len() {
            return Err(Error::Contract(
                "backward called without a matching forward cache".into(),
            ));
        }
        if upstream.len() != self.out_dim() {
            return Err(Error::Dimension {
                what: "upstream gradient",
                expected: self.out_dim(),
                got: upstream.len(),
            });
        }
        let mut delta = upstream.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let (z, a, x) = (&cache.pre[i], &cache.out[i], &cache.inputs[i]);
            for ((d, &zi), &ai) in delta.iter_mut().zip(z).zip(a) {
                *d *= l.activation.grad(zi, ai);
            }
            let gw = &mut grads.weights[i];
            let gb = &mut grads.biases[i];
            let mut dx = vec![0.0; l.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
                let grow = &mut gw[o * l.in_dim..(o + 1) * l.in_dim];
                for ((g, &xi), (dxi, &w)) in grow.iter_mut().zip(x).zip(dx.iter_mut().zip(row)) {
                    *g += d * xi;
                    *dxi += d * w;
                }
            }
            delta = dx;
        }
        Ok(delta)
    }

    /// `self <- tau * live + (1 - tau) * self`, elementwise.
    pub fn soft_update_from(&mut self, live: &Mlp, tau: f64) -> Result<()> {
        if self.param_count() != live.param_count() || self.layers.len() != live.layers.len() {
            return Err(Error::Dimension {
                what: "soft update source",
                expected: self.param_count(),
                got: live.param_count(),
            });
        }
        for (t, l) in self.layers.iter_mut().zip(&live.layers) {
            for (tp, lp) in t
                .weights
                .iter_mut()
                .chain(t.biases.iter_mut())
                .zip(l.weights.iter().chain(l.biases.iter()))
            {
                *tp = tau * lp + (1.0 - tau) * *tp;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction; keeps first and second moments per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: net.zero_gradients(),
            v: net.zero_gradients(),
        }
    }

    /// One descent step along `grads`. Non-finite gradients are rejected
    /// before any state changes.
    pub fn update(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.weights.len() != net.layers.len() {
            return Err(Error::Dimension {
                what: "gradient layers",
                expected: net.layers.len(),
                got: grads.weights.len(),
            });
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient contains NaN or Inf; update rejected".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let pairs = [
                (
                    &mut layer.weights,
                    &grads.weights[i],
                    &mut self.m.weights[i],
                    &mut self.v.weights[i],
                ),
                (
                    &mut layer.biases,
                    &grads.biases[i],
                    &mut self.m.biases[i],
                    &mut self.v.biases[i],
                ),
            ];
            for (params, g, m, v) in pairs {
                for (((p, &g), m), v) in params.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        if !net.is_finite() {
            return Err(Error::NonFinite("parameters became non-finite after Adam step".into()));
        }
        Ok(())
    }
}

/// Running per-dimension mean and variance used to standardise inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    /// Population variance.
    pub var: Vec<f64>,
    pub count: u64,
}

pub const NORM_EPS: f64 = 1e-5;

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((x, m), v)| (x - m) / (v + NORM_EPS).sqrt())
            .collect()
    }

    /// Fold a batch into the statistics using the pairwise (Chan et al.)
    /// combination of means and sums of squared deviations.
    pub fn update_stats(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let d = self.dim();
        if let Some(bad) = batch.iter().find(|x| x.len() != d) {
            return Err(Error::Dimension {
                what: "normaliser sample",
                expected: d,
                got: bad.len(),
            });
        }
        let nb = batch.len() as f64;
        let na = self.count as f64;
        for k in 0..d {
            let mb = batch.iter().map(|x| x[k]).sum::<f64>() / nb;
            let m2b = batch.iter().map(|x| (x[k] - mb).powi(2)).sum::<f64>();
            if self.count == 0 {
                self.mean[k] = mb;
                self.var[k] = m2b / nb;
            } else {
                let delta = mb - self.mean[k];
                let n = na + nb;
                let m2a = self.var[k] * na;
                let m2 = m2a + m2b + delta * delta * na * nb / n;
                self.mean[k] += delta * nb / n;
                self.var[k] = (m2 / n).max(0.0);
            }
        }
        self.count += batch.len() as u64;
        Ok(())
    }
}

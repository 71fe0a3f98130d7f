//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! A [`DenseLayer`] is `a = activation(W x + b)` with `W` stored row-major as
//! `(out_dim, in_dim)`. Networks chain layers; hidden layers use Leaky ReLU and
//! the final layer is linear.
//!
//! Gradients are collected in a [`GradientTape`] whose groups follow
//! [`Parameterized::params`] order: for each layer, weights then biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => {
                if z >= 0.0 {
                    z
                } else {
                    s * z
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative at `z`; the kink of Leaky ReLU takes the right-hand slope.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => {
                if z >= 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `(out_dim, in_dim)`.
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig("layer dims must be > 0".into()));
        }
        check_dim("layer weights", in_dim * out_dim, weights.len())?;
        check_dim("layer biases", out_dim, biases.len())?;
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            biases,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        Self::from_parts(
            in_dim,
            out_dim,
            vec![0.0; in_dim * out_dim],
            vec![0.0; out_dim],
            activation,
        )
    }

    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn he_uniform<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::zeros(in_dim, out_dim, activation)?;
        let limit = (6.0 / in_dim as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-limit..limit);
        }
        Ok(layer)
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    /// `[weights, biases]`.
    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weights, &mut self.biases]
    }

    /// Writes `W x + b` into `z` and `activation(z)` into `a`.
    pub(crate) fn forward_into(&self, x: &[f64], z: &mut [f64], a: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (o, row) in self.weights.chunks_exact(self.in_dim).enumerate() {
            let acc = self.biases[o] + dot(row, x);
            z[o] = acc;
            a[o] = self.activation.apply(acc);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("layer input", self.in_dim, x.len())?;
        let mut z = vec![0.0; self.out_dim];
        let mut a = vec![0.0; self.out_dim];
        self.forward_into(x, &mut z, &mut a);
        Ok(a)
    }

    /// Accumulates parameter gradients into `gw`/`gb` and writes the input
    /// gradient into `dx`. `z` is the cached pre-activation for input `x`.
    pub(crate) fn backward_into(
        &self,
        x: &[f64],
        z: &[f64],
        upstream: &[f64],
        gw: &mut [f64],
        gb: &mut [f64],
        dx: &mut [f64],
    ) {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..self.out_dim {
            let dz = upstream[o] * self.activation.derivative(z[o]);
            if dz == 0.0 {
                continue;
            }
            gb[o] += dz;
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += dz * x[i];
                dx[i] += dz * row[i];
            }
        }
    }
}

impl DenseLayer {
    /// Batched [`Self::backward_into`]: row `r` has input `xs[r]`,
    /// pre-activation `zs[r]` and output gradient `upstream[r]`. Each weight
    /// row is updated across all samples before moving on, which keeps it in
    /// cache. Returns the input gradient per row.
    pub(crate) fn backward_batch(
        &self,
        xs: &[&[f64]],
        zs: &[&[f64]],
        upstream: &[Vec<f64>],
        gw: &mut [f64],
        gb: &mut [f64],
    ) -> Vec<Vec<f64>> {
        let dz: Vec<Vec<f64>> = upstream
            .iter()
            .zip(zs)
            .map(|(u, z)| u.iter().zip(z.iter()).map(|(u, z)| u * self.activation.derivative(*z)).collect())
            .collect();
        for (o, grow) in gw.chunks_exact_mut(self.in_dim).enumerate() {
            for (d, x) in dz.iter().zip(xs) {
                let d = d[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, xi) in grow.iter_mut().zip(x.iter()) {
                    *g += d * xi;
                }
            }
        }
        let mut dx = vec![vec![0.0; self.in_dim]; dz.len()];
        for (o, row) in self.weights.chunks_exact(self.in_dim).enumerate() {
            for (d, v) in dz.iter().zip(dx.iter_mut()) {
                let d = d[o];
                if d == 0.0 {
                    continue;
                }
                for (v, w) in v.iter_mut().zip(row) {
                    *v += d * w;
                }
            }
        }
        dx
    }
}

/// Dot product with four independent accumulators so the compiler can
/// vectorize; the summation order is fixed, so results stay deterministic.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ra) = a.as_chunks::<4>();
    let (cb, rb) = b.as_chunks::<4>();
    for (x, y) in ca.iter().zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cached activations of one forward pass: `inputs[k]` feeds layer `k`,
/// `pre[k]` is its pre-activation. `inputs` has one extra entry, the output.
#[derive(Debug, Clone)]
pub struct Trace {
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("trace always holds the input")
    }
}

pub(crate) fn stack_trace(layers: &[DenseLayer], x: &[f64]) -> Trace {
    let mut inputs = Vec::with_capacity(layers.len() + 1);
    let mut pre = Vec::with_capacity(layers.len());
    inputs.push(x.to_vec());
    for layer in layers {
        let mut z = vec![0.0; layer.out_dim];
        let mut a = vec![0.0; layer.out_dim];
        layer.forward_into(inputs.last().unwrap(), &mut z, &mut a);
        pre.push(z);
        inputs.push(a);
    }
    Trace { inputs, pre }
}

/// Backpropagates `upstream` (gradient w.r.t. the stack output) through
/// `layers`, accumulating into `groups` (two per layer, starting at index 0).
/// Returns the gradient w.r.t. the stack input.
pub(crate) fn stack_backward(
    layers: &[DenseLayer],
    trace: &Trace,
    upstream: &[f64],
    groups: &mut [Vec<f64>],
) -> Vec<f64> {
    let mut grad = upstream.to_vec();
    for (k, layer) in layers.iter().enumerate().rev() {
        let mut dx = vec![0.0; layer.in_dim];
        let (gw, rest) = groups[2 * k..].split_at_mut(1);
        layer.backward_into(
            &trace.inputs[k],
            &trace.pre[k],
            &grad,
            &mut gw[0],
            &mut rest[0],
            &mut dx,
        );
        grad = dx;
    }
    grad
}

/// Batched [`stack_backward`]: layer `k` of `layers` reads
/// `traces[r].inputs[k]` and `traces[r].pre[k]`, so the traces may extend
/// past the stack. Returns the input gradient per row.
pub(crate) fn stack_backward_batch(
    layers: &[DenseLayer],
    traces: &[&Trace],
    upstream: Vec<Vec<f64>>,
    groups: &mut [Vec<f64>],
) -> Vec<Vec<f64>> {
    let mut grad = upstream;
    for (k, layer) in layers.iter().enumerate().rev() {
        let xs: Vec<&[f64]> = traces.iter().map(|t| t.inputs[k].as_slice()).collect();
        let zs: Vec<&[f64]> = traces.iter().map(|t| t.pre[k].as_slice()).collect();
        let (gw, rest) = groups[2 * k..].split_at_mut(1);
        grad = layer.backward_batch(&xs, &zs, &grad, &mut gw[0], &mut rest[0]);
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork {
    layers: Vec<DenseLayer>,
}

impl DenseNetwork {
    /// Builds a network with layer widths `sizes` (input first). Hidden layers
    /// use Leaky ReLU with `slope`; the output layer is linear. All layers are
    /// He-uniform initialized.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], slope: f64, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidConfig(
                "a network needs at least input and output sizes".into(),
            ));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n {
                    Activation::Identity
                } else {
                    Activation::LeakyRelu(slope)
                };
                DenseLayer::he_uniform(sizes[k], sizes[k + 1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network has no layers".into()));
        }
        for pair in layers.windows(2) {
            check_dim("layer chain", pair[0].out_dim, pair[1].in_dim)?;
        }
        let last = layers.len() - 1;
        for (k, layer) in layers.iter().enumerate() {
            let ok = match layer.activation {
                Activation::Identity => k == last,
                Activation::LeakyRelu(_) => k != last,
            };
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "layer {k}: hidden layers must be Leaky ReLU and the output layer linear"
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<DenseLayer> {
        self.layers
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.input_dim(), x.len())?;
        Ok(stack_trace(&self.layers, x).inputs.pop().unwrap())
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        check_dim("network input", self.input_dim(), x.len())?;
        Ok(stack_trace(&self.layers, x))
    }

    /// Exact partials of `upstream · forward(x)` w.r.t. every parameter and `x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(GradientTape, Vec<f64>)> {
        check_dim("network upstream", self.output_dim(), upstream.len())?;
        let trace = self.forward_trace(x)?;
        let mut tape = self.zero_tape();
        let dx = stack_backward(&self.layers, &trace, upstream, &mut tape.groups);
        Ok((tape, dx))
    }
}

/// Anything exposing its trainable parameters as an ordered list of slices.
pub trait Parameterized {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_tape(&self) -> GradientTape {
        GradientTape {
            groups: self.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

impl Parameterized for DenseNetwork {
    fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

/// Per-parameter partials, grouped like [`Parameterized::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub groups: Vec<Vec<f64>>,
}

impl GradientTape {
    pub fn is_congruent<P: Parameterized + ?Sized>(&self, params: &P) -> bool {
        let p = params.params();
        p.len() == self.groups.len() && p.iter().zip(&self.groups).all(|(a, b)| a.len() == b.len())
    }

    pub fn add_assign(&mut self, other: &GradientTape) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.groups.iter_mut().flatten().for_each(|g| *g *= c);
    }

    pub fn is_zero(&self) -> bool {
        self.groups.iter().flatten().all(|g| *g == 0.0)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.groups.iter().flatten().copied().collect()
    }
}

/// Mean over samples and output dimensions of the squared error.
pub fn mse_loss(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Empty("mse batch"));
    }
    check_dim("mse batch", pred.len(), target.len())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(target) {
        check_dim("mse sample", p.len(), t.len())?;
        for (a, b) in p.iter().zip(t) {
            sum += (a - b) * (a - b);
        }
        count += p.len();
    }
    if count == 0 {
        return Err(Error::Empty("mse outputs"));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameterized + ?Sized>(params: &P, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients before
    /// touching any state.
    pub fn step<P: Parameterized + ?Sized>(&mut self, params: &mut P, tape: &GradientTape) -> Result<()> {
        let mut ps = params.params_mut();
        check_dim("adam groups", self.m.len(), ps.len())?;
        check_dim("adam tape groups", self.m.len(), tape.groups.len())?;
        for (gi, (p, g)) in ps.iter().zip(&tape.groups).enumerate() {
            check_dim("adam group", self.m[gi].len(), p.len())?;
            check_dim("adam tape group", p.len(), g.len())?;
            if let Some(index) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { group: gi, index });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (gi, p) in ps.iter_mut().enumerate() {
            let g = &tape.groups[gi];
            let m = &mut self.m[gi];
            let v = &mut self.v[gi];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

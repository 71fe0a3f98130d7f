//! Serial hybrid model: inputs -> transfer network -> transfer parameters ->
//! physics -> outputs, with gradients chained through the physics Jacobian.
//!
//! The transfer network either emits the transfer parameters directly or a
//! correction added to the raw inputs (`t = x + std_x * net(x_norm)`), in
//! which case an all-zero network reproduces the bare physics model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{PriorScale, VariationalLayer, WeightSample};
use crate::data::NormStats;
use crate::error::{check_dim, Error, Result};
use crate::nn::{stack_backward_batch, stack_trace, DenseLayer, DenseNetwork, GradientTape, Parameterized, Trace};
use crate::physics::{Physics, PhysicsModel};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// `t = net(x_norm)`.
    Direct,
    /// `t = x + std_x * net(x_norm)`.
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransferNet {
    Deterministic(DenseNetwork),
    /// Deterministic hidden layers with a mean-field Gaussian output layer.
    Bayesian {
        trunk: Vec<DenseLayer>,
        head: VariationalLayer,
    },
}

impl TransferNet {
    pub fn input_dim(&self) -> usize {
        match self {
            TransferNet::Deterministic(n) => n.input_dim(),
            TransferNet::Bayesian { trunk, head } => trunk.first().map_or(head.in_dim(), |l| l.in_dim()),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            TransferNet::Deterministic(n) => n.output_dim(),
            TransferNet::Bayesian { head, .. } => head.out_dim(),
        }
    }

    pub fn is_bayesian(&self) -> bool {
        matches!(self, TransferNet::Bayesian { .. })
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let layers: Vec<(usize, usize)> = match self {
            TransferNet::Deterministic(n) => n.layers().iter().map(|l| (l.in_dim(), l.out_dim())).collect(),
            TransferNet::Bayesian { trunk, head } => trunk
                .iter()
                .map(|l| (l.in_dim(), l.out_dim()))
                .chain([(head.in_dim(), head.out_dim())])
                .collect(),
        };
        let mut sizes = vec![layers[0].0];
        sizes.extend(layers.iter().map(|l| l.1));
        sizes
    }

    pub fn head(&self) -> Option<&VariationalLayer> {
        match self {
            TransferNet::Bayesian { head, .. } => Some(head),
            TransferNet::Deterministic(_) => None,
        }
    }

    pub fn head_mut(&mut self) -> Option<&mut VariationalLayer> {
        match self {
            TransferNet::Bayesian { head, .. } => Some(head),
            TransferNet::Deterministic(_) => None,
        }
    }

    /// Number of parameter groups belonging to the deterministic hidden layers.
    pub fn trunk_groups(&self) -> usize {
        match self {
            TransferNet::Deterministic(n) => 2 * (n.layers().len() - 1),
            TransferNet::Bayesian { trunk, .. } => 2 * trunk.len(),
        }
    }
}

impl Parameterized for TransferNet {
    fn params(&self) -> Vec<&[f64]> {
        match self {
            TransferNet::Deterministic(n) => n.params(),
            TransferNet::Bayesian { trunk, head } => trunk
                .iter()
                .flat_map(|l| [l.weights(), l.biases()])
                .chain(head.params())
                .collect(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            TransferNet::Deterministic(n) => n.params_mut(),
            TransferNet::Bayesian { trunk, head } => {
                let mut out: Vec<&mut [f64]> = trunk.iter_mut().flat_map(|l| l.params_mut()).collect();
                out.extend(head.params_mut());
                out
            }
        }
    }
}

/// One end-to-end evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y: Vec<f64>,
    pub t: Vec<f64>,
}

/// A forward pass with its cached activations.
#[derive(Debug, Clone)]
pub struct TracedPass {
    pub trace: Trace,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

/// One Monte Carlo draw; `y` is `None` when the sampled transfer left the
/// physics domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPrediction {
    pub index: usize,
    pub t: Vec<f64>,
    pub y: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PimlModel<P = Physics> {
    pub net: TransferNet,
    pub physics: P,
    pub mode: TransferMode,
    pub input_stats: NormStats,
    pub output_stats: NormStats,
}

impl<P: PhysicsModel> PimlModel<P> {
    pub fn new(
        net: DenseNetwork,
        physics: P,
        mode: TransferMode,
        input_stats: NormStats,
        output_stats: NormStats,
    ) -> Result<Self> {
        let model = Self {
            net: TransferNet::Deterministic(net),
            physics,
            mode,
            input_stats,
            output_stats,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.input_stats.validate()?;
        self.output_stats.validate()?;
        check_dim("transfer net input", self.input_stats.dim(), self.net.input_dim())?;
        check_dim("transfer parameters", self.physics.input_dim(), self.net.output_dim())?;
        check_dim("model outputs", self.physics.output_dim(), self.output_stats.dim())?;
        if self.mode == TransferMode::Residual {
            check_dim("residual transfer", self.input_dim(), self.physics.input_dim())?;
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_stats.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.physics.output_dim()
    }

    pub fn transfer_dim(&self) -> usize {
        self.physics.input_dim()
    }

    pub fn is_bayesian(&self) -> bool {
        self.net.is_bayesian()
    }

    fn trunk_trace(&self, x: &[f64]) -> Result<Trace> {
        check_dim("model input", self.input_dim(), x.len())?;
        let xn = self.input_stats.normalize(x);
        Ok(match &self.net {
            TransferNet::Deterministic(n) => stack_trace(n.layers(), &xn),
            TransferNet::Bayesian { trunk, .. } => stack_trace(trunk, &xn),
        })
    }

    fn transfer_from_output(&self, x: &[f64], out: &[f64]) -> Vec<f64> {
        match self.mode {
            TransferMode::Direct => out.to_vec(),
            TransferMode::Residual => x
                .iter()
                .zip(out)
                .zip(&self.input_stats.std)
                .map(|((xi, o), s)| xi + s * o)
                .collect(),
        }
    }

    /// Network output for the given head layer, appended to `trace`.
    fn extend_with_head(trace: &mut Trace, head: &DenseLayer) {
        let mut z = vec![0.0; head.out_dim()];
        let mut a = vec![0.0; head.out_dim()];
        head.forward_into(trace.output(), &mut z, &mut a);
        trace.pre.push(z);
        trace.inputs.push(a);
    }

    /// Transfer parameters with the deterministic weights, or the posterior
    /// means for a Bayesian head.
    pub fn transfer(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.trunk_trace(x)?;
        if let TransferNet::Bayesian { head, .. } = &self.net {
            Self::extend_with_head(&mut trace, &head.mean_layer());
        }
        Ok(self.transfer_from_output(x, trace.output()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Prediction> {
        let t = self.transfer(x)?;
        let y = self.physics.evaluate(&t)?;
        Ok(Prediction { y, t })
    }

    /// Forward pass with the output layer weights taken from `sample`.
    pub fn forward_sampled(&self, x: &[f64], sample: &WeightSample) -> Result<Prediction> {
        let head = self.net.head().ok_or(Error::NotBayesian)?;
        let mut trace = self.trunk_trace(x)?;
        Self::extend_with_head(&mut trace, &head.sample_layer(sample));
        let t = self.transfer_from_output(x, trace.output());
        let y = self.physics.evaluate(&t)?;
        Ok(Prediction { y, t })
    }

    /// Gradient of `upstream · y(x)` w.r.t. every model parameter. For a
    /// Bayesian head the pass runs through `sample` and the head gradients
    /// are mapped onto `(mu, rho)` pathwise.
    pub fn backward(&self, x: &[f64], upstream: &[f64], sample: Option<&WeightSample>) -> Result<GradientTape> {
        let mut tape = self.net.zero_tape();
        self.backward_accumulate(x, upstream, sample, &mut tape)?;
        Ok(tape)
    }

    /// As [`Self::backward`], adding into an existing tape.
    pub fn backward_accumulate(
        &self,
        x: &[f64],
        upstream: &[f64],
        sample: Option<&WeightSample>,
        tape: &mut GradientTape,
    ) -> Result<()> {
        let pass = self.forward_traced(x, sample)?;
        self.backward_traced(&[pass], &[upstream.to_vec()], sample, tape)
    }

    /// Forward pass that keeps the activations for [`Self::backward_traced`].
    /// A Bayesian model needs `sample`; a deterministic one ignores it.
    pub fn forward_traced(&self, x: &[f64], sample: Option<&WeightSample>) -> Result<TracedPass> {
        let mut trace = self.trunk_trace(x)?;
        if let TransferNet::Bayesian { head, .. } = &self.net {
            let sample = sample.ok_or_else(|| Error::InvalidConfig("Bayesian pass needs a weight sample".into()))?;
            Self::extend_with_head(&mut trace, &head.sample_layer(sample));
        }
        let t = self.transfer_from_output(x, trace.output());
        let y = self.physics.evaluate(&t)?;
        Ok(TracedPass { trace, t, y })
    }

    /// Accumulates the gradient of `sum_r upstream[r] · y_r` for a batch of
    /// traced passes, all made with the same `sample`.
    pub fn backward_traced(
        &self,
        passes: &[TracedPass],
        upstream: &[Vec<f64>],
        sample: Option<&WeightSample>,
        tape: &mut GradientTape,
    ) -> Result<()> {
        check_dim("batch upstream", passes.len(), upstream.len())?;
        if !tape.is_congruent(&self.net) {
            return Err(Error::Invariant("gradient tape does not match the model".into()));
        }
        let mut douts = Vec::with_capacity(passes.len());
        for (p, u) in passes.iter().zip(upstream) {
            check_dim("model upstream", self.output_dim(), u.len())?;
            douts.push(self.transfer_grad(&p.t, u)?);
        }
        let traces: Vec<&Trace> = passes.iter().map(|p| &p.trace).collect();
        match &self.net {
            TransferNet::Deterministic(net) => {
                stack_backward_batch(net.layers(), &traces, douts, &mut tape.groups);
            }
            TransferNet::Bayesian { trunk, head } => {
                let sample = sample.ok_or_else(|| {
                    Error::InvalidConfig("Bayesian backward needs a weight sample".into())
                })?;
                let head_layer = head.sample_layer(sample);
                let k = trunk.len();
                let xs: Vec<&[f64]> = traces.iter().map(|t| t.inputs[k].as_slice()).collect();
                let zs: Vec<&[f64]> = traces.iter().map(|t| t.pre[k].as_slice()).collect();
                let mut gw = vec![0.0; head_layer.weights().len()];
                let mut gb = vec![0.0; head_layer.out_dim()];
                let dh = head_layer.backward_batch(&xs, &zs, &douts, &mut gw, &mut gb);
                let head_groups = head.pathwise_gradient(sample, &gw, &gb)?;
                for (dst, src) in tape.groups[2 * k..].iter_mut().zip(head_groups) {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
                stack_backward_batch(trunk, &traces, dh, &mut tape.groups[..2 * k]);
            }
        }
        Ok(())
    }

    /// Maps `dL/dy` to `dL/d(network output)` through the physics Jacobian at
    /// `t` and the transfer mode.
    fn transfer_grad(&self, t: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let jac = self.physics.jacobian(t)?;
        let dt = jac.tr_mul_vec(upstream);
        Ok(match self.mode {
            TransferMode::Direct => dt,
            TransferMode::Residual => dt.iter().zip(&self.input_stats.std).map(|(g, s)| g * s).collect(),
        })
    }

    /// `n_samples` end-to-end evaluations with independently drawn output
    /// layer weights. Sample `i` uses seed `derive_seed(seed, "weights", i)`.
    pub fn predict_with_sampling(&self, x: &[f64], n_samples: usize, seed: u64) -> Result<Vec<SampledPrediction>> {
        if n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be >= 1".into()));
        }
        let head = self.net.head().ok_or(Error::NotBayesian)?;
        let trace = self.trunk_trace(x)?;
        let h = trace.output();
        let out = (0..n_samples)
            .into_par_iter()
            .map(|i| {
                let sample = head.sample_weights(sample_seed(seed, i));
                let layer = head.sample_layer(&sample);
                let mut z = vec![0.0; layer.out_dim()];
                let mut a = vec![0.0; layer.out_dim()];
                layer.forward_into(h, &mut z, &mut a);
                let t = self.transfer_from_output(x, &a);
                let y = self.physics.evaluate(&t).ok();
                SampledPrediction { index: i, t, y }
            })
            .collect();
        Ok(out)
    }

    /// Replaces the deterministic output layer with a variational one whose
    /// prior and posterior means are the trained weights.
    pub fn promote_to_bayesian(&self, scale: PriorScale, posterior_ratio: f64) -> Result<Self>
    where
        P: Clone,
    {
        let TransferNet::Deterministic(net) = &self.net else {
            return Err(Error::AlreadyBayesian);
        };
        let mut layers = net.layers().to_vec();
        let last = layers.pop().expect("networks have at least one layer");
        let head = VariationalLayer::from_deterministic(&last, scale, posterior_ratio)?;
        Ok(Self {
            net: TransferNet::Bayesian { trunk: layers, head },
            physics: self.physics.clone(),
            mode: self.mode,
            input_stats: self.input_stats.clone(),
            output_stats: self.output_stats.clone(),
        })
    }
}

impl<P> PimlModel<P> {
    pub fn head_mut(&mut self) -> Option<&mut VariationalLayer> {
        self.net.head_mut()
    }
}

pub fn sample_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "weights", index as u64)
}

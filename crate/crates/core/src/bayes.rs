//! Mean-field Gaussian output layer.
//!
//! Every weight and bias carries an independent posterior `N(mu, sigma^2)` with
//! `sigma = softplus(rho)`, and an independent Gaussian prior. Samples are drawn
//! with the reparameterization `w = mu + sigma * eps`, so gradients flow to
//! `mu` and `rho` along the sampled path.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{Activation, DenseLayer, Parameterized};
use crate::rng::rng_from_seed;

pub const PRIOR_SIGMA_FLOOR: f64 = 1e-4;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]; `0` maps to `-inf`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))` for scalars.
#[inline]
pub fn gaussian_kl(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    // Written in the variance ratio so identical distributions give exactly 0.
    let r = sigma_q / sigma_p;
    let d = (mu_q - mu_p) / sigma_p;
    0.5 * (r * r - 1.0 + d * d) - r.ln()
}

/// Log density of `N(target; pred, noise^2)` summed over components.
pub fn gaussian_log_likelihood(pred: &[f64], target: &[f64], noise: f64) -> f64 {
    let norm = -0.5 * (2.0 * std::f64::consts::PI * noise * noise).ln();
    pred.iter()
        .zip(target)
        .map(|(p, t)| norm - (p - t) * (p - t) / (2.0 * noise * noise))
        .sum()
}

/// Negative ELBO for one mini-batch: `-log_likelihood + kl / n_batches`.
pub fn elbo_loss(likelihood_log_prob: f64, kl: f64, n_batches: usize) -> Result<f64> {
    if kl < 0.0 {
        return Err(Error::Invariant(format!("negative KL {kl}")));
    }
    if n_batches == 0 {
        return Err(Error::InvalidConfig("n_batches must be >= 1".into()));
    }
    Ok(-likelihood_log_prob + kl / n_batches as f64)
}

/// How the prior spread is derived from a deterministic layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorScale {
    /// One population std over all weights and biases of the layer.
    #[default]
    LayerWide,
    /// One population std per output unit (its incoming weights and bias).
    PerOutputRow,
}

/// Prior from trained deterministic final-layer parameters. Returns
/// `(prior_mu, prior_sigma)` over the concatenation `weights ++ biases`.
pub fn init_prior_from_deterministic(values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() < 2 {
        return Err(Error::InsufficientSamples {
            requested: 2,
            available: values.len(),
        });
    }
    let sigma = population_std(values).max(PRIOR_SIGMA_FLOOR);
    Ok((values.to_vec(), vec![sigma; values.len()]))
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLayer {
    in_dim: usize,
    out_dim: usize,
    pub mu_w: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub rho_w: Vec<f64>,
    pub rho_b: Vec<f64>,
    pub prior_mu_w: Vec<f64>,
    pub prior_mu_b: Vec<f64>,
    pub prior_sigma_w: Vec<f64>,
    pub prior_sigma_b: Vec<f64>,
}

/// One draw of the layer's weights together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSample {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub eps_w: Vec<f64>,
    pub eps_b: Vec<f64>,
    pub seed: u64,
}

impl VariationalLayer {
    /// Promotes a trained linear layer: prior and posterior means both copy
    /// the deterministic parameters; posterior sigma starts at
    /// `posterior_ratio * prior_sigma`.
    pub fn from_deterministic(layer: &DenseLayer, scale: PriorScale, posterior_ratio: f64) -> Result<Self> {
        if layer.activation() != Activation::Identity {
            return Err(Error::InvalidConfig("variational layer must be linear".into()));
        }
        let (in_dim, out_dim) = (layer.in_dim(), layer.out_dim());
        let mut all = layer.weights().to_vec();
        all.extend_from_slice(layer.biases());
        let (_, shared) = init_prior_from_deterministic(&all)?;
        let (prior_sigma_w, prior_sigma_b) = match scale {
            PriorScale::LayerWide => (shared[..in_dim * out_dim].to_vec(), vec![shared[0]; out_dim]),
            PriorScale::PerOutputRow => {
                let mut sw = Vec::with_capacity(in_dim * out_dim);
                let mut sb = Vec::with_capacity(out_dim);
                for o in 0..out_dim {
                    let mut row = layer.weights()[o * in_dim..(o + 1) * in_dim].to_vec();
                    row.push(layer.biases()[o]);
                    let s = population_std(&row).max(PRIOR_SIGMA_FLOOR);
                    sw.extend(std::iter::repeat_n(s, in_dim));
                    sb.push(s);
                }
                (sw, sb)
            }
        };
        let rho_w = prior_sigma_w.iter().map(|s| softplus_inv(posterior_ratio * s)).collect();
        let rho_b = prior_sigma_b.iter().map(|s| softplus_inv(posterior_ratio * s)).collect();
        Ok(Self {
            in_dim,
            out_dim,
            mu_w: layer.weights().to_vec(),
            mu_b: layer.biases().to_vec(),
            rho_w,
            rho_b,
            prior_mu_w: layer.weights().to_vec(),
            prior_mu_b: layer.biases().to_vec(),
            prior_sigma_w,
            prior_sigma_b,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        mu_w: Vec<f64>,
        mu_b: Vec<f64>,
        rho_w: Vec<f64>,
        rho_b: Vec<f64>,
        prior_mu_w: Vec<f64>,
        prior_mu_b: Vec<f64>,
        prior_sigma_w: Vec<f64>,
        prior_sigma_b: Vec<f64>,
    ) -> Result<Self> {
        let nw = in_dim * out_dim;
        for (name, len, want) in [
            ("mu_w", mu_w.len(), nw),
            ("rho_w", rho_w.len(), nw),
            ("prior_mu_w", prior_mu_w.len(), nw),
            ("prior_sigma_w", prior_sigma_w.len(), nw),
            ("mu_b", mu_b.len(), out_dim),
            ("rho_b", rho_b.len(), out_dim),
            ("prior_mu_b", prior_mu_b.len(), out_dim),
            ("prior_sigma_b", prior_sigma_b.len(), out_dim),
        ] {
            if len != want {
                return Err(Error::Format(format!("{name}: expected {want} values, got {len}")));
            }
        }
        let layer = Self {
            in_dim,
            out_dim,
            mu_w,
            mu_b,
            rho_w,
            rho_b,
            prior_mu_w,
            prior_mu_b,
            prior_sigma_w,
            prior_sigma_b,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prior_sigma_w.iter().chain(&self.prior_sigma_b).any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Invariant("prior sigma must be strictly positive".into()));
        }
        if self.rho_w.iter().chain(&self.rho_b).any(|r| r.is_nan() || *r == f64::INFINITY) {
            return Err(Error::Invariant("rho must not be NaN or +inf".into()));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn sigma_w(&self) -> Vec<f64> {
        self.rho_w.iter().map(|r| softplus(*r)).collect()
    }

    pub fn sigma_b(&self) -> Vec<f64> {
        self.rho_b.iter().map(|r| softplus(*r)).collect()
    }

    pub fn mean_sigma(&self) -> f64 {
        let n = (self.rho_w.len() + self.rho_b.len()) as f64;
        self.rho_w.iter().chain(&self.rho_b).map(|r| softplus(*r)).sum::<f64>() / n
    }

    /// Multiplies every posterior sigma by `c >= 0`; `c = 0` collapses the
    /// posterior onto its mean.
    pub fn scale_sigma(&mut self, c: f64) {
        for r in self.rho_w.iter_mut().chain(self.rho_b.iter_mut()) {
            *r = softplus_inv(c * softplus(*r));
        }
    }

    /// The posterior-mean layer.
    pub fn mean_layer(&self) -> DenseLayer {
        DenseLayer::from_parts(
            self.in_dim,
            self.out_dim,
            self.mu_w.clone(),
            self.mu_b.clone(),
            Activation::Identity,
        )
        .expect("shapes validated at construction")
    }

    pub fn sample_weights(&self, seed: u64) -> WeightSample {
        let mut rng = rng_from_seed(seed);
        self.sample_with(&mut rng, seed)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, seed: u64) -> WeightSample {
        let eps_w: Vec<f64> = (0..self.mu_w.len()).map(|_| rng.sample(StandardNormal)).collect();
        let eps_b: Vec<f64> = (0..self.mu_b.len()).map(|_| rng.sample(StandardNormal)).collect();
        let weights = reparameterize(&self.mu_w, &self.rho_w, &eps_w);
        let biases = reparameterize(&self.mu_b, &self.rho_b, &eps_b);
        WeightSample {
            weights,
            biases,
            eps_w,
            eps_b,
            seed,
        }
    }

    /// The draw that the noise of `sample` gives under the current `mu`, `rho`.
    pub fn resample(&self, sample: &WeightSample) -> Result<WeightSample> {
        check_dim("resample weights", self.mu_w.len(), sample.eps_w.len())?;
        check_dim("resample biases", self.mu_b.len(), sample.eps_b.len())?;
        Ok(WeightSample {
            weights: reparameterize(&self.mu_w, &self.rho_w, &sample.eps_w),
            biases: reparameterize(&self.mu_b, &self.rho_b, &sample.eps_b),
            eps_w: sample.eps_w.clone(),
            eps_b: sample.eps_b.clone(),
            seed: sample.seed,
        })
    }

    pub fn sample_layer(&self, sample: &WeightSample) -> DenseLayer {
        DenseLayer::from_parts(
            self.in_dim,
            self.out_dim,
            sample.weights.clone(),
            sample.biases.clone(),
            Activation::Identity,
        )
        .expect("sample shapes follow the layer")
    }

    /// Closed-form KL divergence between posterior and prior, summed over
    /// every weight and bias.
    pub fn kl_to_prior(&self) -> Result<f64> {
        let mut kl = 0.0;
        for (mu, rho, pm, ps) in self.iter_params() {
            let s = softplus(rho);
            if !(s > 0.0) {
                return Err(Error::Invariant(format!("non-positive posterior sigma {s}")));
            }
            kl += gaussian_kl(mu, s, pm, ps);
        }
        Ok(kl.max(0.0))
    }

    /// Gradient of [`Self::kl_to_prior`] as a tape over `(mu_w, mu_b, rho_w, rho_b)`.
    pub fn kl_gradient(&self) -> Vec<Vec<f64>> {
        let grad = |mu: &[f64], rho: &[f64], pm: &[f64], ps: &[f64]| {
            let mut gm = Vec::with_capacity(mu.len());
            let mut gr = Vec::with_capacity(mu.len());
            for i in 0..mu.len() {
                let s = softplus(rho[i]);
                let p2 = ps[i] * ps[i];
                gm.push((mu[i] - pm[i]) / p2);
                gr.push((-1.0 / s + s / p2) * sigmoid(rho[i]));
            }
            (gm, gr)
        };
        let (gmw, grw) = grad(&self.mu_w, &self.rho_w, &self.prior_mu_w, &self.prior_sigma_w);
        let (gmb, grb) = grad(&self.mu_b, &self.rho_b, &self.prior_mu_b, &self.prior_sigma_b);
        vec![gmw, gmb, grw, grb]
    }

    /// Maps gradients w.r.t. sampled weights/biases onto `(mu_w, mu_b, rho_w, rho_b)`.
    pub fn pathwise_gradient(&self, sample: &WeightSample, gw: &[f64], gb: &[f64]) -> Result<Vec<Vec<f64>>> {
        check_dim("pathwise weights", self.mu_w.len(), gw.len())?;
        check_dim("pathwise biases", self.mu_b.len(), gb.len())?;
        let rho_grad = |g: &[f64], eps: &[f64], rho: &[f64]| -> Vec<f64> {
            g.iter()
                .zip(eps)
                .zip(rho)
                .map(|((g, e), r)| g * e * sigmoid(*r))
                .collect()
        };
        Ok(vec![
            gw.to_vec(),
            gb.to_vec(),
            rho_grad(gw, &sample.eps_w, &self.rho_w),
            rho_grad(gb, &sample.eps_b, &self.rho_b),
        ])
    }

    fn iter_params(&self) -> impl Iterator<Item = (f64, f64, f64, f64)> + '_ {
        let w = (0..self.mu_w.len()).map(|i| (self.mu_w[i], self.rho_w[i], self.prior_mu_w[i], self.prior_sigma_w[i]));
        let b = (0..self.mu_b.len()).map(|i| (self.mu_b[i], self.rho_b[i], self.prior_mu_b[i], self.prior_sigma_b[i]));
        w.chain(b)
    }
}

#[inline]
fn reparameterize(mu: &[f64], rho: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(rho)
        .zip(eps)
        .map(|((m, r), e)| m + softplus(*r) * e)
        .collect()
}

impl Parameterized for VariationalLayer {
    fn params(&self) -> Vec<&[f64]> {
        vec![&self.mu_w, &self.mu_b, &self.rho_w, &self.rho_b]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.mu_w, &mut self.mu_b, &mut self.rho_w, &mut self.rho_b]
    }
}

//! Shared helpers for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use piml_core::bayes::{gaussian_kl, softplus, WeightSample};
use piml_core::data::Dataset;
use piml_core::harness::{build_model, generate_data, ExperimentSpec, Variant};
use piml_core::physics::{Physics, PhysicsModel};
use piml_core::rng::rng_from_seed;
use piml_core::train::loss_and_gradient;
use piml_core::{Parameterized, PimlModel};
use rand::Rng;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn load_spec(name: &str) -> ExperimentSpec {
    ExperimentSpec::from_path(&config_path(name)).expect("shipped config parses")
}

/// Central difference with a five-point stencil.
pub fn fd5(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub struct Objective<'a> {
    pub xs: Vec<&'a [f64]>,
    pub ys: Vec<&'a [f64]>,
    pub lambda: f64,
    pub noise: f64,
    pub n_batches: usize,
    /// Noise draw for a Bayesian head; reapplied after every perturbation.
    pub sample: Option<WeightSample>,
}

impl Objective<'_> {
    fn current_sample<P: PhysicsModel>(&self, model: &PimlModel<P>) -> Option<WeightSample> {
        let s = self.sample.as_ref()?;
        Some(model.net.head().expect("Bayesian model").resample(s).unwrap())
    }

    pub fn gradient<P: PhysicsModel>(&self, model: &PimlModel<P>) -> Vec<Vec<f64>> {
        let s = self.current_sample(model);
        loss_and_gradient(model, &self.xs, &self.ys, s.as_ref(), self.lambda, self.noise, self.n_batches)
            .unwrap()
            .1
            .groups
    }

    /// The training objective written out from its definition, plus the signs
    /// of every hidden pre-activation over the batch.
    pub fn eval<P: PhysicsModel>(&self, model: &PimlModel<P>) -> (f64, Vec<bool>) {
        let s = self.current_sample(model);
        let m = model.output_dim() as f64;
        let b = self.xs.len() as f64;
        let (mut sq, mut nll) = (0.0, 0.0);
        let mut pattern = Vec::new();
        for (x, y) in self.xs.iter().zip(&self.ys) {
            let pass = model.forward_traced(x, s.as_ref()).expect("probe stays in the physics domain");
            let hidden = pass.trace.pre.len() - 1;
            for z in &pass.trace.pre[..hidden] {
                pattern.extend(z.iter().map(|v| *v > 0.0));
            }
            for ((p, t), sd) in pass.y.iter().zip(y.iter()).zip(&model.output_stats.std) {
                let r = (p - t) / sd;
                sq += r * r;
                let v = self.noise * self.noise;
                nll += 0.5 * r * r / v + 0.5 * (2.0 * std::f64::consts::PI * v).ln();
            }
        }
        let mut loss = sq / (b * m);
        if let Some(head) = model.net.head().filter(|_| s.is_some()) {
            let kl: f64 = head
                .mu_w
                .iter()
                .chain(&head.mu_b)
                .zip(head.rho_w.iter().chain(&head.rho_b))
                .zip(head.prior_mu_w.iter().chain(&head.prior_mu_b))
                .zip(head.prior_sigma_w.iter().chain(&head.prior_sigma_b))
                .map(|(((mu, rho), pm), ps)| gaussian_kl(*mu, softplus(*rho), *pm, *ps))
                .sum();
            loss += self.lambda * (nll + kl / self.n_batches as f64);
        }
        (loss, pattern)
    }
}

/// Ridders' extrapolation of central differences. `f` returns `None` when a
/// step is unusable; the whole tableau is then restarted from a smaller step.
/// Returns the derivative and its error estimate.
pub fn ridders(mut f: impl FnMut(f64) -> Option<f64>, mut h: f64) -> Option<(f64, f64)> {
    const CON: f64 = 1.4;
    const NTAB: usize = 10;
    'restart: for _ in 0..6 {
        let mut a = [[0.0f64; NTAB]; NTAB];
        let mut step = h;
        let mut best = (f64::NAN, f64::INFINITY);
        for i in 0..NTAB {
            let (Some(up), Some(down)) = (f(step), f(-step)) else {
                h *= 0.1;
                continue 'restart;
            };
            a[0][i] = (up - down) / (2.0 * step);
            let mut fac = CON * CON;
            for j in 1..=i {
                a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
                fac *= CON * CON;
                let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
                if e <= best.1 {
                    best = (a[j][i], e);
                }
            }
            if i > 0 && (a[i][i] - a[i - 1][i - 1]).abs() >= 2.0 * best.1 {
                break;
            }
            step /= CON;
        }
        return Some(best);
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub probes: usize,
    pub max_rel: f64,
    /// Probes redrawn because every step size crossed an activation kink.
    pub redrawn: usize,
    /// `(group, index, analytic, finite difference)` at the worst probe.
    pub worst: (usize, usize, f64, f64),
}

/// Compares the analytic gradient with central differences of the loss at
/// `probes` parameter coordinates, cycling through the parameter groups so
/// every layer (and `mu`/`rho` of a Bayesian head) is probed.
pub fn fd_gradient_check<P: PhysicsModel>(
    model: &mut PimlModel<P>,
    obj: &Objective<'_>,
    probes: usize,
    seed: u64,
    floor: f64,
) -> FdReport {
    let grad = obj.gradient(model);
    let base_pattern = obj.eval(model).1;
    let n_groups = grad.len();
    let mut rng = rng_from_seed(seed);
    let mut report = FdReport {
        probes: 0,
        max_rel: 0.0,
        redrawn: 0,
        worst: (0, 0, 0.0, 0.0),
    };
    let mut k = 0;
    while report.probes < probes {
        let g = k % n_groups;
        k += 1;
        let i = rng.random_range(0..grad[g].len());
        let theta = model.net.params()[g][i];
        let fd = ridders(
            |d| {
                model.net.params_mut()[g][i] = theta + d;
                let (l, pattern) = obj.eval(model);
                model.net.params_mut()[g][i] = theta;
                (pattern == base_pattern).then_some(l)
            },
            1e-2 * theta.abs().max(1.0),
        );
        match fd {
            Some((fd, _)) => {
                let e = rel_err(grad[g][i], fd, floor);
                if e > report.max_rel {
                    report.max_rel = e;
                    report.worst = (g, i, grad[g][i], fd);
                }
                report.probes += 1;
            }
            None => report.redrawn += 1,
        }
    }
    report
}

/// Untrained stage-1 model for `variant` with a random (not zero) output
/// layer scaled by `out_scale`, plus its training data.
pub fn probe_model(spec: &ExperimentSpec, variant: Variant, out_scale: f64, seed: u64) -> (PimlModel<Physics>, Dataset) {
    let (train, _) = generate_data(spec).unwrap();
    let mut model = build_model(spec, variant, &train).unwrap();
    let mut rng = rng_from_seed(seed);
    if let piml_core::TransferNet::Deterministic(net) = &mut model.net {
        let last = net.layers_mut().last_mut().unwrap();
        let fan_in = last.in_dim() as f64;
        let [w, b] = last.params_mut();
        for v in w.iter_mut().chain(b.iter_mut()) {
            *v = out_scale * rng.random_range(-1.0..1.0) / fan_in.sqrt();
        }
    }
    (model, train)
}

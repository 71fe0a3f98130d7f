//! Two-stage training.
//!
//! Stage 1 fits a deterministic model with Adam on the MSE of normalized
//! outputs. Stage 2 promotes the output layer to a variational one (priors and
//! posterior means from the stage-1 weights) and minimizes
//! `MSE - lambda * ELBO`, with the negative ELBO written as
//! `-sum log N(y; y_hat, noise^2) + KL / n_batches` over each mini-batch.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{elbo_loss, gaussian_log_likelihood, PriorScale};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{AdamState, GradientTape, Parameterized};
use crate::physics::PhysicsModel;
use crate::piml::{sample_seed, PimlModel};
use crate::rng::{derive_seed, rng_for};

/// Rows per parallel gradient chunk. Fixed so the floating-point reduction
/// order never depends on the thread count.
const GRAD_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Deterministic,
    Bayesian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda_elbo: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Likelihood noise, in normalized output units.
    pub observation_noise: f64,
    pub stage: Stage,
    /// Weight samples averaged per stage-2 step.
    pub samples_per_step: usize,
    /// Keep hidden layers fixed during stage 2.
    pub freeze_hidden: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 1e-4,
            lambda_elbo: 0.01,
            batch_size: None,
            seed: 0,
            observation_noise: 0.05,
            stage: Stage::Deterministic,
            samples_per_step: 1,
            freeze_hidden: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.lambda_elbo >= 0.0) {
            return Err(Error::InvalidConfig("lambda_elbo must be >= 0".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.observation_noise > 0.0) {
            return Err(Error::InvalidConfig("observation_noise must be > 0".into()));
        }
        if self.samples_per_step == 0 {
            return Err(Error::InvalidConfig("samples_per_step must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub mse_term: f64,
    pub elbo_term: f64,
    pub wall_ms: f64,
    /// Stage-2 rows dropped because a sampled transfer left the physics domain.
    pub excluded_rows: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceHistory {
    pub records: Vec<EpochRecord>,
}

impl ConvergenceHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn excluded_rows(&self) -> usize {
        self.records.iter().map(|r| r.excluded_rows).sum()
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.wall_ms)
    }

    /// `epoch,train_loss,test_loss,mse_term,elbo_term,wall_ms`. With
    /// `include_wall = false` the wall column is left empty so the file is a
    /// pure function of the inputs.
    pub fn to_csv(&self, include_wall: bool) -> String {
        let mut out = String::from("epoch,train_loss,test_loss,mse_term,elbo_term,wall_ms\n");
        for r in &self.records {
            let wall = if include_wall { format!("{}", r.wall_ms) } else { String::new() };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.test_loss, r.mse_term, r.elbo_term, wall
            );
        }
        out
    }
}

/// MSE over normalized outputs and its gradient w.r.t. the physical-unit
/// prediction, for one sample in a batch of `batch` rows.
fn normalized_residual<P>(model: &PimlModel<P>, y: &[f64], target: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(target)
        .zip(&model.output_stats.std)
        .map(|((a, b), s)| (a - b) / s)
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
struct BatchTerms {
    mse: f64,
    neg_ll: f64,
    excluded: usize,
}

/// Loss terms and gradient for one batch, evaluated with an optional head
/// sample. `ll_weight` scales the likelihood gradient (0 in stage 1).
fn batch_gradient<P: PhysicsModel>(
    model: &PimlModel<P>,
    xs: &[&[f64]],
    ys: &[&[f64]],
    sample: Option<&crate::bayes::WeightSample>,
    ll_weight: f64,
    noise: f64,
) -> Result<(BatchTerms, GradientTape)> {
    let m = model.output_dim() as f64;
    let b = xs.len() as f64;
    let idx: Vec<usize> = (0..xs.len()).collect();
    let partials = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<(BatchTerms, GradientTape)> {
            let mut tape = model.net.zero_tape();
            let mut terms = BatchTerms::default();
            let mut passes = Vec::with_capacity(chunk.len());
            let mut upstreams = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let pass = match model.forward_traced(xs[i], sample) {
                    Ok(p) => p,
                    // A sampled transfer outside the physics domain drops the
                    // row from this step rather than aborting the run.
                    Err(Error::PhysicsDomain { .. }) if sample.is_some() => {
                        terms.excluded += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let r = normalized_residual(model, &pass.y, ys[i]);
                terms.mse += r.iter().map(|v| v * v).sum::<f64>() / (b * m);
                if ll_weight > 0.0 {
                    let zeros = vec![0.0; r.len()];
                    terms.neg_ll -= gaussian_log_likelihood(&r, &zeros, noise);
                }
                upstreams.push(
                    r.iter()
                        .zip(&model.output_stats.std)
                        .map(|(ri, s)| (2.0 * ri / (b * m) + ll_weight * ri / (noise * noise)) / s)
                        .collect(),
                );
                passes.push(pass);
            }
            model.backward_traced(&passes, &upstreams, sample, &mut tape)?;
            Ok((terms, tape))
        })
        .collect::<Vec<_>>();
    let mut total = model.net.zero_tape();
    let mut terms = BatchTerms::default();
    for p in partials {
        let (t, g) = p?;
        terms.mse += t.mse;
        terms.neg_ll += t.neg_ll;
        terms.excluded += t.excluded;
        total.add_assign(&g);
    }
    Ok((terms, total))
}

/// Loss terms for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLoss {
    pub total: f64,
    pub mse: f64,
    /// `-log likelihood + KL / n_batches`; zero without a weight sample.
    pub elbo: f64,
    /// Rows dropped because the sampled transfer left the physics domain.
    pub excluded: usize,
}

/// The exact objective minimized by one training step and its gradient.
///
/// Without a sample this is the stage-1 MSE. With a head sample it is
/// `mse + lambda * (-log lik + KL / n_batches)`, where the KL gradient flows to
/// `mu` and `rho` directly and the likelihood gradient flows through the
/// sampled weights.
pub fn loss_and_gradient<P: PhysicsModel>(
    model: &PimlModel<P>,
    xs: &[&[f64]],
    ys: &[&[f64]],
    sample: Option<&crate::bayes::WeightSample>,
    lambda: f64,
    noise: f64,
    n_batches: usize,
) -> Result<(StepLoss, GradientTape)> {
    crate::error::check_dim("batch targets", xs.len(), ys.len())?;
    if xs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let Some(sample) = sample else {
        let (t, tape) = batch_gradient(model, xs, ys, None, 0.0, noise)?;
        let loss = StepLoss { total: t.mse, mse: t.mse, elbo: 0.0, excluded: 0 };
        return Ok((loss, tape));
    };
    let (t, mut tape) = batch_gradient(model, xs, ys, Some(sample), lambda, noise)?;
    let head = model.net.head().ok_or(Error::NotBayesian)?;
    // lambda = 0 drops the ELBO term (reported as 0): a zero-sigma posterior
    // has no finite KL, and the step must then match stage 1.
    let elbo = if lambda > 0.0 {
        elbo_loss(-t.neg_ll, head.kl_to_prior()?, n_batches)?
    } else {
        0.0
    };
    let kl_scale = lambda / n_batches as f64;
    if kl_scale > 0.0 {
        let trunk_groups = model.net.trunk_groups();
        for (dst, src) in tape.groups[trunk_groups..].iter_mut().zip(head.kl_gradient()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += kl_scale * s);
        }
    }
    let loss = StepLoss {
        total: t.mse + lambda * elbo,
        mse: t.mse,
        elbo,
        excluded: t.excluded,
    };
    Ok((loss, tape))
}

/// MSE of normalized outputs over a dataset using deterministic (or posterior
/// mean) weights.
pub fn dataset_loss<P: PhysicsModel>(model: &PimlModel<P>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let per: Vec<f64> = data
        .inputs
        .par_iter()
        .zip(&data.targets)
        .map(|(x, y)| -> Result<f64> {
            let pred = model.forward(x)?;
            let r = normalized_residual(model, &pred.y, y);
            Ok(r.iter().map(|v| v * v).sum::<f64>())
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / (data.len() * model.output_dim()) as f64)
}

fn batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let size = cfg.batch_size.unwrap_or(n).min(n);
    if size < n {
        order.shuffle(&mut rng_for(cfg.seed, "shuffle", epoch as u64));
    }
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn check_data<P: PhysicsModel>(model: &PimlModel<P>, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    crate::error::check_dim("data inputs", model.input_dim(), data.input_dim())?;
    crate::error::check_dim("data targets", model.output_dim(), data.target_dim())
}

/// Stage 1: Adam on the MSE of normalized outputs.
pub fn train_stage1<P: PhysicsModel>(
    model: &mut PimlModel<P>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<ConvergenceHistory> {
    cfg.validate()?;
    if cfg.stage != Stage::Deterministic {
        return Err(Error::InvalidConfig("stage 1 needs stage = deterministic".into()));
    }
    if model.is_bayesian() {
        return Err(Error::AlreadyBayesian);
    }
    check_data(model, train)?;
    let mut adam = AdamState::new(&model.net, cfg.learning_rate);
    let mut history = ConvergenceHistory::default();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for (bi, batch) in batches(train.len(), cfg, epoch).iter().enumerate() {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| train.inputs[i].as_slice()).collect();
            let ys: Vec<&[f64]> = batch.iter().map(|&i| train.targets[i].as_slice()).collect();
            let (terms, tape) = batch_gradient(model, &xs, &ys, None, 0.0, cfg.observation_noise)?;
            if !terms.mse.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    mse: terms.mse,
                    elbo: 0.0,
                });
            }
            adam.step(&mut model.net, &tape)?;
            epoch_loss += terms.mse * batch.len() as f64;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let test_loss = test.map_or(Ok(f64::NAN), |t| dataset_loss(model, t))?;
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            test_loss,
            mse_term: train_loss,
            elbo_term: 0.0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            excluded_rows: 0,
        });
    }
    Ok(history)
}

/// Settings for turning a trained deterministic model into a Bayesian one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromotionConfig {
    pub prior_scale: PriorScale,
    /// Initial posterior sigma as a fraction of the prior sigma.
    pub posterior_ratio: f64,
}

impl Default for PromotionConfig {
    fn default() -> Self {
        Self {
            prior_scale: PriorScale::LayerWide,
            posterior_ratio: 0.5,
        }
    }
}

pub fn promote_to_bayesian<P: PhysicsModel + Clone>(
    model: &PimlModel<P>,
    cfg: &PromotionConfig,
) -> Result<PimlModel<P>> {
    model.promote_to_bayesian(cfg.prior_scale, cfg.posterior_ratio)
}

/// Stage 2: reparameterized training of the variational output layer (and the
/// hidden layers unless frozen) on `MSE - lambda * ELBO`.
pub fn train_stage2<P: PhysicsModel>(
    model: &mut PimlModel<P>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<ConvergenceHistory> {
    cfg.validate()?;
    if cfg.stage != Stage::Bayesian {
        return Err(Error::InvalidConfig("stage 2 needs stage = bayesian".into()));
    }
    if !model.is_bayesian() {
        return Err(Error::NotBayesian);
    }
    check_data(model, train)?;
    let mut adam = AdamState::new(&model.net, cfg.learning_rate);
    let trunk_groups = model.net.trunk_groups();
    let mut history = ConvergenceHistory::default();
    let start = Instant::now();
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let batches = batches(train.len(), cfg, epoch);
        let n_batches = batches.len();
        let (mut sum_total, mut sum_mse, mut sum_elbo) = (0.0, 0.0, 0.0);
        let mut excluded_rows = 0;
        for (bi, batch) in batches.iter().enumerate() {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| train.inputs[i].as_slice()).collect();
            let ys: Vec<&[f64]> = batch.iter().map(|&i| train.targets[i].as_slice()).collect();
            let k = cfg.samples_per_step;
            let mut tape = model.net.zero_tape();
            let mut terms = StepLoss::default();
            for s in 0..k {
                let head = model.net.head().expect("checked above");
                let seed = sample_seed(derive_seed(cfg.seed, "stage2", step), s);
                let sample = head.sample_weights(seed);
                let (t, g) = loss_and_gradient(
                    model,
                    &xs,
                    &ys,
                    Some(&sample),
                    cfg.lambda_elbo,
                    cfg.observation_noise,
                    n_batches,
                )?;
                terms.total += t.total / k as f64;
                terms.mse += t.mse / k as f64;
                terms.elbo += t.elbo / k as f64;
                terms.excluded += t.excluded;
                tape.add_assign(&g);
            }
            if k > 1 {
                tape.scale(1.0 / k as f64);
            }
            let (total, elbo) = (terms.total, terms.elbo);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    mse: terms.mse,
                    elbo,
                });
            }
            if terms.excluded == batch.len() * k {
                return Err(Error::AllSamplesExcluded(batch.len() * k));
            }
            excluded_rows += terms.excluded;
            if cfg.freeze_hidden {
                tape.groups[..trunk_groups].iter_mut().flatten().for_each(|g| *g = 0.0);
            }
            adam.step(&mut model.net, &tape)?;
            step += 1;
            let w = batch.len() as f64;
            sum_total += total * w;
            sum_mse += terms.mse * w;
            sum_elbo += elbo * w;
        }
        let n = train.len() as f64;
        let test_loss = test.map_or(Ok(f64::NAN), |t| dataset_loss(model, t))?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: sum_total / n,
            test_loss,
            mse_term: sum_mse / n,
            elbo_term: sum_elbo / n,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            excluded_rows,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub per_output: Vec<f64>,
    pub total: f64,
    /// Per-sample absolute error of the predictive mean, row-major.
    pub abs_errors: Vec<Vec<f64>>,
    pub excluded_samples: usize,
}

/// RMSE of the predictive mean against the targets, in physical units. For a
/// Bayesian model the mean is taken over `n_mc` weight samples per row.
pub fn evaluate_rmse<P: PhysicsModel>(
    model: &PimlModel<P>,
    data: &Dataset,
    n_mc: usize,
    seed: u64,
) -> Result<RmseReport> {
    check_data(model, data)?;
    let m = model.output_dim();
    let rows: Vec<(Vec<f64>, usize)> = data
        .inputs
        .iter()
        .enumerate()
        .map(|(i, x)| -> Result<(Vec<f64>, usize)> {
            if model.is_bayesian() {
                if n_mc == 0 {
                    return Err(Error::InvalidConfig("n_mc must be >= 1".into()));
                }
                let draws = model.predict_with_sampling(x, n_mc, derive_seed(seed, "rmse", i as u64))?;
                let ok: Vec<&Vec<f64>> = draws.iter().filter_map(|d| d.y.as_ref()).collect();
                if ok.is_empty() {
                    return Err(Error::AllSamplesExcluded(n_mc));
                }
                let mut mean = vec![0.0; m];
                for y in &ok {
                    mean.iter_mut().zip(y.iter()).for_each(|(a, b)| *a += b);
                }
                mean.iter_mut().for_each(|a| *a /= ok.len() as f64);
                Ok((mean, n_mc - ok.len()))
            } else {
                Ok((model.forward(x)?.y, 0))
            }
        })
        .collect::<Result<_>>()?;
    let mut sq = vec![0.0; m];
    let mut abs_errors = Vec::with_capacity(rows.len());
    let mut excluded = 0;
    for ((pred, ex), target) in rows.iter().zip(&data.targets) {
        excluded += ex;
        let e: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
        sq.iter_mut().zip(&e).for_each(|(s, v)| *s += v * v);
        abs_errors.push(e.iter().map(|v| v.abs()).collect());
    }
    let n = data.len() as f64;
    let per_output = sq.iter().map(|s| (s / n).sqrt()).collect();
    let total = (sq.iter().sum::<f64>() / (n * m as f64)).sqrt();
    Ok(RmseReport {
        per_output,
        total,
        abs_errors,
        excluded_samples: excluded,
    })
}

//! He initialization, Adam, exponential learning-rate decay and the
//! mini-batch training loop.
//!
//! Each sample of a mini-batch is run on its own tape (in parallel when a
//! rayon pool with several threads is active); per-sample gradients are then
//! summed in batch order, so results do not depend on the thread count.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{metric_psnr, Sample};
use crate::error::invalid;
use crate::kspace::ComplexImageSequence;
use crate::losses::{total_loss, LossConfig};
use crate::network::{crdn_forward_var, Bound, DcTerms, ModelParams, NetworkConfig};
use crate::tensor::{Element, Tape, Tensor};
use crate::{Error, Result};

/// Zero-mean Gaussian with std `sqrt(2 / fan_in)`.
pub fn he_init<T: Element>(shape: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
    he_init_stream(shape, fan_in, seed, 0)
}

/// [`he_init`] drawing from an independent ChaCha stream, so every parameter
/// of a model gets its own sequence from one seed.
pub fn he_init_stream<T: Element>(
    shape: &[usize],
    fan_in: usize,
    seed: u64,
    stream: u64,
) -> Tensor<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| T::cast(normal.sample(&mut rng)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Multiplicative decay applied once per epoch.
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Share of the training samples held out for checkpoint selection.
    pub validation_fraction: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            initial_lr: 1e-4,
            lr_decay: 0.95,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            seed: 0,
            validation_fraction: 0.1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("train.batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(invalid!("train.epochs must be >= 1"));
        }
        if !(self.initial_lr >= 0.0 && self.initial_lr <= 1.0) {
            return Err(invalid!(
                "train.initial_lr must lie in [0, 1], got {}",
                self.initial_lr
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid!(
                "train.lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            ));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid!("train.{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps <= 1.0) {
            return Err(invalid!(
                "train.adam_eps must lie in (0, 1], got {}",
                self.adam_eps
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(invalid!(
                "train.validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        self.loss.validate()
    }
}

/// `initial_lr * lr_decay^epoch`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    config.initial_lr * config.lr_decay.powi(epoch as i32)
}

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Element> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Element>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    adam: AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::cast(adam.beta1), T::cast(adam.beta2));
    let c1 = T::cast(1.0 - adam.beta1.powi(t));
    let c2 = T::cast(1.0 - adam.beta2.powi(t));
    let (lr, eps) = (T::cast(lr), T::cast(adam.eps));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        p.expect_same_shape(g)?;
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

fn sample_tensors<T: Element>(s: &Sample) -> Result<Tensor<T>> {
    let (nx, ny, nt) = s.reference.geometry();
    s.reference.to_tensor::<T>().reshape(&[1, 2, nt, ny, nx])
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients<T: Element>(
    params: &ModelParams<T>,
    s: &Sample,
    loss: &LossConfig,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if !s.reference.same_geometry(s.k_u.samples()) {
        return Err(invalid!(
            "sample reference {:?} and k-space {:?} differ",
            s.reference.geometry(),
            s.k_u.geometry()
        ));
    }
    let tape = Tape::new();
    let bound = Bound::params(&tape, params);
    let dc = DcTerms::from_kspace(&tape, &s.k_u, params.config().dc_mode)?;
    let out = crdn_forward_var(&bound, params.config(), &dc)?;
    let reference = tape.constant(sample_tensors(s)?);
    let l = total_loss(out, reference, loss)?;
    if let Some(bad) = tape.first_non_finite() {
        return Err(Error::Numerical(format!(
            "non-finite value during training forward pass at {bad}"
        )));
    }
    let value = l.value().item()?.as_f64();
    let mut grads = tape.backward(l)?;
    let mut out = Vec::with_capacity(params.len());
    for (v, (name, p)) in bound.vars().iter().zip(params.iter()) {
        let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape()));
        if !g.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
        out.push(g);
    }
    Ok((value, out))
}

/// Network output for one sample (no gradients).
pub fn reconstruct<T: Element>(
    params: &ModelParams<T>,
    s: &Sample,
) -> Result<ComplexImageSequence> {
    crate::network::crdn_forward(&s.k_u, params)
}

/// Mean loss and mean PSNR over `samples`.
pub fn evaluate<T: Element>(
    params: &ModelParams<T>,
    samples: &[Sample],
    loss: &LossConfig,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(invalid!("evaluate needs at least one sample"));
    }
    let per: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let rec = reconstruct(params, s)?;
            let tape = Tape::<T>::new();
            let (nx, ny, nt) = rec.geometry();
            let r = tape.constant(rec.to_tensor::<T>().reshape(&[1, 2, nt, ny, nx])?);
            let reference = tape.constant(sample_tensors(s)?);
            let l = total_loss(r, reference, loss)?.value().item()?.as_f64();
            Ok((l, metric_psnr(&rec, &s.reference)?))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok((
        per.iter().map(|p| p.0).sum::<f64>() / n,
        per.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

/// Norm of every parameter gradient on one sample, in parameter order.
pub fn gradient_norms<T: Element>(
    params: &ModelParams<T>,
    s: &Sample,
    loss: &LossConfig,
) -> Result<Vec<(String, f64)>> {
    let (_, grads) = sample_gradients(params, s, loss)?;
    Ok(params
        .names()
        .iter()
        .cloned()
        .zip(grads.iter().map(|g| g.norm().as_f64()))
        .collect())
}

/// Deterministic train/validation split of `n` indices.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_psnr: Option<f64>,
    pub wall_seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_loss,val_psnr";

/// Training log without wall-clock times, so that seeded runs produce
/// byte-identical files.
pub fn write_log_csv(log: &[EpochRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in log {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            r.lr,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_psnr)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Element> {
    /// Parameters after the epoch with the lowest validation loss (training
    /// loss when there is no validation split).
    pub best: ModelParams<T>,
    pub best_epoch: usize,
    pub last: ModelParams<T>,
    pub log: Vec<EpochRecord>,
    pub validation_indices: Vec<usize>,
}

/// He-initializes a model from `train.seed` and trains it.
pub fn train<T: Element>(
    samples: &[Sample],
    net: &NetworkConfig,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    let init = ModelParams::init(net, config.seed)?;
    train_from(samples, init, config, on_epoch)
}

pub fn train_from<T: Element>(
    samples: &[Sample],
    init: ModelParams<T>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(invalid!("training needs a non-empty dataset"));
    }
    let (train_idx, val_idx) =
        split_validation(samples.len(), config.validation_fraction, config.seed);
    let val: Vec<Sample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let adam = AdamConfig::from(config);
    let mut params = init;
    let mut state = OptimizerState::new(params.tensors());
    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut log = Vec::with_capacity(config.epochs);
    let start = Instant::now();
    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config);
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2 + epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<Tensor<T>>)> = batch
                .par_iter()
                .map(|&i| sample_gradients(&params, &samples[i], &config.loss))
                .collect::<Result<_>>()?;
            let mut iter = results.into_iter();
            let (l0, mut total) = iter.next().expect("non-empty batch");
            loss_sum += l0;
            for (l, g) in iter {
                loss_sum += l;
                for (acc, gi) in total.iter_mut().zip(&g) {
                    acc.add_assign(gi);
                }
            }
            let inv = T::cast(1.0 / batch.len() as f64);
            total.iter_mut().for_each(|g| g.scale_assign(inv));
            adam_step(params.tensors_mut(), &total, &mut state, lr, adam)?;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training loss became {train_loss} in epoch {epoch}"
            )));
        }
        let (val_loss, val_psnr) = if val.is_empty() {
            (None, None)
        } else {
            let (l, p) = evaluate(&params, &val, &config.loss)?;
            (Some(l), Some(p))
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_psnr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        let score = val_loss.unwrap_or(train_loss);
        if score < best.0 {
            best = (score, params.clone(), epoch);
        }
        log.push(rec);
    }
    Ok(TrainOutcome {
        best: best.1,
        best_epoch: best.2,
        last: params,
        log,
        validation_indices: val_idx,
    })
}

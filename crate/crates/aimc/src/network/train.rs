//! Hardware-aware training: noise-injected forward, straight-through
//! gradients on the clean weights, plain SGD.
//!
//! Training-time noise lives in the weight domain only (w~ = w +
//! sigma_prog * max|w|_layer * eps, fresh each step); DAC/ADC converter
//! simulation in the training forward is off by default and available
//! behind `converters_in_train`.

use super::graph::{FwdOptions, NetworkSpec, ParamGrad};
use crate::analog::{BitDepth, NoiseConfig, SeedPolicy};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    DiceLoss,
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    /// All-zero noise == plain digital training.
    pub train_noise: NoiseConfig,
    /// Optional symmetric clamp applied to weights after each update.
    pub weight_clip: Option<f64>,
    /// Simulate DAC/ADC in the training forward (straight-through).
    pub converters_in_train: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 25,
            batch_size: 8,
            loss: LossKind::DiceLoss,
            train_noise: NoiseConfig {
                sigma_prog: 0.0,
                sigma_out: 0.0,
                dac_bits: BitDepth::Infinite,
                adc_bits: BitDepth::Infinite,
                input_clip: 3.0,
                seed_policy: SeedPolicy::FreshPerPass,
            },
            weight_clip: None,
            converters_in_train: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        self.train_noise.validate()
    }
}

/// One loss evaluation: value and dL/d(prediction).
pub(crate) fn loss_and_grad(kind: LossKind, pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    match kind {
        LossKind::DiceLoss => {
            const EPS: f64 = 1e-6;
            let a: f64 = 2.0
                * pred
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| p * t)
                    .sum::<f64>()
                + EPS;
            let b: f64 =
                pred.data().iter().sum::<f64>() + target.data().iter().sum::<f64>() + EPS;
            let loss = 1.0 - a / b;
            let grad: Vec<f64> = target
                .data()
                .iter()
                .map(|t| -(2.0 * t * b - a) / (b * b))
                .collect();
            (loss, Tensor::new(pred.shape().to_vec(), grad).expect("dice grad"))
        }
        LossKind::Bce => {
            const CLIP: f64 = 1e-7;
            let n = pred.len() as f64;
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(pred.len());
            for (p, t) in pred.data().iter().zip(target.data()) {
                let q = p.clamp(CLIP, 1.0 - CLIP);
                loss -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
                grad.push((q - t) / (q * (1.0 - q)) / n);
            }
            (loss / n, Tensor::new(pred.shape().to_vec(), grad).expect("bce grad"))
        }
    }
}

/// Weight-domain noise draw for one step: w~ = w + sigma * max|w| * eps.
fn perturbed_weights(net: &NetworkSpec, sigma: f64, step_seed: u64) -> Vec<Option<Tensor>> {
    net.params
        .iter()
        .enumerate()
        .map(|(id, p)| {
            let p = p.as_ref()?;
            if sigma == 0.0 {
                return None;
            }
            let scale = p.weight.max_abs();
            if scale == 0.0 {
                return None;
            }
            let mut r = rng::stream(step_seed, "hwa-weight-noise", id as u64);
            let data: Vec<f64> = p
                .weight
                .data()
                .iter()
                .map(|w| w + sigma * scale * rng::normal(&mut r))
                .collect();
            Tensor::new(p.weight.shape().to_vec(), data).ok()
        })
        .collect()
}

/// Sum of per-sample gradients over a batch, plus the mean pre-update loss.
fn batch_gradients(
    net: &NetworkSpec,
    batch: &[(&Tensor, &Tensor)],
    tcfg: &TrainConfig,
    opt: &FwdOptions,
) -> Result<(f64, Vec<Option<ParamGrad>>)> {
    let per_sample: Vec<Result<(f64, Vec<Option<ParamGrad>>)>> = batch
        .par_iter()
        .map(|(img, mask)| {
            let trace = net.forward_trace(img, opt)?;
            let pred = &trace.values[net.output];
            let (loss, dpred) = loss_and_grad(tcfg.loss, pred, mask);
            let grads = net.backward(&trace, opt, &dpred)?;
            Ok((loss, grads))
        })
        .collect();

    let mut total_loss = 0.0;
    let mut acc: Vec<Option<ParamGrad>> = (0..net.nodes.len()).map(|_| None).collect();
    for r in per_sample {
        let (loss, grads) = r?;
        total_loss += loss;
        for (slot, g) in acc.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match slot {
                None => *slot = Some(g),
                Some(s) => {
                    for (a, b) in s.weight.data_mut().iter_mut().zip(g.weight.data()) {
                        *a += b;
                    }
                    if let (Some(sb), Some(gb)) = (s.bias.as_mut(), g.bias.as_ref()) {
                        for (a, b) in sb.iter_mut().zip(gb) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
    Ok((total_loss / batch.len() as f64, acc))
}

/// One SGD step with fresh weight-noise injection; returns the pre-update
/// batch loss. Gradients treat the perturbation as constant and are applied
/// to the clean weights.
pub fn train_step(
    net: &mut NetworkSpec,
    batch: &[(&Tensor, &Tensor)],
    tcfg: &TrainConfig,
    step_seed: u64,
    step_index: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("train_step: empty batch"));
    }
    let overrides = perturbed_weights(net, tcfg.train_noise.sigma_prog, step_seed);
    let opt = FwdOptions {
        w_override: Some(&overrides),
        converters: tcfg.converters_in_train.then_some(&tcfg.train_noise),
    };
    let (loss, grads) = batch_gradients(net, batch, tcfg, &opt)?;
    if !loss.is_finite() {
        return Err(Error::Training { step: step_index, loss });
    }
    let scale = tcfg.learning_rate / batch.len() as f64;
    for (p, g) in net.params.iter_mut().zip(grads) {
        let (Some(p), Some(g)) = (p.as_mut(), g) else { continue };
        for (w, gw) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *w -= scale * gw;
            if let Some(clip) = tcfg.weight_clip {
                *w = w.clamp(-clip, clip);
            }
        }
        if let (Some(b), Some(gb)) = (p.bias.as_mut(), g.bias.as_ref()) {
            for (w, gw) in b.iter_mut().zip(gb) {
                *w -= scale * gw;
            }
        }
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_dice: f64,
}

/// Run epochs * ceil(N / batch) train steps; history carries per-epoch mean
/// loss and digital-eval train dice at threshold 0.5.
pub fn hwa_train(
    net: &mut NetworkSpec,
    dataset: &[(Tensor, Tensor)],
    tcfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    tcfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("hwa_train: empty dataset"));
    }
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut step_index = 0usize;
    for epoch in 0..tcfg.epochs {
        let order = shuffled_indices(dataset.len(), tcfg.seed, epoch as u64);
        let mut losses = Vec::new();
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<(&Tensor, &Tensor)> =
                chunk.iter().map(|&i| (&dataset[i].0, &dataset[i].1)).collect();
            let step_seed = rng::derive_seed(tcfg.seed, "train-step", step_index as u64);
            losses.push(train_step(net, &batch, tcfg, step_seed, step_index)?);
            step_index += 1;
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let train_dice = mean_dataset_dice(net, dataset)?;
        history.push(EpochStats { epoch, mean_loss, train_dice });
    }
    Ok(history)
}

/// Mean digital-eval dice over a dataset at threshold 0.5.
pub fn mean_dataset_dice(net: &NetworkSpec, dataset: &[(Tensor, Tensor)]) -> Result<f64> {
    let dices: Vec<Result<f64>> = dataset
        .par_iter()
        .map(|(img, mask)| {
            let pred = net.forward_digital(img)?;
            let bin = crate::evalx::binarize(&pred, 0.5).reshape(mask.shape().to_vec())?;
            crate::evalx::dice(&bin, mask)
        })
        .collect();
    let mut sum = 0.0;
    for d in &dices {
        match d {
            Ok(v) => sum += v,
            Err(e) => return Err(Error::config(format!("dice eval failed: {e}"))),
        }
    }
    Ok(sum / dataset.len() as f64)
}

fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, "epoch-shuffle", epoch);
    idx.shuffle(&mut r);
    idx
}

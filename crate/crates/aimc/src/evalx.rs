//! Dice metric, noise-sensitivity sweeps, Monte-Carlo uncertainty maps and
//! pooled uncertainty-density summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analog::{NoiseConfig, SeedPolicy, TileGeometry};
use crate::error::{Error, Result};
use crate::network::graph::NetworkSpec;
use crate::rng::derive_seed;
use crate::synthdata::Sample;
use crate::tensor::Tensor;

/// Binarize a real-valued map at `threshold`; values >= threshold map to 1.0.
pub fn binarize(x: &Tensor, threshold: f64) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("binarize preserves shape")
}

/// Dice overlap 2|P∩T| / (|P|+|T|) between two binary masks.
/// Both masks empty is a perfect match by convention (1.0).
pub fn dice(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "dice: shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut inter = 0.0f64;
    let mut total = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        debug_assert!(p == 0.0 || p == 1.0);
        debug_assert!(t == 0.0 || t == 1.0);
        inter += p * t;
        total += p + t;
    }
    if total == 0.0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter / total)
    }
}

const DICE_THRESHOLD: f64 = 0.5;

/// Mean dice of a network run digitally over a dataset, threshold 0.5.
pub fn mean_dataset_dice_digital(net: &NetworkSpec, data: &[Sample]) -> Result<f64> {
    let scores: Vec<f64> = data
        .par_iter()
        .map(|s| {
            let y = net.forward_digital(&s.image)?;
            let bin = binarize(&y, DICE_THRESHOLD).reshape(s.mask.shape().to_vec())?;
            dice(&bin, &s.mask)
        })
        .collect::<Result<_>>()?;
    Ok(mean(&scores))
}

/// One row of a programming-noise sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub preset_id: String,
    pub sigma_prog: f64,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub dice_drop: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// Sweep programming-noise levels: for each sigma, program the tiles
/// `n_seeds` times and report mean/std of the test-set dice. `base_cfg`
/// supplies everything except `sigma_prog`; tiles stay fixed within a seed.
pub fn noise_sweep(
    net: &NetworkSpec,
    data: &[Sample],
    sigmas: &[f64],
    n_seeds: usize,
    base_cfg: &NoiseConfig,
    geometry: TileGeometry,
    master_seed: u64,
) -> Result<SweepResult> {
    if sigmas.is_empty() || sigmas[0] != 0.0 {
        return Err(Error::config("sweep sigmas must start at 0"));
    }
    if sigmas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("sweep sigmas must be strictly ascending"));
    }
    if n_seeds == 0 {
        return Err(Error::config("sweep needs n_seeds >= 1"));
    }
    let mut rows = Vec::with_capacity(sigmas.len());
    let mut baseline = f64::NAN;
    for (si, &sigma) in sigmas.iter().enumerate() {
        let mut cfg = base_cfg.with_sigma_prog(sigma);
        cfg.seed_policy = SeedPolicy::FixedPerProgramming;
        let scores: Vec<f64> = if cfg.is_ideal() {
            // Noise-free and converter-free: every seed is the digital network.
            let d = mean_dataset_dice_digital(net, data)?;
            vec![d; n_seeds]
        } else {
            (0..n_seeds)
                .into_par_iter()
                .map(|seed_i| {
                    let prog_seed = derive_seed(master_seed, "sweep-programming", seed_i as u64);
                    let prog = net.program(&cfg, geometry, prog_seed)?;
                    let per_image: Vec<f64> = data
                        .iter()
                        .enumerate()
                        .map(|(ii, s)| {
                            let pass = derive_seed(prog_seed, "sweep-pass", ii as u64);
                            let y = prog.forward(&s.image, pass)?;
                            let bin = binarize(&y, DICE_THRESHOLD)
                                .reshape(s.mask.shape().to_vec())?;
                            dice(&bin, &s.mask)
                        })
                        .collect::<Result<_>>()?;
                    Ok(mean(&per_image))
                })
                .collect::<Result<_>>()?
        };
        let m = mean(&scores);
        if si == 0 {
            baseline = m;
        }
        rows.push(SweepRow {
            preset_id: net.preset_id.to_string(),
            sigma_prog: sigma,
            mean_dice: m,
            std_dice: std_pop(&scores),
            dice_drop: baseline - m,
            n_seeds,
        });
    }
    Ok(SweepResult { rows })
}

/// Per-pixel standard deviation of the network output over Monte-Carlo
/// analog passes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyMap {
    /// Population std per pixel, shape [H, W]. Bounded by 0.5 since the
    /// underlying outputs live in [0, 1].
    pub std: Tensor,
    pub n_samples: usize,
}

impl UncertaintyMap {
    pub fn mean_value(&self) -> f64 {
        mean(self.std.data())
    }
}

/// Run `n_samples` analog passes and return the per-pixel output std.
/// Fresh programming noise per pass when the config's seed policy asks for
/// it; with fixed-per-programming tiles the only variability is output noise.
pub fn mc_uncertainty(
    net: &NetworkSpec,
    x: &Tensor,
    n_samples: usize,
    cfg: &NoiseConfig,
    geometry: TileGeometry,
    seed: u64,
) -> Result<UncertaintyMap> {
    if n_samples < 2 {
        return Err(Error::config("mc_uncertainty needs n_samples >= 2"));
    }
    let prog = net.program(cfg, geometry, derive_seed(seed, "mc-programming", 0))?;
    let outputs: Vec<Tensor> = (0..n_samples)
        .into_par_iter()
        .map(|i| prog.forward(x, derive_seed(seed, "mc-pass", i as u64)))
        .collect::<Result<_>>()?;
    let shape = outputs[0].shape().to_vec();
    let hw: Vec<usize> = if shape.len() == 3 && shape[0] == 1 {
        shape[1..].to_vec()
    } else {
        shape.clone()
    };
    let n = outputs[0].data().len();
    let mut std = Tensor::zeros(hw);
    let inv = 1.0 / n_samples as f64;
    for p in 0..n {
        let m: f64 = outputs.iter().map(|o| o.data()[p]).sum::<f64>() * inv;
        let var: f64 = outputs
            .iter()
            .map(|o| {
                let d = o.data()[p] - m;
                d * d
            })
            .sum::<f64>()
            * inv;
        std.data_mut()[p] = var.sqrt();
    }
    Ok(UncertaintyMap { std, n_samples })
}

pub const DENSITY_RANGE: (f64, f64) = (0.0, 0.5);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensitySummary {
    pub bins: Vec<DensityBin>,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub n_values: usize,
}

/// Pool all per-pixel std values from `maps` into a normalized histogram
/// over [0, 0.5] plus summary statistics.
pub fn uncertainty_density(maps: &[UncertaintyMap], n_bins: usize) -> Result<DensitySummary> {
    if maps.is_empty() {
        return Err(Error::config("uncertainty_density needs at least one map"));
    }
    if n_bins == 0 {
        return Err(Error::config("uncertainty_density needs n_bins >= 1"));
    }
    let shape = maps[0].std.shape();
    if maps.iter().any(|m| m.std.shape() != shape) {
        return Err(Error::shape("uncertainty_density: maps differ in shape"));
    }
    let mut pooled: Vec<f64> = maps
        .iter()
        .flat_map(|m| m.std.data().iter().copied())
        .collect();
    let (lo, hi) = DENSITY_RANGE;
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &v in &pooled {
        let b = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    let total = pooled.len() as f64;
    let bins = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| DensityBin {
            bin_left: lo + i as f64 * width,
            bin_right: lo + (i + 1) as f64 * width,
            mass: c as f64 / total,
        })
        .collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(DensitySummary {
        mean: mean(&pooled),
        median: quantile_sorted(&pooled, 0.5),
        p95: quantile_sorted(&pooled, 0.95),
        n_values: pooled.len(),
        bins,
    })
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divides by n, not n-1).
pub(crate) fn std_pop(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

//! Crossbar tile model: weight programming with Gaussian noise, DAC/ADC
//! uniform quantization, and the noisy matrix-vector multiply.
//!
//! Conventions (declared, since the underlying device parameters are not
//! standardized): programming noise is additive Gaussian on conductance-domain
//! weights relative to the per-tile max-abs scale; converters are uniform
//! quantizers over a symmetric range, with the ADC range self-calibrated to
//! the per-call max-abs raw output.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

const ADC_RANGE_TINY: f64 = 1e-12;

/// Converter resolution: a finite bit-width or an ideal (identity) converter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Finite(u8),
    Infinite,
}

impl BitDepth {
    pub fn is_infinite(&self) -> bool {
        matches!(self, BitDepth::Infinite)
    }
}

impl Serialize for BitDepth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BitDepth::Finite(b) => s.serialize_u8(*b),
            BitDepth::Infinite => s.serialize_str("infinite"),
        }
    }
}

impl<'de> Deserialize<'de> for BitDepth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u8),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(b) => Ok(BitDepth::Finite(b)),
            Raw::Str(s) if s == "infinite" => Ok(BitDepth::Infinite),
            Raw::Str(s) => Err(D::Error::custom(format!(
                "bit depth must be an integer or \"infinite\", got {s:?}"
            ))),
        }
    }
}

/// When programming noise is redrawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPolicy {
    /// Tiles keep the noise drawn at programming time across passes.
    FixedPerProgramming,
    /// Every forward pass reprograms tiles with fresh noise.
    FreshPerPass,
}

/// The analog non-ideality knob set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Std of programming noise, relative to the per-tile weight scale.
    pub sigma_prog: f64,
    /// Std of additive output noise in the conductance-domain output.
    pub sigma_out: f64,
    pub dac_bits: BitDepth,
    pub adc_bits: BitDepth,
    /// Inputs are clipped to ±input_clip before the DAC.
    pub input_clip: f64,
    pub seed_policy: SeedPolicy,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_prog: 0.1,
            sigma_out: 0.02,
            dac_bits: BitDepth::Finite(8),
            adc_bits: BitDepth::Finite(8),
            input_clip: 3.0,
            seed_policy: SeedPolicy::FreshPerPass,
        }
    }
}

impl NoiseConfig {
    /// Noise-free, infinite-resolution device: the zero-noise fidelity
    /// anchor. Input clipping is disabled so the analog path is an exact
    /// matrix-vector multiply.
    pub fn ideal() -> Self {
        NoiseConfig {
            sigma_prog: 0.0,
            sigma_out: 0.0,
            dac_bits: BitDepth::Infinite,
            adc_bits: BitDepth::Infinite,
            input_clip: f64::INFINITY,
            seed_policy: SeedPolicy::FixedPerProgramming,
        }
    }

    pub fn is_ideal(&self) -> bool {
        self.sigma_prog == 0.0
            && self.sigma_out == 0.0
            && self.dac_bits.is_infinite()
            && self.adc_bits.is_infinite()
    }

    pub fn with_sigma_prog(mut self, sigma: f64) -> Self {
        self.sigma_prog = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_prog < 0.0 || !self.sigma_prog.is_finite() {
            return Err(Error::config("sigma_prog must be >= 0"));
        }
        if self.sigma_out < 0.0 || !self.sigma_out.is_finite() {
            return Err(Error::config("sigma_out must be >= 0"));
        }
        for (name, b) in [("dac_bits", self.dac_bits), ("adc_bits", self.adc_bits)] {
            if let BitDepth::Finite(n) = b {
                if !(1..=16).contains(&n) {
                    return Err(Error::config(format!(
                        "{name} must be in 1..=16 or \"infinite\", got {n}"
                    )));
                }
            }
        }
        if !(self.input_clip > 0.0) {
            return Err(Error::config("input_clip must be > 0"));
        }
        Ok(())
    }
}

/// Uniform quantizer over the symmetric range ±range.
///
/// With n bits the grid holds 2^n levels spanning [-range, range] inclusive,
/// so zero sits on a decision boundary and the 1-bit grid is {-range, +range}.
/// Infinite bit depth is the identity.
pub fn quantize_uniform(x: f64, bits: BitDepth, range: f64) -> f64 {
    let n = match bits {
        BitDepth::Infinite => return x,
        BitDepth::Finite(n) => n,
    };
    if range <= 0.0 {
        return 0.0;
    }
    let levels = (1u64 << n) as f64;
    let step = 2.0 * range / (levels - 1.0);
    let clipped = x.clamp(-range, range);
    let idx = ((clipped + range) / step).round();
    -range + idx * step
}

/// Tile cell geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGeometry {
    pub rows: usize,
    pub cols: usize,
}

impl Default for TileGeometry {
    fn default() -> Self {
        // Common crossbar macro size.
        TileGeometry { rows: 512, cols: 512 }
    }
}

/// One crossbar holding a programmed (noisy) weight block plus its scale.
///
/// Immutable after programming; `reprogram` yields a new tile value.
#[derive(Clone, Debug)]
pub struct AnalogTile {
    geometry: TileGeometry,
    nominal: Tensor,
    programmed: Tensor,
    scale: f64,
    rng_seed: u64,
}

impl AnalogTile {
    pub fn nominal(&self) -> &Tensor {
        &self.nominal
    }
    pub fn programmed(&self) -> &Tensor {
        &self.programmed
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }
    pub fn geometry(&self) -> TileGeometry {
        self.geometry
    }
    /// Occupied block shape (r, c).
    pub fn block_shape(&self) -> (usize, usize) {
        (self.nominal.shape()[0], self.nominal.shape()[1])
    }
}

/// Program a weight block onto a tile.
///
/// scale = max|block| (1 if all-zero); programmed = clip(block/scale +
/// sigma_prog * eps, -1, 1) with eps i.i.d. standard normal from `seed`.
pub fn program_tile(
    block: &Tensor,
    geometry: TileGeometry,
    cfg: &NoiseConfig,
    seed: u64,
) -> Result<AnalogTile> {
    if block.shape().len() != 2 {
        return Err(Error::mapping("tile block must be 2-D"));
    }
    let (r, c) = (block.shape()[0], block.shape()[1]);
    if r > geometry.rows || c > geometry.cols {
        return Err(Error::mapping(format!(
            "block {r}x{c} exceeds tile geometry {}x{}",
            geometry.rows, geometry.cols
        )));
    }
    let max_abs = block.max_abs();
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs };
    let mut rng = rng::stream(seed, "tile-programming", 0);
    let data: Vec<f64> = block
        .data()
        .iter()
        .map(|w| {
            let noise = if cfg.sigma_prog > 0.0 {
                cfg.sigma_prog * rng::normal(&mut rng)
            } else {
                0.0
            };
            (w / scale + noise).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(AnalogTile {
        geometry,
        nominal: block.clone(),
        programmed: Tensor::new(vec![r, c], data)?,
        scale,
        rng_seed: seed,
    })
}

/// Redraw programming noise from a new seed; the nominal block is unchanged.
pub fn reprogram(tile: &AnalogTile, cfg: &NoiseConfig, new_seed: u64) -> AnalogTile {
    program_tile(&tile.nominal, tile.geometry, cfg, new_seed)
        .expect("reprogram of a valid tile cannot fail")
}

/// Noisy matrix-vector multiply: y = scale * ADC(programmed^T · DAC(x) + out-noise).
///
/// The ADC range self-calibrates to the per-call max-abs raw output.
pub fn analog_mvm(
    tile: &AnalogTile,
    x: &[f64],
    cfg: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let (r, c) = tile.block_shape();
    if x.len() != r {
        return Err(Error::shape(format!(
            "analog_mvm: input length {} != tile rows {r}",
            x.len()
        )));
    }
    let mut y_raw = vec![0.0; c];
    let prog = tile.programmed.data();
    for (i, &xi) in x.iter().enumerate() {
        let xq = quantize_uniform(xi.clamp(-cfg.input_clip, cfg.input_clip), cfg.dac_bits, cfg.input_clip);
        if xq == 0.0 {
            continue;
        }
        let row = &prog[i * c..(i + 1) * c];
        for (acc, &w) in y_raw.iter_mut().zip(row) {
            *acc += w * xq;
        }
    }
    let adc_range = y_raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(ADC_RANGE_TINY);
    let y = y_raw
        .iter()
        .map(|&v| {
            let noisy = if cfg.sigma_out > 0.0 {
                v + cfg.sigma_out * rng::normal(rng)
            } else {
                v
            };
            tile.scale * quantize_uniform(noisy, cfg.adc_bits, adc_range)
        })
        .collect();
    Ok(y)
}

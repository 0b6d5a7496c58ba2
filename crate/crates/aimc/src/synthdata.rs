//! Deterministic synthetic binary-segmentation data: bright elliptical blobs
//! on a dark noisy background. Each sample is a pure function of
//! (seed, index), so datasets can be regenerated in any order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    /// Grayscale image, shape [1, H, W], values in [0, 1].
    pub image: Tensor,
    /// Binary foreground mask, shape [H, W].
    pub mask: Tensor,
    pub seed: u64,
    pub index: u64,
}

/// Foreground coverage accepted by the generator.
pub const FG_FRACTION_RANGE: (f64, f64) = (0.02, 0.6);

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Generate sample `index` of the dataset keyed by `seed`.
pub fn gen_sample(h: usize, w: usize, difficulty: f64, seed: u64, index: u64) -> Sample {
    assert!(h >= 16 && w >= 16, "image dims must be >= 16");
    assert!((0.0..=1.0).contains(&difficulty));
    let mut rng = stream(seed, "synth-sample", index);
    let min_dim = h.min(w) as f64;

    // Rejection-sample ellipse sets until the foreground fraction is sane.
    let mask = loop {
        let n_ellipses = rng.gen_range(1..=3usize);
        let ellipses: Vec<Ellipse> = (0..n_ellipses)
            .map(|_| Ellipse {
                cx: rng.gen_range(0.2..0.8) * w as f64,
                cy: rng.gen_range(0.2..0.8) * h as f64,
                a: rng.gen_range(0.08..0.30) * min_dim,
                b: rng.gen_range(0.08..0.30) * min_dim,
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            })
            .collect();
        let mut m = Tensor::zeros(vec![h, w]);
        let mut fg = 0usize;
        for y in 0..h {
            for x in 0..w {
                let hit = ellipses
                    .iter()
                    .any(|e| e.contains(x as f64 + 0.5, y as f64 + 0.5));
                if hit {
                    m.data_mut()[y * w + x] = 1.0;
                    fg += 1;
                }
            }
        }
        let frac = fg as f64 / (h * w) as f64;
        if (FG_FRACTION_RANGE.0..=FG_FRACTION_RANGE.1).contains(&frac) {
            break m;
        }
    };

    let noise_std = 0.05 + 0.15 * difficulty;
    let mut image = Tensor::zeros(vec![1, h, w]);
    for p in 0..h * w {
        let fg = mask.data()[p];
        let brightness = fg * (0.6 + 0.2 * rng.gen_range(0.0..1.0));
        let v = brightness + 0.2 + noise_std * normal(&mut rng);
        image.data_mut()[p] = v.clamp(0.0, 1.0);
    }
    Sample { image, mask, seed, index }
}

/// Generate a square dataset of `n` samples at `hw`×`hw`.
pub fn gen_dataset(n: usize, hw: usize, difficulty: f64, seed: u64) -> Vec<Sample> {
    gen_dataset_rect(n, hw, hw, difficulty, seed)
}

pub fn gen_dataset_rect(n: usize, h: usize, w: usize, difficulty: f64, seed: u64) -> Vec<Sample> {
    (0..n as u64)
        .map(|i| gen_sample(h, w, difficulty, seed, i))
        .collect()
}

/// Validate dataset-generation parameters coming from configs/CLI.
pub fn validate_dims(n: usize, h: usize, w: usize, difficulty: f64) -> Result<()> {
    if n < 1 {
        return Err(Error::config("dataset size must be >= 1"));
    }
    if h < 16 || w < 16 {
        return Err(Error::config("image dims must be >= 16"));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::config("difficulty must be in [0, 1]"));
    }
    Ok(())
}

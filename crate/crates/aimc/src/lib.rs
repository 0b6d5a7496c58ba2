//! Desk-scale analog in-memory-computing (AIMC) simulator: crossbar-tile
//! inference with programming/readout noise, layer-to-tile mapping metrics,
//! hardware-aware training, Monte-Carlo uncertainty maps, and an analytic
//! pipeline latency model, exercised on toy segmentation networks over
//! synthetic data.

pub mod analog;
pub mod config;
pub mod error;
pub mod evalx;
pub mod mapping;
pub mod network;
pub mod pipeline;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};

//! Versioned JSON checkpoints: the contract between `train` and the
//! `sweep`/`uncertainty` commands.

use super::graph::{NetworkSpec, Param, PresetId};
use super::presets::build_preset;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub preset_id: PresetId,
    pub width_scale: usize,
    pub attention: bool,
    pub init_seed: u64,
    /// (node id, node name, weight, bias) for every parameterized node.
    pub params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
pub struct CheckpointParam {
    pub node: usize,
    pub name: String,
    pub weight: crate::tensor::Tensor,
    pub bias: Option<Vec<f64>>,
}

impl NetworkSpec {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .params
            .iter()
            .enumerate()
            .filter_map(|(id, p)| {
                p.as_ref().map(|p| CheckpointParam {
                    node: id,
                    name: self.nodes[id].name.clone(),
                    weight: p.weight.clone(),
                    bias: p.bias.clone(),
                })
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            preset_id: self.preset_id,
            width_scale: self.width_scale,
            attention: self.attention,
            init_seed: self.init_seed,
            params,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<NetworkSpec> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let mut net = build_preset(ckpt.preset_id, ckpt.width_scale, ckpt.attention, ckpt.init_seed)?;
        for p in &ckpt.params {
            let slot = net
                .params
                .get_mut(p.node)
                .and_then(|s| s.as_mut())
                .ok_or_else(|| Error::config(format!("checkpoint param for non-param node {}", p.node)))?;
            if slot.weight.shape() != p.weight.shape() {
                return Err(Error::config(format!(
                    "checkpoint weight shape mismatch at node {} ({})",
                    p.node, p.name
                )));
            }
            *slot = Param {
                weight: p.weight.clone(),
                bias: p.bias.clone(),
            };
        }
        Ok(net)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<NetworkSpec> {
        let json = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&json)?;
        NetworkSpec::from_checkpoint(&ckpt)
    }
}

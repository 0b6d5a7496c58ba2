//! Analog-mode network execution: every mapped weight block is routed
//! through programmed tiles and the noisy MVM; pooling, concat, residual
//! adds, attention softmax and activations stay on the digital periphery.

use super::graph::{Act, NetworkSpec, NodeOp};
use crate::analog::{
    analog_mvm, program_tile, quantize_uniform, AnalogTile, NoiseConfig, SeedPolicy, TileGeometry,
};
use crate::error::{Error, Result};
use crate::mapping::{partition, Block};
use crate::rng;
use crate::tensor::{conv_out_dim, im2col, Tensor};
use rand_chacha::ChaCha8Rng;

/// A network whose mapped weights are programmed onto crossbar tiles.
pub struct ProgrammedNet<'a> {
    net: &'a NetworkSpec,
    cfg: NoiseConfig,
    geometry: TileGeometry,
    prog_seed: u64,
    tiles: Vec<Option<Vec<(Block, AnalogTile)>>>,
}

fn extract_block(w: &Tensor, b: &Block) -> Tensor {
    let cols = w.shape()[1];
    let mut data = Vec::with_capacity(b.area());
    for r in b.row_start..b.row_end {
        data.extend_from_slice(&w.data()[r * cols + b.col_start..r * cols + b.col_end]);
    }
    Tensor::new(vec![b.rows(), b.cols()], data).expect("block extraction")
}

fn program_all(
    net: &NetworkSpec,
    cfg: &NoiseConfig,
    geometry: TileGeometry,
    prog_seed: u64,
) -> Result<Vec<Option<Vec<(Block, AnalogTile)>>>> {
    let mut tiles = Vec::with_capacity(net.nodes.len());
    for (id, p) in net.params.iter().enumerate() {
        match p {
            None => tiles.push(None),
            Some(p) => {
                let (rows, cols) = (p.weight.shape()[0], p.weight.shape()[1]);
                let node_seed = rng::derive_seed(prog_seed, "node-programming", id as u64);
                let blocks = partition(rows, cols, geometry);
                let mut programmed = Vec::with_capacity(blocks.len());
                for (bi, b) in blocks.into_iter().enumerate() {
                    let sub = extract_block(&p.weight, &b);
                    let seed = rng::derive_seed(node_seed, "tile", bi as u64);
                    programmed.push((b, program_tile(&sub, geometry, cfg, seed)?));
                }
                tiles.push(Some(programmed));
            }
        }
    }
    Ok(tiles)
}

impl NetworkSpec {
    /// Program every mapped weight block onto tiles.
    pub fn program(
        &self,
        cfg: &NoiseConfig,
        geometry: TileGeometry,
        prog_seed: u64,
    ) -> Result<ProgrammedNet<'_>> {
        cfg.validate()?;
        Ok(ProgrammedNet {
            net: self,
            cfg: *cfg,
            geometry,
            prog_seed,
            tiles: program_all(self, cfg, geometry, prog_seed)?,
        })
    }
}

impl ProgrammedNet<'_> {
    /// Redraw all programming noise from a new seed.
    pub fn reprogram(&mut self, new_seed: u64) -> Result<()> {
        self.prog_seed = new_seed;
        self.tiles = program_all(self.net, &self.cfg, self.geometry, new_seed)?;
        Ok(())
    }

    pub fn prog_seed(&self) -> u64 {
        self.prog_seed
    }

    /// One analog forward pass. Under `fresh-per-pass` the pass reprograms
    /// tiles from a seed derived from `pass_seed`; under
    /// `fixed-per-programming` the stored tiles are reused and only output
    /// noise is redrawn.
    pub fn forward(&self, x: &Tensor, pass_seed: u64) -> Result<Tensor> {
        let fresh;
        let tiles = match self.cfg.seed_policy {
            SeedPolicy::FreshPerPass => {
                let seed = rng::derive_seed(pass_seed, "fresh-pass-programming", 0);
                fresh = program_all(self.net, &self.cfg, self.geometry, seed)?;
                &fresh
            }
            SeedPolicy::FixedPerProgramming => &self.tiles,
        };
        let mut out_rng = rng::stream(pass_seed, "analog-output-noise", 0);
        self.run(x, tiles, &mut out_rng)
    }

    fn run(
        &self,
        x: &Tensor,
        tiles: &[Option<Vec<(Block, AnalogTile)>>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let net = self.net;
        let cfg = &self.cfg;
        if x.shape().len() != 3 {
            return Err(Error::shape("network input must be C×H×W"));
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(net.nodes.len());
        for (id, node) in net.nodes.iter().enumerate() {
            let mut y = match node.op {
                NodeOp::Input => x.clone(),
                NodeOp::Conv2d { out_ch, k, stride, pad, .. } => {
                    let xin = &values[node.inputs[0]];
                    let cols = im2col(xin, k, k, stride, pad)?;
                    let node_tiles = tiles[id].as_ref().expect("conv tiles");
                    let mut y = apply_tiles(node_tiles, &cols, out_ch, cfg, rng)?;
                    if let Some(b) = net.params[id].as_ref().and_then(|p| p.bias.as_deref()) {
                        add_row_bias(&mut y, b);
                    }
                    let ho = conv_out_dim(xin.shape()[1], k, stride, pad)
                        .ok_or_else(|| Error::shape("conv: empty output"))?;
                    let wo = conv_out_dim(xin.shape()[2], k, stride, pad)
                        .ok_or_else(|| Error::shape("conv: empty output"))?;
                    y.reshape(vec![out_ch, ho, wo])?
                }
                NodeOp::PatchEmbed { patch, embed, .. } => {
                    let xin = &values[node.inputs[0]];
                    let cols = im2col(xin, patch, patch, patch, 0)?;
                    let node_tiles = tiles[id].as_ref().expect("patch tiles");
                    let mut y = apply_tiles(node_tiles, &cols, embed, cfg, rng)?;
                    if let Some(b) = net.params[id].as_ref().and_then(|p| p.bias.as_deref()) {
                        add_row_bias(&mut y, b);
                    }
                    y.reshape(vec![embed, xin.shape()[1] / patch, xin.shape()[2] / patch])?
                }
                NodeOp::DepthwiseConv2d { ch, k } => {
                    let xin = &values[node.inputs[0]];
                    let node_tiles = tiles[id].as_ref().expect("depthwise tiles");
                    let mut y = apply_depthwise(node_tiles, xin, ch, k, cfg, rng)?;
                    if let Some(b) = net.params[id].as_ref().and_then(|p| p.bias.as_deref()) {
                        add_row_bias(&mut y, b);
                    }
                    y.reshape(vec![ch, xin.shape()[1], xin.shape()[2]])?
                }
                NodeOp::Linear { in_f, out_f } => {
                    let xin = &values[node.inputs[0]];
                    if xin.len() != in_f {
                        return Err(Error::shape("linear input length mismatch"));
                    }
                    let cols = Tensor::new(vec![in_f, 1], xin.data().to_vec())?;
                    let node_tiles = tiles[id].as_ref().expect("linear tiles");
                    let mut y = apply_tiles(node_tiles, &cols, out_f, cfg, rng)?;
                    if let Some(b) = net.params[id].as_ref().and_then(|p| p.bias.as_deref()) {
                        add_row_bias(&mut y, b);
                    }
                    y.reshape(vec![out_f])?
                }
                // digital periphery, identical to the reference path
                _ => digital_node(net, id, &values)?,
            };
            if node.act != Act::None {
                for v in y.data_mut() {
                    *v = apply_act(node.act, *v);
                }
            }
            values.push(y);
        }
        Ok(values.swap_remove(net.output))
    }
}

fn apply_act(act: Act, x: f64) -> f64 {
    match act {
        Act::None => x,
        Act::Relu => x.max(0.0),
        Act::Gelu => {
            let c = 0.7978845608028654;
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
        Act::Sigmoid => 1.0 / (1.0 + (-x).exp()),
    }
}

/// Non-parameterized ops run digitally, via the same helpers as the
/// reference path.
fn digital_node(net: &NetworkSpec, id: usize, values: &[Tensor]) -> Result<Tensor> {
    use super::graph;
    let node = &net.nodes[id];
    match node.op {
        NodeOp::MaxPool2 => Ok(graph::maxpool2(&values[node.inputs[0]])?.0),
        NodeOp::UpsampleNearest2 => graph::upsample2(&values[node.inputs[0]]),
        NodeOp::Unpatchify { patch } => graph::unpatchify(&values[node.inputs[0]], patch),
        NodeOp::Concat => {
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
            graph::concat_channels(&ins)
        }
        NodeOp::Add => {
            let a = &values[node.inputs[0]];
            let b = &values[node.inputs[1]];
            if a.shape() != b.shape() {
                return Err(Error::shape("add shape mismatch"));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        NodeOp::AttnCore => Ok(graph::attn_forward(
            &values[node.inputs[0]],
            &values[node.inputs[1]],
            &values[node.inputs[2]],
        )?
        .0),
        _ => Err(Error::shape(format!("unexpected analog periphery op {:?}", node.op))),
    }
}

fn add_row_bias(y: &mut Tensor, bias: &[f64]) {
    let ncols = y.shape()[1];
    for (o, &b) in bias.iter().enumerate() {
        for v in &mut y.data_mut()[o * ncols..(o + 1) * ncols] {
            *v += b;
        }
    }
}

/// Route every column of the unfolded input through the node's tiles:
/// per column, each tile computes one noisy MVM over its row slice and the
/// partial outputs accumulate digitally over row-blocks.
fn apply_tiles(
    tiles: &[(Block, AnalogTile)],
    cols: &Tensor,
    out_ch: usize,
    cfg: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (rows, n) = (cols.shape()[0], cols.shape()[1]);
    let mut out = vec![0.0; out_ch * n];
    let mut x = vec![0.0; rows];
    for j in 0..n {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = cols.at2(i, j);
        }
        for (b, tile) in tiles {
            let y = analog_mvm(tile, &x[b.row_start..b.row_end], cfg, rng)?;
            for (c, &yv) in y.iter().enumerate() {
                out[(b.col_start + c) * n + j] += yv;
            }
        }
    }
    Tensor::new(vec![out_ch, n], out)
}

/// Depthwise analog product: column c of the tile only ever sees channel c's
/// patch, so the MVM decomposes into per-channel dot products sharing one
/// DAC/ADC convention with `analog_mvm` (per-position ADC range over the
/// channel vector).
fn apply_depthwise(
    tiles: &[(Block, AnalogTile)],
    xin: &Tensor,
    ch: usize,
    k: usize,
    cfg: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if tiles.len() != 1 {
        return Err(Error::mapping(
            "depthwise blocks larger than one tile are not supported",
        ));
    }
    let tile = &tiles[0].1;
    let kk = k * k;
    let pad = k / 2;
    let cols = im2col(xin, k, k, 1, pad)?;
    let n = cols.shape()[1];
    let prog = tile.programmed();
    let mut out = vec![0.0; ch * n];
    let mut y_raw = vec![0.0; ch];
    for j in 0..n {
        for (c, yv) in y_raw.iter_mut().enumerate() {
            let mut acc = 0.0;
            for r in 0..kk {
                let xq = quantize_uniform(
                    cols.at2(c * kk + r, j).clamp(-cfg.input_clip, cfg.input_clip),
                    cfg.dac_bits,
                    cfg.input_clip,
                );
                acc += prog.at2(r, c) * xq;
            }
            *yv = acc;
        }
        let range = y_raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (c, &yv) in y_raw.iter().enumerate() {
            let noisy = if cfg.sigma_out > 0.0 {
                yv + cfg.sigma_out * rng::normal(rng)
            } else {
                yv
            };
            out[c * n + j] = tile.scale() * quantize_uniform(noisy, cfg.adc_bits, range);
        }
    }
    Tensor::new(vec![ch, n], out)
}

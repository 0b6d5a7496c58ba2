//! Declarative layer graph with manual reverse-mode gradients.
//!
//! Nodes form a DAG built in topological order (every input id precedes the
//! node). The layer vocabulary is fixed and small, so gradients are written
//! by hand and checked against central finite differences.

use crate::analog::{quantize_uniform, NoiseConfig};
use crate::error::{Error, Result};
use crate::mapping::LayerSpec;
use crate::rng;
use crate::tensor::{col2im, conv_out_dim, im2col, Tensor};
use serde::{Deserialize, Serialize};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    None,
    Relu,
    Gelu,
    Sigmoid,
}

impl Act {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Act::None => x,
            Act::Relu => x.max(0.0),
            Act::Gelu => gelu(x),
            Act::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative as a function of the pre-activation value.
    fn deriv(&self, x: f64) -> f64 {
        match self {
            Act::None => 1.0,
            Act::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Act::Gelu => gelu_deriv(x),
            Act::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Graph node operations. Weights of mapped ops are stored in their matrix
/// view (rows = inputs consumed per MVM, cols = outputs produced), which is
/// the exact layout the tile mapper partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeOp {
    Input,
    /// weight [in_ch*k*k, out_ch], bias [out_ch]
    Conv2d { in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize },
    /// stride 1, same padding; weight [k*k, ch], bias [ch]
    DepthwiseConv2d { ch: usize, k: usize },
    /// weight [in_ch*p*p, embed], bias [embed]
    PatchEmbed { in_ch: usize, patch: usize, embed: usize },
    /// flattens its input; weight [in_f, out_f], bias [out_f]
    Linear { in_f: usize, out_f: usize },
    MaxPool2,
    UpsampleNearest2,
    /// channel concat of all inputs (equal H, W)
    Concat,
    /// elementwise sum of two inputs
    Add,
    /// single-head self-attention over the token grid; inputs (q, k, v)
    /// as [E,h,w]; parameter-free (projections are separate 1x1 convs)
    AttnCore,
    /// [p*p, h, w] -> [1, h*p, w*p]
    Unpatchify { patch: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    pub act: Act,
    pub inputs: Vec<NodeId>,
    /// Marks 1x1 convs that act as attention projections, for mapping reports.
    pub attn_proj: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ParamGrad {
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetId {
    ToyUnet,
    ToyUnetpp,
    ToyIsotropic,
}

impl std::str::FromStr for PresetId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy_unet" => Ok(PresetId::ToyUnet),
            "toy_unetpp" => Ok(PresetId::ToyUnetpp),
            "toy_isotropic" => Ok(PresetId::ToyIsotropic),
            other => Err(Error::config(format!("unknown preset: {other}"))),
        }
    }
}

impl std::fmt::Display for PresetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PresetId::ToyUnet => "toy_unet",
            PresetId::ToyUnetpp => "toy_unetpp",
            PresetId::ToyIsotropic => "toy_isotropic",
        };
        f.write_str(s)
    }
}

/// Declarative layer graph plus its parameter store.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    pub preset_id: PresetId,
    pub width_scale: usize,
    pub attention: bool,
    pub init_seed: u64,
    pub nodes: Vec<Node>,
    pub params: Vec<Option<Param>>,
    pub output: NodeId,
}

/// Per-node forward state kept for the backward pass.
pub enum Aux {
    None,
    /// im2col matrix actually consumed by the matmul (post-DAC when
    /// converters are simulated, so the backward is straight-through).
    Cols(Tensor),
    /// flattened input actually consumed by a linear node
    Vec(Vec<f64>),
    /// winner index per pooled output element
    Argmax(Vec<usize>),
    /// attention row-softmax matrix [T x T]
    Attn(Tensor),
}

pub struct FwdTrace {
    pub values: Vec<Tensor>,
    pub pre_act: Vec<Option<Tensor>>,
    pub aux: Vec<Aux>,
}

/// Options threading through a differentiable forward pass.
#[derive(Default)]
pub struct FwdOptions<'a> {
    /// Per-node weight overrides (noise-perturbed weights during HWA training).
    pub w_override: Option<&'a [Option<Tensor>]>,
    /// Simulate DAC/ADC converters in the training forward (straight-through).
    pub converters: Option<&'a NoiseConfig>,
}

impl NetworkSpec {
    pub fn layer_spec(&self, id: NodeId) -> Option<LayerSpec> {
        let node = &self.nodes[id];
        let has_bias = self
            .params
            .get(id)
            .and_then(|p| p.as_ref())
            .map_or(true, |p| p.bias.is_some());
        match node.op {
            NodeOp::Conv2d { in_ch, out_ch, k, stride, pad } => {
                if node.attn_proj {
                    Some(LayerSpec::AttentionProj {
                        in_features: in_ch,
                        out_features: out_ch,
                        has_bias,
                    })
                } else {
                    Some(LayerSpec::Conv2d { in_ch, out_ch, kh: k, kw: k, stride, pad, has_bias })
                }
            }
            NodeOp::DepthwiseConv2d { ch, k } => Some(LayerSpec::DepthwiseConv2d {
                channels: ch,
                kh: k,
                kw: k,
                stride: 1,
                pad: k / 2,
                has_bias,
            }),
            NodeOp::PatchEmbed { in_ch, patch, embed } => {
                Some(LayerSpec::PatchEmbed { in_ch, patch, embed_dim: embed, has_bias })
            }
            NodeOp::Linear { in_f, out_f } => {
                Some(LayerSpec::Linear { in_features: in_f, out_features: out_f, has_bias })
            }
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }

    /// Total concat fan-in beyond the first input: a proxy for skip wiring.
    pub fn skip_edge_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.op == NodeOp::Concat)
            .map(|n| n.inputs.len() - 1)
            .sum()
    }

    /// Initialize all parameters (He init on fan-in, zero bias).
    pub fn init_params(&mut self, seed: u64) {
        self.init_seed = seed;
        for id in 0..self.nodes.len() {
            let shapes = weight_shape(&self.nodes[id].op);
            if let Some((rows, cols, bias_len)) = shapes {
                let mut r = rng::stream(seed, "param-init", id as u64);
                let std = (2.0 / rows as f64).sqrt();
                let data: Vec<f64> = (0..rows * cols).map(|_| std * rng::normal(&mut r)).collect();
                self.params[id] = Some(Param {
                    weight: Tensor::new(vec![rows, cols], data).expect("init weight"),
                    bias: Some(vec![0.0; bias_len]),
                });
            }
        }
    }

    pub fn forward_digital(&self, x: &Tensor) -> Result<Tensor> {
        let trace = self.forward_trace(x, &FwdOptions::default())?;
        Ok(trace.values[self.output].clone())
    }

    fn effective_weight<'a>(&'a self, opt: &'a FwdOptions, id: NodeId) -> Result<&'a Tensor> {
        if let Some(ov) = opt.w_override {
            if let Some(w) = ov.get(id).and_then(|o| o.as_ref()) {
                return Ok(w);
            }
        }
        self.params[id]
            .as_ref()
            .map(|p| &p.weight)
            .ok_or_else(|| Error::shape(format!("node {id} has no parameters")))
    }

    fn bias_of(&self, id: NodeId) -> Option<&[f64]> {
        self.params[id].as_ref().and_then(|p| p.bias.as_deref())
    }

    /// Differentiable forward pass caching everything backward needs.
    pub fn forward_trace(&self, x: &Tensor, opt: &FwdOptions) -> Result<FwdTrace> {
        if x.shape().len() != 3 {
            return Err(Error::shape("network input must be C×H×W"));
        }
        let n = self.nodes.len();
        let mut values: Vec<Tensor> = Vec::with_capacity(n);
        let mut pre_act: Vec<Option<Tensor>> = Vec::with_capacity(n);
        let mut aux: Vec<Aux> = Vec::with_capacity(n);

        for id in 0..n {
            let node = &self.nodes[id];
            let (mut y, a) = match node.op {
                NodeOp::Input => (x.clone(), Aux::None),
                NodeOp::Conv2d { in_ch, out_ch, k, stride, pad } => {
                    let xin = &values[node.inputs[0]];
                    if xin.shape()[0] != in_ch {
                        return Err(Error::shape(format!(
                            "{}: expected {in_ch} channels, got {}",
                            node.name,
                            xin.shape()[0]
                        )));
                    }
                    let mut cols = im2col(xin, k, k, stride, pad)?;
                    if let Some(cfg) = opt.converters {
                        dac_inplace(&mut cols, cfg);
                    }
                    let w = self.effective_weight(opt, id)?;
                    let mut y = matmul_tn(w, &cols);
                    if let Some(cfg) = opt.converters {
                        adc_columns_inplace(&mut y, cfg);
                    }
                    if let Some(b) = self.bias_of(id) {
                        add_row_bias(&mut y, b);
                    }
                    let ho = conv_out_dim(xin.shape()[1], k, stride, pad)
                        .ok_or_else(|| Error::shape("conv: empty output"))?;
                    let wo = conv_out_dim(xin.shape()[2], k, stride, pad)
                        .ok_or_else(|| Error::shape("conv: empty output"))?;
                    (y.reshape(vec![out_ch, ho, wo])?, Aux::Cols(cols))
                }
                NodeOp::PatchEmbed { in_ch, patch, embed } => {
                    let xin = &values[node.inputs[0]];
                    if xin.shape()[0] != in_ch
                        || xin.shape()[1] % patch != 0
                        || xin.shape()[2] % patch != 0
                    {
                        return Err(Error::shape(format!("{}: bad patch_embed input", node.name)));
                    }
                    let mut cols = im2col(xin, patch, patch, patch, 0)?;
                    if let Some(cfg) = opt.converters {
                        dac_inplace(&mut cols, cfg);
                    }
                    let w = self.effective_weight(opt, id)?;
                    let mut y = matmul_tn(w, &cols);
                    if let Some(cfg) = opt.converters {
                        adc_columns_inplace(&mut y, cfg);
                    }
                    if let Some(b) = self.bias_of(id) {
                        add_row_bias(&mut y, b);
                    }
                    let gh = xin.shape()[1] / patch;
                    let gw = xin.shape()[2] / patch;
                    (y.reshape(vec![embed, gh, gw])?, Aux::Cols(cols))
                }
                NodeOp::DepthwiseConv2d { ch, k } => {
                    let xin = &values[node.inputs[0]];
                    if xin.shape()[0] != ch {
                        return Err(Error::shape(format!("{}: depthwise channel mismatch", node.name)));
                    }
                    let pad = k / 2;
                    let mut cols = im2col(xin, k, k, 1, pad)?;
                    if let Some(cfg) = opt.converters {
                        dac_inplace(&mut cols, cfg);
                    }
                    let w = self.effective_weight(opt, id)?;
                    let (h, wd) = (xin.shape()[1], xin.shape()[2]);
                    let mut y = depthwise_from_cols(&cols, w, ch, k, h * wd);
                    if let Some(cfg) = opt.converters {
                        adc_columns_inplace(&mut y, cfg);
                    }
                    if let Some(b) = self.bias_of(id) {
                        add_row_bias(&mut y, b);
                    }
                    (y.reshape(vec![ch, h, wd])?, Aux::Cols(cols))
                }
                NodeOp::Linear { in_f, out_f } => {
                    let xin = &values[node.inputs[0]];
                    if xin.len() != in_f {
                        return Err(Error::shape(format!(
                            "{}: linear expects {in_f} inputs, got {}",
                            node.name,
                            xin.len()
                        )));
                    }
                    let mut xv = xin.data().to_vec();
                    if let Some(cfg) = opt.converters {
                        for v in &mut xv {
                            *v = quantize_uniform(
                                v.clamp(-cfg.input_clip, cfg.input_clip),
                                cfg.dac_bits,
                                cfg.input_clip,
                            );
                        }
                    }
                    let w = self.effective_weight(opt, id)?;
                    let mut y = vec![0.0; out_f];
                    for (i, &xi) in xv.iter().enumerate() {
                        for (acc, &wv) in y.iter_mut().zip(&w.data()[i * out_f..(i + 1) * out_f]) {
                            *acc += wv * xi;
                        }
                    }
                    if let Some(cfg) = opt.converters {
                        let range = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
                        for v in &mut y {
                            *v = quantize_uniform(*v, cfg.adc_bits, range);
                        }
                    }
                    if let Some(b) = self.bias_of(id) {
                        for (v, bv) in y.iter_mut().zip(b) {
                            *v += bv;
                        }
                    }
                    (Tensor::new(vec![out_f], y)?, Aux::Vec(xv))
                }
                NodeOp::MaxPool2 => {
                    let xin = &values[node.inputs[0]];
                    let (y, idx) = maxpool2(xin)?;
                    (y, Aux::Argmax(idx))
                }
                NodeOp::UpsampleNearest2 => (upsample2(&values[node.inputs[0]])?, Aux::None),
                NodeOp::Concat => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                    (concat_channels(&ins)?, Aux::None)
                }
                NodeOp::Add => {
                    let a = &values[node.inputs[0]];
                    let b = &values[node.inputs[1]];
                    if a.shape() != b.shape() {
                        return Err(Error::shape(format!("{}: add shape mismatch", node.name)));
                    }
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                    (Tensor::new(a.shape().to_vec(), data)?, Aux::None)
                }
                NodeOp::AttnCore => {
                    let q = &values[node.inputs[0]];
                    let k = &values[node.inputs[1]];
                    let v = &values[node.inputs[2]];
                    let (y, a) = attn_forward(q, k, v)?;
                    (y, Aux::Attn(a))
                }
                NodeOp::Unpatchify { patch } => (unpatchify(&values[node.inputs[0]], patch)?, Aux::None),
            };

            let pre = if node.act == Act::None {
                None
            } else {
                let pre = y.clone();
                for v in y.data_mut() {
                    *v = node.act.apply(*v);
                }
                Some(pre)
            };
            values.push(y);
            pre_act.push(pre);
            aux.push(a);
        }

        Ok(FwdTrace { values, pre_act, aux })
    }

    /// Reverse-mode gradients for all parameters given dL/d(output).
    pub fn backward(
        &self,
        trace: &FwdTrace,
        opt: &FwdOptions,
        d_output: &Tensor,
    ) -> Result<Vec<Option<ParamGrad>>> {
        let n = self.nodes.len();
        let mut d_vals: Vec<Option<Tensor>> = vec![None; n];
        d_vals[self.output] = Some(d_output.clone());
        let mut grads: Vec<Option<ParamGrad>> = (0..n).map(|_| None).collect();

        for id in (0..n).rev() {
            let Some(mut g) = d_vals[id].take() else { continue };
            let node = &self.nodes[id];

            // through the activation
            if let Some(pre) = &trace.pre_act[id] {
                for (gv, &pv) in g.data_mut().iter_mut().zip(pre.data()) {
                    *gv *= node.act.deriv(pv);
                }
            }

            match node.op {
                NodeOp::Input => {}
                NodeOp::Conv2d { out_ch, k, .. }
                | NodeOp::PatchEmbed { embed: out_ch, patch: k, .. } => {
                    let (stride, pad) = match node.op {
                        NodeOp::Conv2d { stride, pad, .. } => (stride, pad),
                        _ => (k, 0),
                    };
                    let Aux::Cols(cols) = &trace.aux[id] else {
                        return Err(Error::shape("missing conv cache"));
                    };
                    let ncols = cols.shape()[1];
                    let g2 = Tensor::new(vec![out_ch, ncols], g.data().to_vec())?;
                    let dw = matmul_nt(cols, &g2);
                    let db = (0..out_ch)
                        .map(|o| g2.data()[o * ncols..(o + 1) * ncols].iter().sum())
                        .collect();
                    grads[id] = Some(ParamGrad { weight: dw, bias: Some(db) });
                    let w = self.effective_weight(opt, id)?;
                    let dcols = crate::tensor::matmul(w, &g2)?;
                    let xin = &trace.values[node.inputs[0]];
                    let dx = col2im(
                        &dcols,
                        xin.shape()[0],
                        xin.shape()[1],
                        xin.shape()[2],
                        k,
                        k,
                        stride,
                        pad,
                    )?;
                    accumulate(&mut d_vals[node.inputs[0]], dx);
                }
                NodeOp::DepthwiseConv2d { ch, k } => {
                    let Aux::Cols(cols) = &trace.aux[id] else {
                        return Err(Error::shape("missing depthwise cache"));
                    };
                    let ncols = cols.shape()[1];
                    let kk = k * k;
                    let w = self.effective_weight(opt, id)?;
                    let mut dw = vec![0.0; kk * ch];
                    let mut db = vec![0.0; ch];
                    let mut dcols = vec![0.0; cols.len()];
                    for c in 0..ch {
                        let grow = &g.data()[c * ncols..(c + 1) * ncols];
                        db[c] = grow.iter().sum();
                        for r in 0..kk {
                            let crow = &cols.data()[(c * kk + r) * ncols..(c * kk + r + 1) * ncols];
                            dw[r * ch + c] = crow.iter().zip(grow).map(|(a, b)| a * b).sum();
                            let wv = w.at2(r, c);
                            let drow = &mut dcols[(c * kk + r) * ncols..(c * kk + r + 1) * ncols];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    grads[id] = Some(ParamGrad {
                        weight: Tensor::new(vec![kk, ch], dw)?,
                        bias: Some(db),
                    });
                    let xin = &trace.values[node.inputs[0]];
                    let dx = col2im(
                        &Tensor::new(vec![ch * kk, ncols], dcols)?,
                        ch,
                        xin.shape()[1],
                        xin.shape()[2],
                        k,
                        k,
                        1,
                        k / 2,
                    )?;
                    accumulate(&mut d_vals[node.inputs[0]], dx);
                }
                NodeOp::Linear { in_f, out_f } => {
                    let Aux::Vec(xv) = &trace.aux[id] else {
                        return Err(Error::shape("missing linear cache"));
                    };
                    let mut dw = vec![0.0; in_f * out_f];
                    for (i, &xi) in xv.iter().enumerate() {
                        for (j, &gj) in g.data().iter().enumerate() {
                            dw[i * out_f + j] = xi * gj;
                        }
                    }
                    grads[id] = Some(ParamGrad {
                        weight: Tensor::new(vec![in_f, out_f], dw)?,
                        bias: Some(g.data().to_vec()),
                    });
                    let w = self.effective_weight(opt, id)?;
                    let mut dx = vec![0.0; in_f];
                    for (i, dv) in dx.iter_mut().enumerate() {
                        *dv = w.data()[i * out_f..(i + 1) * out_f]
                            .iter()
                            .zip(g.data())
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                    let xin = &trace.values[node.inputs[0]];
                    accumulate(
                        &mut d_vals[node.inputs[0]],
                        Tensor::new(xin.shape().to_vec(), dx)?,
                    );
                }
                NodeOp::MaxPool2 => {
                    let Aux::Argmax(idx) = &trace.aux[id] else {
                        return Err(Error::shape("missing pool cache"));
                    };
                    let xin = &trace.values[node.inputs[0]];
                    let mut dx = vec![0.0; xin.len()];
                    for (o, &src) in idx.iter().enumerate() {
                        dx[src] += g.data()[o];
                    }
                    accumulate(
                        &mut d_vals[node.inputs[0]],
                        Tensor::new(xin.shape().to_vec(), dx)?,
                    );
                }
                NodeOp::UpsampleNearest2 => {
                    let xin = &trace.values[node.inputs[0]];
                    let (c, h, w) = (xin.shape()[0], xin.shape()[1], xin.shape()[2]);
                    let mut dx = vec![0.0; xin.len()];
                    let (h2, w2) = (h * 2, w * 2);
                    for ci in 0..c {
                        for y in 0..h2 {
                            for x in 0..w2 {
                                dx[(ci * h + y / 2) * w + x / 2] +=
                                    g.data()[(ci * h2 + y) * w2 + x];
                            }
                        }
                    }
                    accumulate(
                        &mut d_vals[node.inputs[0]],
                        Tensor::new(xin.shape().to_vec(), dx)?,
                    );
                }
                NodeOp::Concat => {
                    let (h, w) = (g.shape()[1], g.shape()[2]);
                    let mut offset = 0;
                    for &inp in &node.inputs {
                        let ci = trace.values[inp].shape()[0];
                        let part = g.data()[offset * h * w..(offset + ci) * h * w].to_vec();
                        accumulate(&mut d_vals[inp], Tensor::new(vec![ci, h, w], part)?);
                        offset += ci;
                    }
                }
                NodeOp::Add => {
                    accumulate(&mut d_vals[node.inputs[0]], g.clone());
                    accumulate(&mut d_vals[node.inputs[1]], g.clone());
                }
                NodeOp::AttnCore => {
                    let Aux::Attn(a) = &trace.aux[id] else {
                        return Err(Error::shape("missing attention cache"));
                    };
                    let q = &trace.values[node.inputs[0]];
                    let k = &trace.values[node.inputs[1]];
                    let v = &trace.values[node.inputs[2]];
                    let (dq, dk, dv) = attn_backward(q, k, v, a, &g)?;
                    accumulate(&mut d_vals[node.inputs[0]], dq);
                    accumulate(&mut d_vals[node.inputs[1]], dk);
                    accumulate(&mut d_vals[node.inputs[2]], dv);
                }
                NodeOp::Unpatchify { patch } => {
                    let xin = &trace.values[node.inputs[0]];
                    let dx = unpatchify_backward(&g, xin.shape(), patch)?;
                    accumulate(&mut d_vals[node.inputs[0]], dx);
                }
            }
        }
        Ok(grads)
    }

    /// Image shape [C,H,W] produced by every node for the given input size,
    /// without touching parameters.
    pub fn infer_shapes(&self, h: usize, w: usize) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let s = match node.op {
                NodeOp::Input => vec![1, h, w],
                NodeOp::Conv2d { out_ch, k, stride, pad, .. } => {
                    let i = &shapes[node.inputs[0]];
                    let ho = conv_out_dim(i[1], k, stride, pad)
                        .ok_or_else(|| Error::shape("conv: empty output"))?;
                    let wo = conv_out_dim(i[2], k, stride, pad)
                        .ok_or_else(|| Error::shape("conv: empty output"))?;
                    vec![out_ch, ho, wo]
                }
                NodeOp::DepthwiseConv2d { ch, .. } => {
                    let i = &shapes[node.inputs[0]];
                    vec![ch, i[1], i[2]]
                }
                NodeOp::PatchEmbed { patch, embed, .. } => {
                    let i = &shapes[node.inputs[0]];
                    if i[1] % patch != 0 || i[2] % patch != 0 {
                        return Err(Error::shape("patch_embed: input not divisible by patch"));
                    }
                    vec![embed, i[1] / patch, i[2] / patch]
                }
                NodeOp::Linear { out_f, .. } => vec![out_f],
                NodeOp::MaxPool2 => {
                    let i = &shapes[node.inputs[0]];
                    vec![i[0], i[1] / 2, i[2] / 2]
                }
                NodeOp::UpsampleNearest2 => {
                    let i = &shapes[node.inputs[0]];
                    vec![i[0], i[1] * 2, i[2] * 2]
                }
                NodeOp::Concat => {
                    let c: usize = node.inputs.iter().map(|&i| shapes[i][0]).sum();
                    let first = &shapes[node.inputs[0]];
                    vec![c, first[1], first[2]]
                }
                NodeOp::Add | NodeOp::AttnCore => shapes[node.inputs[0]].clone(),
                NodeOp::Unpatchify { patch } => {
                    let i = &shapes[node.inputs[0]];
                    vec![1, i[1] * patch, i[2] * patch]
                }
            };
            shapes.push(s);
        }
        Ok(shapes)
    }
}

pub fn weight_shape(op: &NodeOp) -> Option<(usize, usize, usize)> {
    match *op {
        NodeOp::Conv2d { in_ch, out_ch, k, .. } => Some((in_ch * k * k, out_ch, out_ch)),
        NodeOp::DepthwiseConv2d { ch, k } => Some((k * k, ch, ch)),
        NodeOp::PatchEmbed { in_ch, patch, embed } => Some((in_ch * patch * patch, embed, embed)),
        NodeOp::Linear { in_f, out_f } => Some((in_f, out_f, out_f)),
        _ => None,
    }
}

fn accumulate(slot: &mut Option<Tensor>, dx: Tensor) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(dx.data()) {
                *a += b;
            }
        }
        None => *slot = Some(dx),
    }
}

/// a^T · b with a [k,m], b [k,n] -> [m,n]; per-element accumulation order is
/// k ascending, matching the plain matmul.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(k, b.shape()[0]);
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let arow = &a.data()[kk * m..(kk + 1) * m];
        let brow = &b.data()[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul_tn shape")
}

/// a · b^T with a [m,k], b [n,k] -> [m,n].
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    debug_assert_eq!(k, b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data()[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul_nt shape")
}

fn add_row_bias(y: &mut Tensor, bias: &[f64]) {
    let ncols = y.shape()[1];
    for (o, &b) in bias.iter().enumerate() {
        for v in &mut y.data_mut()[o * ncols..(o + 1) * ncols] {
            *v += b;
        }
    }
}

fn dac_inplace(cols: &mut Tensor, cfg: &NoiseConfig) {
    for v in cols.data_mut() {
        *v = quantize_uniform(v.clamp(-cfg.input_clip, cfg.input_clip), cfg.dac_bits, cfg.input_clip);
    }
}

/// ADC per output position: range self-calibrates to the max-abs raw value
/// of each column of the [out x positions] matrix.
fn adc_columns_inplace(y: &mut Tensor, cfg: &NoiseConfig) {
    let (m, n) = (y.shape()[0], y.shape()[1]);
    for j in 0..n {
        let mut range = 0.0f64;
        for i in 0..m {
            range = range.max(y.data()[i * n + j].abs());
        }
        let range = range.max(1e-12);
        for i in 0..m {
            let v = y.data()[i * n + j];
            y.data_mut()[i * n + j] = quantize_uniform(v, cfg.adc_bits, range);
        }
    }
}

/// Depthwise product from a full im2col matrix: y[c, j] = sum_r w[r,c] *
/// cols[c*kk + r, j].
fn depthwise_from_cols(cols: &Tensor, w: &Tensor, ch: usize, k: usize, npos: usize) -> Tensor {
    let kk = k * k;
    let mut out = vec![0.0; ch * npos];
    for c in 0..ch {
        let orow = &mut out[c * npos..(c + 1) * npos];
        for r in 0..kk {
            let wv = w.at2(r, c);
            let crow = &cols.data()[(c * kk + r) * npos..(c * kk + r + 1) * npos];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += wv * cv;
            }
        }
    }
    Tensor::new(vec![ch, npos], out).expect("depthwise shape")
}

pub(crate) fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2 requires even spatial dims"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    let mut idx = vec![0usize; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut src = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let p = (ci * h + oy * 2 + dy) * w + ox * 2 + dx;
                        if x.data()[p] > best {
                            best = x.data()[p];
                            src = p;
                        }
                    }
                }
                let o = (ci * ho + oy) * wo + ox;
                out[o] = best;
                idx[o] = src;
            }
        }
    }
    Ok((Tensor::new(vec![c, ho, wo], out)?, idx))
}

pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h2, w2) = (h * 2, w * 2);
    let mut out = vec![0.0; c * h2 * w2];
    for ci in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(ci * h2 + y) * w2 + xx] = x.data()[(ci * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![c, h2, w2], out)
}

pub(crate) fn concat_channels(ins: &[&Tensor]) -> Result<Tensor> {
    let (h, w) = (ins[0].shape()[1], ins[0].shape()[2]);
    let mut data = Vec::new();
    let mut c = 0;
    for t in ins {
        if t.shape()[1] != h || t.shape()[2] != w {
            return Err(Error::shape("concat: spatial dims disagree"));
        }
        c += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![c, h, w], data)
}

/// Single-head attention over the flattened token grid.
/// Inputs [E,h,w]; A = softmax(Q K^T / sqrt(E)); Y = A V, back to [E,h,w].
pub(crate) fn attn_forward(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape("attention inputs must share a shape"));
    }
    let (e, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let t = h * w;
    let scale = 1.0 / (e as f64).sqrt();
    // S[i,j] = q_i . k_j * scale, tokens indexed over the grid
    let mut a = vec![0.0; t * t];
    for i in 0..t {
        let row = &mut a[i * t..(i + 1) * t];
        for (j, rv) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for ei in 0..e {
                acc += q.data()[ei * t + i] * k.data()[ei * t + j];
            }
            *rv = acc * scale;
        }
        // row softmax
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for rv in row.iter_mut() {
            *rv = (*rv - m).exp();
            z += *rv;
        }
        for rv in row.iter_mut() {
            *rv /= z;
        }
    }
    let a = Tensor::new(vec![t, t], a)?;
    // y[e,i] = sum_j a[i,j] v[e,j]
    let mut y = vec![0.0; e * t];
    for ei in 0..e {
        let vrow = &v.data()[ei * t..(ei + 1) * t];
        let yrow = &mut y[ei * t..(ei + 1) * t];
        for i in 0..t {
            yrow[i] = a.data()[i * t..(i + 1) * t]
                .iter()
                .zip(vrow)
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    Ok((Tensor::new(vec![e, h, w], y)?, a))
}

fn attn_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    a: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (e, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let t = h * w;
    let scale = 1.0 / (e as f64).sqrt();
    // dv[e,j] = sum_i a[i,j] dy[e,i]
    let mut dv = vec![0.0; e * t];
    for ei in 0..e {
        for j in 0..t {
            let mut acc = 0.0;
            for i in 0..t {
                acc += a.at2(i, j) * dy.data()[ei * t + i];
            }
            dv[ei * t + j] = acc;
        }
    }
    // dA[i,j] = sum_e dy[e,i] v[e,j]
    let mut da = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            let mut acc = 0.0;
            for ei in 0..e {
                acc += dy.data()[ei * t + i] * v.data()[ei * t + j];
            }
            da[i * t + j] = acc;
        }
    }
    // softmax backward per row: dS = (dA - (dA . A)) * A
    let mut ds = vec![0.0; t * t];
    for i in 0..t {
        let arow = &a.data()[i * t..(i + 1) * t];
        let darow = &da[i * t..(i + 1) * t];
        let dot: f64 = arow.iter().zip(darow).map(|(x, y)| x * y).sum();
        for j in 0..t {
            ds[i * t + j] = (darow[j] - dot) * arow[j];
        }
    }
    // dq[e,i] = scale * sum_j ds[i,j] k[e,j]; dk[e,j] = scale * sum_i ds[i,j] q[e,i]
    let mut dq = vec![0.0; e * t];
    let mut dk = vec![0.0; e * t];
    for ei in 0..e {
        for i in 0..t {
            let mut acc = 0.0;
            for j in 0..t {
                acc += ds[i * t + j] * k.data()[ei * t + j];
            }
            dq[ei * t + i] = scale * acc;
        }
        for j in 0..t {
            let mut acc = 0.0;
            for i in 0..t {
                acc += ds[i * t + j] * q.data()[ei * t + i];
            }
            dk[ei * t + j] = scale * acc;
        }
    }
    Ok((
        Tensor::new(vec![e, h, w], dq)?,
        Tensor::new(vec![e, h, w], dk)?,
        Tensor::new(vec![e, h, w], dv)?,
    ))
}

pub(crate) fn unpatchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (pp, gh, gw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if pp != patch * patch {
        return Err(Error::shape("unpatchify: channel count != patch^2"));
    }
    let (h, w) = (gh * patch, gw * patch);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let c = (y % patch) * patch + xx % patch;
            out[y * w + xx] = x.data()[(c * gh + y / patch) * gw + xx / patch];
        }
    }
    Tensor::new(vec![1, h, w], out)
}

fn unpatchify_backward(g: &Tensor, in_shape: &[usize], patch: usize) -> Result<Tensor> {
    let (gh, gw) = (in_shape[1], in_shape[2]);
    let (h, w) = (gh * patch, gw * patch);
    let mut dx = vec![0.0; in_shape.iter().product()];
    for y in 0..h {
        for xx in 0..w {
            let c = (y % patch) * patch + xx % patch;
            dx[(c * gh + y / patch) * gw + xx / patch] += g.data()[y * w + xx];
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

//! The toy network zoo: pyramidal U-Net, pyramidal U-Net++ with nested
//! skips, and an isotropic patch-token net that keeps a single resolution
//! after patch embedding.
//!
//! All presets take a 1-channel image with H, W divisible by 4 and end in a
//! sigmoid over per-pixel mask logits.

use super::graph::{Act, NetworkSpec, Node, NodeId, NodeOp, PresetId};
use crate::error::{Error, Result};

pub(crate) struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    pub(crate) fn new() -> Self {
        Builder { nodes: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: &str, op: NodeOp, act: Act, inputs: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len();
        for &i in &inputs {
            assert!(i < id, "graph must be built in topological order");
        }
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            act,
            inputs,
            attn_proj: false,
        });
        id
    }

    pub(crate) fn conv(
        &mut self,
        name: &str,
        input: NodeId,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        act: Act,
    ) -> NodeId {
        self.push(
            name,
            NodeOp::Conv2d { in_ch, out_ch, k, stride: 1, pad: k / 2 },
            act,
            vec![input],
        )
    }

    pub(crate) fn attn_proj(&mut self, name: &str, input: NodeId, in_ch: usize, out_ch: usize) -> NodeId {
        let id = self.conv(name, input, in_ch, out_ch, 1, Act::None);
        self.nodes[id].attn_proj = true;
        id
    }

    pub(crate) fn finish(
        self,
        preset_id: PresetId,
        width_scale: usize,
        attention: bool,
        output: NodeId,
        seed: u64,
    ) -> NetworkSpec {
        let n = self.nodes.len();
        let mut net = NetworkSpec {
            preset_id,
            width_scale,
            attention,
            init_seed: seed,
            nodes: self.nodes,
            params: (0..n).map(|_| None).collect(),
            output,
        };
        net.init_params(seed);
        net
    }
}

/// Build a preset with freshly initialized parameters.
///
/// `attention` switches the isotropic preset's mixer blocks from the default
/// depthwise conv-mixer to single-head self-attention; it is ignored by the
/// pyramidal presets.
pub fn build_preset(
    preset_id: PresetId,
    width_scale: usize,
    attention: bool,
    seed: u64,
) -> Result<NetworkSpec> {
    if width_scale < 1 {
        return Err(Error::config("width_scale must be >= 1"));
    }
    Ok(match preset_id {
        PresetId::ToyUnet => build_unet(width_scale, seed),
        PresetId::ToyUnetpp => build_unetpp(width_scale, seed),
        PresetId::ToyIsotropic => build_isotropic(width_scale, attention, seed),
    })
}

/// 2 down-levels, bottleneck, 2 up-levels with skip concat.
fn build_unet(w: usize, seed: u64) -> NetworkSpec {
    let c = 8 * w;
    let mut b = Builder::new();
    let input = b.push("input", NodeOp::Input, Act::None, vec![]);

    let e0a = b.conv("enc0a", input, 1, c, 3, Act::Relu);
    let e0b = b.conv("enc0b", e0a, c, c, 3, Act::Relu);
    let p0 = b.push("pool0", NodeOp::MaxPool2, Act::None, vec![e0b]);

    let e1a = b.conv("enc1a", p0, c, 2 * c, 3, Act::Relu);
    let e1b = b.conv("enc1b", e1a, 2 * c, 2 * c, 3, Act::Relu);
    let p1 = b.push("pool1", NodeOp::MaxPool2, Act::None, vec![e1b]);

    let ba = b.conv("bottleneck_a", p1, 2 * c, 4 * c, 3, Act::Relu);
    let bb = b.conv("bottleneck_b", ba, 4 * c, 4 * c, 3, Act::Relu);

    let u1 = b.push("up1", NodeOp::UpsampleNearest2, Act::None, vec![bb]);
    let u1c = b.conv("up1_conv", u1, 4 * c, 2 * c, 3, Act::Relu);
    let cat1 = b.push("skip1", NodeOp::Concat, Act::None, vec![u1c, e1b]);
    let d1 = b.conv("dec1", cat1, 4 * c, 2 * c, 3, Act::Relu);

    let u0 = b.push("up0", NodeOp::UpsampleNearest2, Act::None, vec![d1]);
    let u0c = b.conv("up0_conv", u0, 2 * c, c, 3, Act::Relu);
    let cat0 = b.push("skip0", NodeOp::Concat, Act::None, vec![u0c, e0b]);
    let d0 = b.conv("dec0", cat0, 2 * c, c, 3, Act::Relu);

    let head = b.conv("head", d0, c, 1, 1, Act::Sigmoid);
    b.finish(PresetId::ToyUnet, w, false, head, seed)
}

/// Same depth as the U-Net plus nested dense skip nodes X^{i,j}.
fn build_unetpp(w: usize, seed: u64) -> NetworkSpec {
    let c = 8 * w;
    let mut b = Builder::new();
    let input = b.push("input", NodeOp::Input, Act::None, vec![]);

    // backbone column X^{i,0}
    let x00a = b.conv("x00a", input, 1, c, 3, Act::Relu);
    let x00 = b.conv("x00b", x00a, c, c, 3, Act::Relu);
    let p0 = b.push("pool0", NodeOp::MaxPool2, Act::None, vec![x00]);

    let x10a = b.conv("x10a", p0, c, 2 * c, 3, Act::Relu);
    let x10 = b.conv("x10b", x10a, 2 * c, 2 * c, 3, Act::Relu);
    let p1 = b.push("pool1", NodeOp::MaxPool2, Act::None, vec![x10]);

    let x20a = b.conv("x20a", p1, 2 * c, 4 * c, 3, Act::Relu);
    let x20 = b.conv("x20b", x20a, 4 * c, 4 * c, 3, Act::Relu);

    // nested node X^{0,1} = f(concat(X^{0,0}, up(X^{1,0})))
    let up10 = b.push("up_x10", NodeOp::UpsampleNearest2, Act::None, vec![x10]);
    let up10c = b.conv("up_x10_conv", up10, 2 * c, c, 3, Act::Relu);
    let cat01 = b.push("cat_x01", NodeOp::Concat, Act::None, vec![x00, up10c]);
    let x01 = b.conv("x01", cat01, 2 * c, c, 3, Act::Relu);

    // X^{1,1} = f(concat(X^{1,0}, up(X^{2,0})))
    let up20 = b.push("up_x20", NodeOp::UpsampleNearest2, Act::None, vec![x20]);
    let up20c = b.conv("up_x20_conv", up20, 4 * c, 2 * c, 3, Act::Relu);
    let cat11 = b.push("cat_x11", NodeOp::Concat, Act::None, vec![x10, up20c]);
    let x11 = b.conv("x11", cat11, 4 * c, 2 * c, 3, Act::Relu);

    // X^{0,2} = f(concat(X^{0,0}, X^{0,1}, up(X^{1,1})))
    let up11 = b.push("up_x11", NodeOp::UpsampleNearest2, Act::None, vec![x11]);
    let up11c = b.conv("up_x11_conv", up11, 2 * c, c, 3, Act::Relu);
    let cat02 = b.push("cat_x02", NodeOp::Concat, Act::None, vec![x00, x01, up11c]);
    let x02 = b.conv("x02", cat02, 3 * c, c, 3, Act::Relu);

    let head = b.conv("head", x02, c, 1, 1, Act::Sigmoid);
    b.finish(PresetId::ToyUnetpp, w, false, head, seed)
}

/// Patch embedding followed by 4 same-resolution mixer blocks and a
/// per-patch linear head; no down/up-sampling anywhere.
fn build_isotropic(w: usize, attention: bool, seed: u64) -> NetworkSpec {
    let e = 16 * w;
    let p = 4;
    let mut b = Builder::new();
    let input = b.push("input", NodeOp::Input, Act::None, vec![]);
    let mut cur = b.push(
        "patch_embed",
        NodeOp::PatchEmbed { in_ch: 1, patch: p, embed: e },
        Act::None,
        vec![input],
    );
    for blk in 0..4 {
        let mixed = if attention {
            let q = b.attn_proj(&format!("blk{blk}_q"), cur, e, e);
            let k = b.attn_proj(&format!("blk{blk}_k"), cur, e, e);
            let v = b.attn_proj(&format!("blk{blk}_v"), cur, e, e);
            let attn = b.push(
                &format!("blk{blk}_attn"),
                NodeOp::AttnCore,
                Act::None,
                vec![q, k, v],
            );
            let o = b.attn_proj(&format!("blk{blk}_o"), attn, e, e);
            self_pointwise(&mut b, blk, o, e)
        } else {
            let dw = b.push(
                &format!("blk{blk}_dw"),
                NodeOp::DepthwiseConv2d { ch: e, k: 3 },
                Act::Gelu,
                vec![cur],
            );
            self_pointwise(&mut b, blk, dw, e)
        };
        cur = b.push(&format!("blk{blk}_res"), NodeOp::Add, Act::None, vec![cur, mixed]);
    }
    let head = b.conv("head", cur, e, p * p, 1, Act::None);
    let up = b.push("unpatchify", NodeOp::Unpatchify { patch: p }, Act::Sigmoid, vec![head]);
    b.finish(PresetId::ToyIsotropic, w, attention, up, seed)
}

fn self_pointwise(b: &mut Builder, blk: usize, input: NodeId, e: usize) -> NodeId {
    b.conv(&format!("blk{blk}_pw"), input, e, e, 1, Act::None)
}

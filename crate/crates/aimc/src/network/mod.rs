//! Toy segmentation networks with manual reverse-mode gradients, analog
//! execution on crossbar tiles, and hardware-aware training.

pub mod analog_exec;
pub mod checkpoint;
pub mod graph;
pub mod presets;
pub mod train;

pub use analog_exec::ProgrammedNet;
pub use checkpoint::Checkpoint;
pub use graph::{Act, FwdOptions, FwdTrace, NetworkSpec, NodeOp, Param, ParamGrad, PresetId};
pub use presets::build_preset;
pub use train::{hwa_train, train_step, EpochStats, LossKind, TrainConfig};

use crate::analog::TileGeometry;
use crate::error::Result;
use crate::mapping::{aggregate_report, map_layer, InputShape, LayerSpec, NetworkReport};

/// Map every parameterized layer of a network onto tiles and aggregate the
/// utilization / reuse / parameter metrics, for an H×W input image.
pub fn analyze_network(
    net: &graph::NetworkSpec,
    tile: TileGeometry,
    h: usize,
    w: usize,
) -> Result<NetworkReport> {
    let shapes = net.infer_shapes(h, w)?;
    let mut layers = Vec::new();
    for (id, node) in net.nodes.iter().enumerate() {
        let Some(spec) = net.layer_spec(id) else { continue };
        let s = &shapes[node.inputs[0]];
        let input = match (&spec, s.len()) {
            // Attention projections see the feature map as a token sequence.
            (LayerSpec::AttentionProj { .. }, 3) => {
                InputShape::Tokens { t: s[1] * s[2], f: s[0] }
            }
            (LayerSpec::Linear { .. }, _) => {
                InputShape::Vector { f: s.iter().product() }
            }
            (_, 3) => InputShape::Image { c: s[0], h: s[1], w: s[2] },
            (_, 2) => InputShape::Tokens { t: s[0], f: s[1] },
            _ => InputShape::Vector { f: s.iter().product() },
        };
        layers.push(map_layer(&node.name, spec, tile, input)?);
    }
    Ok(aggregate_report(layers, net.param_count()))
}

#[cfg(test)]
mod tests {
    use super::graph::*;
    use super::presets::{build_preset, Builder};
    use super::train::{hwa_train, train_step, LossKind, TrainConfig};
    use crate::analog::{NoiseConfig, TileGeometry};
    use crate::rng::stream;
    use crate::tensor::Tensor;

    fn rand_input(shape: &[usize], seed: u64, tag: &str) -> Tensor {
        let mut rng = stream(seed, tag, 0);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| crate::rng::normal(&mut rng) * 0.5)
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn preset_param_counts() {
        let unet = build_preset(PresetId::ToyUnet, 1, false, 7).unwrap();
        assert_eq!(unet.param_count(), 29_617);
        let unetpp = build_preset(PresetId::ToyUnetpp, 1, false, 7).unwrap();
        assert_eq!(unetpp.param_count(), 32_513);
        let iso = build_preset(PresetId::ToyIsotropic, 1, false, 7).unwrap();
        assert_eq!(iso.param_count(), 2_272);
    }

    #[test]
    fn width_scale_roughly_quadruples_params() {
        let w1 = build_preset(PresetId::ToyUnet, 1, false, 7).unwrap().param_count();
        let w2 = build_preset(PresetId::ToyUnet, 2, false, 7).unwrap().param_count();
        let ratio = w2 as f64 / w1 as f64;
        assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
    }

    #[test]
    fn skip_edge_counts() {
        let unet = build_preset(PresetId::ToyUnet, 1, false, 7).unwrap();
        assert_eq!(unet.skip_edge_count(), 2);
        let unetpp = build_preset(PresetId::ToyUnetpp, 1, false, 7).unwrap();
        assert_eq!(unetpp.skip_edge_count(), 4);
        let iso = build_preset(PresetId::ToyIsotropic, 1, false, 7).unwrap();
        assert_eq!(iso.skip_edge_count(), 0);
    }

    #[test]
    fn presets_preserve_spatial_shape() {
        for (id, attn) in [
            (PresetId::ToyUnet, false),
            (PresetId::ToyUnetpp, false),
            (PresetId::ToyIsotropic, false),
            (PresetId::ToyIsotropic, true),
        ] {
            let net = build_preset(id, 1, attn, 3).unwrap();
            let x = rand_input(&[1, 32, 32], 11, "shape-x");
            let y = net.forward_digital(&x).unwrap();
            assert_eq!(y.shape(), &[1, 32, 32], "{id} attn={attn}");
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn output_in_unit_interval_for_all_presets() {
        for id in [PresetId::ToyUnet, PresetId::ToyUnetpp, PresetId::ToyIsotropic] {
            let net = build_preset(id, 1, false, 5).unwrap();
            let x = rand_input(&[1, 16, 16], 2, "unit-x");
            let y = net.forward_digital(&x).unwrap();
            for &v in y.data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    /// Squared-error loss against a fixed random target; returns (loss, dL/dy).
    fn sq_loss(y: &Tensor, target: &Tensor) -> (f64, Tensor) {
        let mut loss = 0.0;
        let mut grad = Tensor::zeros(y.shape().to_vec());
        for i in 0..y.data().len() {
            let d = y.data()[i] - target.data()[i];
            loss += d * d;
            grad.data_mut()[i] = 2.0 * d;
        }
        (loss, grad)
    }

    fn check_gradients(net: &NetworkSpec, x: &Tensor, tag: &str) {
        let target = rand_input(
            &net.forward_digital(x).unwrap().shape().to_vec(),
            99,
            "fd-target",
        );
        let opt = FwdOptions::default();
        let trace = net.forward_trace(x, &opt).unwrap();
        let y = &trace.values[net.output];
        let (_, dy) = sq_loss(y, &target);
        let grads = net.backward(&trace, &opt, &dy).unwrap();

        let h = 1e-5;
        let check = |a: f64, fd: f64, ctx: String| {
            let denom = a.abs().max(fd.abs()).max(1e-3);
            assert!(
                (a - fd).abs() / denom <= 1e-4,
                "{ctx}: analytic {a} fd {fd}"
            );
        };
        let mut checked = 0usize;
        // Probe every parameter: the micro-nets are tiny.
        for (ni, pg) in grads.iter().enumerate() {
            let Some(pg) = pg else { continue };
            for k in 0..pg.weight.data().len() {
                let eval = |delta: f64| {
                    let mut net2 = net.clone();
                    net2.params[ni].as_mut().unwrap().weight.data_mut()[k] += delta;
                    sq_loss(&net2.forward_digital(x).unwrap(), &target).0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                check(pg.weight.data()[k], fd, format!("{tag}: node {ni} w[{k}]"));
                checked += 1;
            }
            if let Some(gb) = pg.bias.as_ref() {
                for k in 0..gb.len() {
                    let eval = |delta: f64| {
                        let mut net2 = net.clone();
                        net2.params[ni].as_mut().unwrap().bias.as_mut().unwrap()[k] += delta;
                        sq_loss(&net2.forward_digital(x).unwrap(), &target).0
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    check(gb[k], fd, format!("{tag}: node {ni} b[{k}]"));
                    checked += 1;
                }
            }
        }
        assert!(checked > 0, "{tag}: no parameters checked");
    }

    fn micro_conv_net() -> NetworkSpec {
        // conv -> pool -> conv -> upsample -> concat -> 1x1 head: exercises the
        // pyramidal ops plus relu/gelu/sigmoid.
        let mut b = Builder::new();
        let x = b.push("in", NodeOp::Input, Act::None, vec![]);
        let c0 = b.conv("c0", x, 1, 2, 3, Act::Relu);
        let p = b.push("pool", NodeOp::MaxPool2, Act::None, vec![c0]);
        let c1 = b.conv("c1", p, 2, 2, 3, Act::Gelu);
        let u = b.push("up", NodeOp::UpsampleNearest2, Act::None, vec![c1]);
        let cat = b.push("cat", NodeOp::Concat, Act::None, vec![u, c0]);
        let head = b.conv("head", cat, 4, 1, 1, Act::Sigmoid);
        b.finish(PresetId::ToyUnet, 1, false, head, 41)
    }

    fn micro_iso_net(attention: bool) -> NetworkSpec {
        let mut b = Builder::new();
        let x = b.push("in", NodeOp::Input, Act::None, vec![]);
        let e = 4usize;
        let pe = b.push(
            "patch",
            NodeOp::PatchEmbed { in_ch: 1, patch: 4, embed: e },
            Act::None,
            vec![x],
        );
        let body = if attention {
            let q = b.attn_proj("q", pe, e, e);
            let k = b.attn_proj("k", pe, e, e);
            let v = b.attn_proj("v", pe, e, e);
            let a = b.push("attn", NodeOp::AttnCore, Act::None, vec![q, k, v]);
            let o = b.attn_proj("o", a, e, e);
            b.push("res", NodeOp::Add, Act::None, vec![pe, o])
        } else {
            let dw = b.push(
                "dw",
                NodeOp::DepthwiseConv2d { ch: e, k: 3 },
                Act::Gelu,
                vec![pe],
            );
            let pw = b.conv("pw", dw, e, e, 1, Act::None);
            b.push("res", NodeOp::Add, Act::None, vec![pe, pw])
        };
        let head = b.conv("hd", body, e, 16, 1, Act::None);
        let up = b.push("unp", NodeOp::Unpatchify { patch: 4 }, Act::Sigmoid, vec![head]);
        b.finish(PresetId::ToyIsotropic, 1, attention, up, 43)
    }

    fn micro_linear_net() -> NetworkSpec {
        let mut b = Builder::new();
        let x = b.push("in", NodeOp::Input, Act::None, vec![]);
        let l0 = b.push(
            "l0",
            NodeOp::Linear { in_f: 4, out_f: 3 },
            Act::Gelu,
            vec![x],
        );
        let l1 = b.push(
            "l1",
            NodeOp::Linear { in_f: 3, out_f: 4 },
            Act::Sigmoid,
            vec![l0],
        );
        b.finish(PresetId::ToyIsotropic, 1, false, l1, 44)
    }

    #[test]
    fn gradient_check_conv_pool_upsample_concat() {
        let net = micro_conv_net();
        let x = rand_input(&[1, 6, 6], 21, "fd-x");
        check_gradients(&net, &x, "conv-micro");
    }

    #[test]
    fn gradient_check_isotropic_mixer() {
        let net = micro_iso_net(false);
        let x = rand_input(&[1, 8, 8], 22, "fd-x");
        check_gradients(&net, &x, "iso-micro");
    }

    #[test]
    fn gradient_check_attention() {
        let net = micro_iso_net(true);
        let x = rand_input(&[1, 8, 8], 23, "fd-x");
        check_gradients(&net, &x, "attn-micro");
    }

    #[test]
    fn gradient_check_linear() {
        let net = micro_linear_net();
        let x = rand_input(&[1, 2, 2], 24, "fd-x");
        check_gradients(&net, &x, "linear-micro");
    }

    #[test]
    fn zero_noise_analog_matches_digital() {
        let cfg = NoiseConfig::ideal();
        let geom = TileGeometry { rows: 64, cols: 48 };
        for (id, attn) in [
            (PresetId::ToyUnet, false),
            (PresetId::ToyUnetpp, false),
            (PresetId::ToyIsotropic, false),
            (PresetId::ToyIsotropic, true),
        ] {
            let net = build_preset(id, 1, attn, 9).unwrap();
            let prog = net.program(&cfg, geom, 1234).unwrap();
            let x = rand_input(&[1, 16, 16], 31, "zn-x");
            let yd = net.forward_digital(&x).unwrap();
            let ya = prog.forward(&x, 777).unwrap();
            let max_err = yd
                .data()
                .iter()
                .zip(ya.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err <= 1e-9, "{id} attn={attn}: max err {max_err}");
        }
    }

    #[test]
    fn noisy_analog_differs_from_digital() {
        let cfg = NoiseConfig::default();
        let net = build_preset(PresetId::ToyUnet, 1, false, 9).unwrap();
        let prog = net.program(&cfg, TileGeometry::default(), 55).unwrap();
        let x = rand_input(&[1, 16, 16], 31, "zn-x");
        let yd = net.forward_digital(&x).unwrap();
        let ya = prog.forward(&x, 777).unwrap();
        let max_err = yd
            .data()
            .iter()
            .zip(ya.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err > 1e-6, "noise had no visible effect: {max_err}");
    }

    #[test]
    fn fixed_programming_is_reproducible() {
        let cfg = NoiseConfig::default(); // fresh-per-pass
        let net = build_preset(PresetId::ToyIsotropic, 1, false, 9).unwrap();
        let prog = net.program(&cfg, TileGeometry::default(), 55).unwrap();
        let x = rand_input(&[1, 16, 16], 31, "rep-x");
        let y1 = prog.forward(&x, 101).unwrap();
        let y2 = prog.forward(&x, 101).unwrap();
        let y3 = prog.forward(&x, 102).unwrap();
        assert_eq!(y1.data(), y2.data());
        assert_ne!(y1.data(), y3.data());
    }

    #[test]
    fn train_step_reduces_loss_on_tiny_problem() {
        let mut net = micro_linear_net();
        let x = rand_input(&[1, 2, 2], 61, "ts-x");
        let t = Tensor::filled(vec![1, 2, 2], 0.75);
        let tcfg = TrainConfig { learning_rate: 0.5, ..TrainConfig::default() };
        let batch: Vec<(&Tensor, &Tensor)> = vec![(&x, &t)];
        let mut losses = Vec::new();
        for step in 0..100 {
            let loss = train_step(&mut net, &batch, &tcfg, 500 + step as u64, step).unwrap();
            losses.push(loss);
        }
        // Soft dice against a constant 0.75 target bottoms out near 0.14, so
        // check convergence toward that floor rather than toward zero.
        let last = *losses.last().unwrap();
        assert!(
            last < losses[0] * 0.6 && last < 0.2,
            "loss did not converge: {} -> {last}",
            losses[0]
        );
    }

    #[test]
    fn hwa_training_learns_toy_segmentation() {
        let data: Vec<(Tensor, Tensor)> = crate::synthdata::gen_dataset(64, 16, 0.0, 4242)
            .into_iter()
            .map(|s| (s.image, s.mask))
            .collect();
        let mut net = build_preset(PresetId::ToyUnet, 1, false, 17).unwrap();
        let tcfg = TrainConfig {
            epochs: 25,
            train_noise: NoiseConfig::ideal(),
            seed: 900,
            ..TrainConfig::default()
        };
        let hist = hwa_train(&mut net, &data, &tcfg).unwrap();
        let last = hist.last().unwrap();
        assert!(
            last.train_dice >= 0.85,
            "final train dice {}",
            last.train_dice
        );
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let net = build_preset(PresetId::ToyUnetpp, 1, false, 12).unwrap();
        let ckpt = net.to_checkpoint();
        let json = serde_json::to_string(&ckpt).unwrap();
        let back: super::Checkpoint = serde_json::from_str(&json).unwrap();
        let net2 = NetworkSpec::from_checkpoint(&back).unwrap();
        let x = rand_input(&[1, 16, 16], 71, "ck-x");
        assert_eq!(
            net.forward_digital(&x).unwrap().data(),
            net2.forward_digital(&x).unwrap().data()
        );
    }

    #[test]
    fn loss_kinds_are_finite_and_positive() {
        let y = Tensor::new(vec![2, 2], vec![0.2, 0.8, 0.5, 0.99]).unwrap();
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        for kind in [LossKind::DiceLoss, LossKind::Bce] {
            let (l, g) = super::train::loss_and_grad(kind, &y, &t);
            assert!(l.is_finite() && l > 0.0);
            assert!(g.data().iter().all(|v| v.is_finite()));
        }
    }
}

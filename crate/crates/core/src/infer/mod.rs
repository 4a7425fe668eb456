//! Float, fake-quant and integer execution of detector graphs, box decoding
//! and non-maximum suppression.

mod calib;
mod detect;
mod exec;
mod integer;
mod nms;
mod pack;

pub use calib::attach_quantizers;
pub use detect::{
    face_score, postprocess, read_detections, write_detections, DetectConfig, DetectionRecord, Detector, Engine,
};
pub use exec::{
    bias_fake_quant, effective_fake_weights, effective_params, forward_nodes, head_rows, run_fake_quant, run_float,
    HeadOutputs, Mode,
};
pub use integer::{
    freeze, quantize_raw, run_frozen, run_integer, run_integer_nodes, IntNode, IntOp, IntOut, IntValue,
    IntegerGraph, RequantParams, WeightStore,
};
pub use nms::{decode_boxes, iou, nms, Detection};
pub use pack::{pack_ternary, unpack_ternary};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, fold_bn, ArchConfig, NetworkGraph};
    use crate::quant::Precision;
    use crate::tensor::{Shape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SMALL: &str = r#"
version = 1
name = "small"
leaky_slope = 0.125
bn_eps = 1e-5
ssh = 8
[input]
channels = 1
height = 16
width = 16
[stem]
out = 4
kernel = 3
stride = 2
[feature]
reduce = 8
conv = 8
[anchors]
stride = 4
sizes = [6.0, 12.0]
variances = [0.1, 0.2]
[[blocks]]
out = 8
stride = 2
repeat = 2
linear_depthwise = 1
"#;

    fn random_quantized(seed: u64) -> (NetworkGraph, QTensorPair) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = build_network(&ArchConfig::parse(SMALL).unwrap(), seed).unwrap();
        for l in &mut g.layers {
            if let Some(bn) = &mut l.bn {
                for c in 0..bn.channels() {
                    bn.gamma[c] = rng.random_range(0.5..1.5);
                    bn.beta[c] = rng.random_range(-0.3..0.3);
                    bn.mean[c] = rng.random_range(-0.3..0.3);
                    bn.var[c] = rng.random_range(0.3..2.0);
                }
            }
            if let Some(b) = &mut l.bias {
                b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        let f = fold_bn(&g).unwrap();
        let raw: Vec<u8> = (0..2 * 16 * 16).map(|_| rng.random()).collect();
        let x = Tensor::new(Shape::nchw(2, 1, 16, 16).unwrap(), crate::model::normalize_raw(&raw)).unwrap();
        let w = match rng.random_range(0..4) {
            0 => Precision::Ternary,
            k => Precision::Int([8, 4, 3][k - 1]),
        };
        let a = Precision::Int([8, 4, 3][rng.random_range(0..3)]);
        let q = attach_quantizers(&f, w, a, &x).unwrap();
        (q, QTensorPair { raw, x })
    }

    struct QTensorPair {
        raw: Vec<u8>,
        x: Tensor,
    }

    #[test]
    fn integer_tracks_fake_quant() {
        for seed in 0..20 {
            let (g, inp) = random_quantized(seed);
            let fq = forward_nodes(&g, &inp.x, Mode::FakeQuant).unwrap();
            let ig = freeze(&g).unwrap();
            let iv = run_integer_nodes(&ig, &quantize_raw(&inp.raw, 2, 1, 16, 16).unwrap()).unwrap();
            for i in g.act_quant_sites() {
                let step = iv[i].step().unwrap();
                let it = iv[i].to_float();
                for (a, b) in it.data().iter().zip(fq[i].data()) {
                    assert!((a - b).abs() <= step * (1.0 + 1e-9), "seed {seed} node {}", g.layers[i].name);
                }
            }
            let a = run_fake_quant(&g, &inp.x).unwrap();
            let b = run_frozen(&ig, &quantize_raw(&inp.raw, 2, 1, 16, 16).unwrap()).unwrap();
            assert_eq!(a.cls.dims(), b.cls.dims());
        }
    }

    #[test]
    fn ternary_weights_on_grid() {
        let g = build_network(&ArchConfig::parse(SMALL).unwrap(), 9).unwrap();
        let x = Tensor::full(Shape::nchw(1, 1, 16, 16).unwrap(), 0.1);
        let q = attach_quantizers(&g, Precision::Ternary, Precision::Int(3), &x).unwrap();
        for i in q.weight_layers() {
            let s = q.layers[i].weight_quant.unwrap().step;
            let w = effective_fake_weights(&q, i).unwrap();
            assert!(w.data().iter().all(|&v| v == 0.0 || v == s || v == -s));
        }
    }

    #[test]
    fn unit_scale_single_conv() {
        use crate::model::{Layer, LayerKind, Src};
        use crate::quant::{QuantSpec, Target};
        let mut g = build_network(&ArchConfig::parse(SMALL).unwrap(), 0).unwrap();
        let base: Layer = g.layers[0].clone();
        let one = |t| QuantSpec::new(Precision::Int(8), 1.0, t).unwrap();
        let conv = Layer {
            name: "c".into(),
            kind: LayerKind::HeadBox,
            inputs: vec![Src::Input],
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
            stride: 1,
            pad: 0,
            groups: 1,
            weight: Some(Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap()),
            bias: None,
            bn: None,
            weight_quant: Some(one(Target::Weight)),
            act_quant: None,
            ..base
        };
        g.layers = vec![conv];
        g.cls_out = 0;
        g.box_out = 0;
        g.folded = true;
        g.input_quant = one(Target::Activation);
        let ig = freeze(&g).unwrap();
        let x = crate::tensor::QTensor::new(Shape::nchw(1, 1, 16, 16).unwrap(), vec![3; 256], 1.0, 0, Precision::Int(8))
            .unwrap();
        let out = run_integer_nodes(&ig, &x).unwrap();
        assert!(out[0].to_float().data().iter().all(|&v| v == 6.0));
    }

    #[test]
    fn overflow_rejected() {
        let (mut g, _) = random_quantized(1);
        for l in &mut g.layers {
            if let Some(q) = &mut l.weight_quant {
                q.precision = Precision::Int(16);
            }
            if let Some(q) = &mut l.act_quant {
                q.precision = Precision::Int(16);
            }
        }
        assert!(matches!(freeze(&g), Err(crate::Error::Overflow { .. })));
    }
}

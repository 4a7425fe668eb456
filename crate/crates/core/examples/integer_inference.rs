//! Ternary-weight, 3-bit-activation detector run two ways: fake quantization
//! in floating point, and the integer-only engine with packed 2-bit weights.
//!
//! cargo run --profile test --example integer_inference

use tfd::infer::{
    attach_quantizers, freeze, pack_ternary, quantize_raw, run_fake_quant, run_frozen, Detector, Engine,
    DetectConfig,
};
use tfd::model::{build_network, fold_bn, normalize_raw, ArchConfig};
use tfd::quant::{ternary_quantize, Precision};
use tfd::rawsim::scene::{toy_corpus, SceneConfig};
use tfd::rawsim::{NoiseParams, SynthConfig};
use tfd::tensor::{Shape, Tensor};

fn main() -> tfd::Result<()> {
    let frames = toy_corpus(8, 3, &SceneConfig::default(), &SynthConfig::default(), &NoiseParams::default())?;
    let g = fold_bn(&build_network(&ArchConfig::toy(), 5)?)?;
    let (c, h, w) = g.input_dims();
    let raw: Vec<u8> = frames.iter().flat_map(|f| f.pixels.iter().copied()).collect();
    let x = Tensor::new(Shape::nchw(frames.len(), c, h, w)?, normalize_raw(&raw))?;
    let q = attach_quantizers(&g, Precision::Ternary, Precision::Int(3), &x)?;

    let ig = freeze(&q)?;
    let int = run_frozen(&ig, &quantize_raw(&raw, frames.len(), c, h, w)?)?;
    let fq = run_fake_quant(&q, &x)?;
    for (name, a, b) in [("cls", &fq.cls, &int.cls), ("boxes", &fq.boxes, &int.boxes)] {
        let dev = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        println!("{name:>5}: max |fake quant - integer| {dev:.3e}");
    }

    let (mut dense, mut packed) = (0, 0);
    for l in &q.layers {
        if let (Some(wq), Some(spec)) = (&l.weight, &l.weight_quant) {
            let codes = ternary_quantize(wq, spec.step)?;
            dense += codes.data().len() * 4;
            packed += pack_ternary(codes.data())?.len();
        }
    }
    println!("weights: {dense} bytes as f32, {packed} bytes packed at 2 bits");

    let cfg = DetectConfig {
        score_thresh: 0.0,
        ..DetectConfig::default()
    };
    let a = Detector::new(q.clone(), Engine::FakeQuant, cfg)?.detect(&frames[0].pixels)?;
    let b = Detector::new(q, Engine::Integer, cfg)?.detect(&frames[0].pixels)?;
    println!("frame 0 top box, fake quant {:?}", a.first().map(|d| (d.x1, d.y1, d.x2, d.y2, d.score)));
    println!("frame 0 top box, integer    {:?}", b.first().map(|d| (d.x1, d.y1, d.x2, d.y2, d.score)));
    Ok(())
}

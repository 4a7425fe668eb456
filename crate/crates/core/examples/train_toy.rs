//! Progressive fp32 -> int8 -> int4 -> int3 -> ternary training on the toy
//! blob-face corpus, with held-out AP after every stage.
//!
//! cargo run --profile test --example train_toy -- [frames] [float_epochs] [qat_epochs]

use std::time::Instant;

use tfd::eval::{evaluate, EvalConfig};
use tfd::infer::{Detector, Engine};
use tfd::model::{build_network, fold_bn, ArchConfig};
use tfd::rawsim::scene::{toy_corpus, SceneConfig};
use tfd::rawsim::{LabeledFrame, NoiseParams, SynthConfig};
use tfd::train::{train_qat, TrainConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> tfd::Result<()> {
    env_logger::init();
    let n = arg(1, 400);
    let t = Instant::now();
    let raw = toy_corpus(n, 7, &SceneConfig::default(), &SynthConfig::default(), &NoiseParams::default())?;
    let frames: Vec<LabeledFrame> = raw.iter().map(LabeledFrame::from_raw).collect();
    let (train, test) = frames.split_at(n * 4 / 5);
    println!("synthesized {n} frames in {:.1?}", t.elapsed());

    let cfg = TrainConfig {
        float_epochs: arg(2, 10),
        epochs: arg(3, 2),
        ..TrainConfig::default()
    };
    let g = build_network(&ArchConfig::toy(), 1)?;
    let t = Instant::now();
    let out = train_qat(&g, train, &cfg)?;
    println!("trained {} stages in {:.1?}", out.stages.len(), t.elapsed());

    let ecfg = EvalConfig {
        dump_detections: false,
        ..EvalConfig::default()
    };
    for s in &out.stages {
        let engine = if s.stage.is_float() { Engine::Float } else { Engine::FakeQuant };
        let r = evaluate(&Detector::new(s.graph.clone(), engine, ecfg.detect_config())?, test, &ecfg)?;
        println!(
            "{:>7}  loss {:.3}  AP50 {:.3}  AP75 {:.3}  AP90 {:.3}  FP {:?}",
            s.stage.tag(),
            s.final_loss,
            r.ap50,
            r.ap75,
            r.ap90,
            r.fp_rate
        );
    }
    if let Some(last) = out.last().filter(|s| !s.stage.is_float()) {
        let det = Detector::new(fold_bn(&last.graph)?, Engine::Integer, ecfg.detect_config())?;
        let r = evaluate(&det, test, &ecfg)?;
        println!("integer engine, folded {}: AP50 {:.3}", last.stage.tag(), r.ap50);
    }
    if let Some(why) = out.aborted {
        println!("aborted: {why}");
    }
    Ok(())
}

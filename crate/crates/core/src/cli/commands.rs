use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{EffectiveConfig, RunConfig};
use super::manifest::{hash_outputs, RunManifest};
use super::Command;
use crate::error::{Error, Result};
use crate::eval::{cost_report, evaluate, render_table, subset_eval, CostReport, EvalReport, Subset, TableRow};
use crate::infer::{attach_quantizers, read_detections, write_detections, DetectionRecord, Detector, Engine};
use crate::model::{build_network, fold_bn, normalize_raw, NetworkGraph};
use crate::rawsim::scene::write_scene_sources;
use crate::rawsim::{load_frames, synthesize_corpus, LabeledFrame};
use crate::tensor::{Shape, Tensor};
use crate::train::{train_qat, write_log_csv, BitStage, TrainConfig};

/// Contents of `report.json` written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub stage: String,
    pub engine: Engine,
    pub folded: bool,
    pub eval: EvalReport,
    pub cost: CostReport,
}

#[derive(Serialize)]
struct StageSummary {
    stage: String,
    file: String,
    steps: usize,
    final_loss: f64,
}

fn abs(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

/// Input paths made absolute so a manifest replays from any directory.
fn absolutize(cmd: &Command) -> Result<Command> {
    let mut c = cmd.clone();
    match &mut c {
        Command::Toy { out, .. } | Command::Replay { out, .. } => *out = abs(out)?,
        Command::Synth { in_dir, ann, out } => {
            *in_dir = abs(in_dir)?;
            *ann = Some(abs(&ann.clone().unwrap_or_else(|| in_dir.join("annotations.jsonl")))?);
            *out = abs(out)?;
        }
        Command::Train { corpus, init, out, .. } => {
            *corpus = abs(corpus)?;
            if let Some(i) = init {
                *i = abs(i)?;
            }
            *out = abs(out)?;
        }
        Command::Quantize { ckpt, corpus, out, .. }
        | Command::Infer { ckpt, corpus, out, .. }
        | Command::Eval { ckpt, corpus, out, .. } => {
            *ckpt = abs(ckpt)?;
            *corpus = abs(corpus)?;
            *out = abs(out)?;
        }
        Command::Fold { ckpt, out } => {
            *ckpt = abs(ckpt)?;
            *out = abs(out)?;
        }
        Command::Render { corpus, detections, out, .. } => {
            *corpus = abs(corpus)?;
            if let Some(d) = detections {
                *d = abs(d)?;
            }
            *out = abs(out)?;
        }
    }
    Ok(c)
}

fn inputs(cmd: &Command) -> Vec<&Path> {
    match cmd {
        Command::Toy { .. } => vec![],
        Command::Synth { in_dir, .. } => vec![in_dir],
        Command::Train { corpus, .. } | Command::Render { corpus, .. } => vec![corpus],
        Command::Quantize { ckpt, corpus, .. } | Command::Infer { ckpt, corpus, .. } | Command::Eval { ckpt, corpus, .. } => {
            vec![ckpt, corpus]
        }
        Command::Fold { ckpt, .. } => vec![ckpt],
        Command::Replay { manifest, .. } => vec![manifest],
    }
}

/// Runs one command with an already resolved config. Commands writing into
/// `--out` finish by writing the run manifest.
pub fn execute(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let cmd = absolutize(cmd)?;
    let out = cmd.out().clone();
    for i in inputs(&cmd) {
        if i == out || out.starts_with(i) && i.is_dir() {
            return Err(Error::Config(format!("--out {} would write inside input {}", out.display(), i.display())));
        }
    }
    if let Command::Replay { manifest, out } = &cmd {
        return replay(manifest, out);
    }
    fs::create_dir_all(&out)?;
    let result = dispatch(&cmd, cfg, &out);
    // a training run that hit a non-finite loss still leaves its earlier stages
    if result.is_ok() || matches!(cmd, Command::Train { .. }) {
        RunManifest {
            tool: format!("tfd {}", env!("CARGO_PKG_VERSION")),
            invocation: cmd.clone(),
            config: EffectiveConfig::new(cfg)?,
            outputs: hash_outputs(&out)?,
        }
        .write(&out)?;
    }
    result
}

fn dispatch(cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    match cmd {
        Command::Toy { n, .. } => {
            write_scene_sources(out, *n, cfg.seed, &cfg.scene)?;
            Ok(())
        }
        Command::Synth { in_dir, ann, .. } => {
            let ann = ann.as_deref().expect("filled by absolutize");
            let m = synthesize_corpus(in_dir, ann, out, &cfg.synth, &cfg.noise, cfg.seed)?;
            log::info!("synthesized {} frames, skipped {}", m.entries.len(), m.skipped.len());
            Ok(())
        }
        Command::Train { corpus, bits, init, .. } => train(cfg, corpus, bits.as_deref(), init.as_deref(), out),
        Command::Quantize { ckpt, corpus, bits, .. } => {
            let (g, _) = load_checkpoint(ckpt, None)?;
            if g.folded {
                return Err(Error::Config("quantize expects an unfolded checkpoint".into()));
            }
            let stage: BitStage = bits.parse()?;
            let frames = load_frames(corpus)?;
            let n = cfg.train.batch_size.min(frames.len());
            let q = attach_quantizers(&g, stage.weights, stage.acts, &frames_tensor(&g, &frames[..n])?)?;
            save_checkpoint(&out.join(format!("{}.tfdw", stage.tag())), &q, &stage.tag())
        }
        Command::Fold { ckpt, .. } => {
            let (g, h) = load_checkpoint(ckpt, None)?;
            let f = fold_bn(&g)?;
            save_checkpoint(&out.join(format!("{}_folded.tfdw", h.stage)), &f, &h.stage)
        }
        Command::Infer { ckpt, corpus, engine, .. } => {
            let (g, _) = load_checkpoint(ckpt, None)?;
            let det = Detector::new(g, *engine, cfg.eval.detect_config())?;
            let frames = load_frames(corpus)?;
            let px: Vec<&[u8]> = frames.iter().map(|f| f.pixels.as_slice()).collect();
            let dets = det.detect_many(&px)?;
            let recs: Vec<DetectionRecord> =
                frames.iter().zip(&dets).map(|(f, d)| DetectionRecord::new(&f.id, d)).collect();
            write_detections(&out.join("detections.jsonl"), &recs)
        }
        Command::Eval {
            ckpt,
            corpus,
            engine,
            subsets,
            ..
        } => eval(cfg, ckpt, corpus, *engine, *subsets, out),
        Command::Render {
            corpus,
            detections,
            min_score,
            ..
        } => render(corpus, detections.as_deref(), *min_score, out),
        Command::Replay { .. } => unreachable!("handled by execute"),
    }
}

/// Normalized NCHW batch of `frames`.
fn frames_tensor(g: &NetworkGraph, frames: &[LabeledFrame]) -> Result<Tensor> {
    let (c, h, w) = g.input_dims();
    if frames.is_empty() {
        return Err(Error::Empty("calibration frames".into()));
    }
    let mut px = Vec::with_capacity(frames.len() * c * h * w);
    for f in frames {
        if f.pixels.len() != c * h * w {
            return Err(Error::shape(
                "input",
                format!("frame {} is {}x{}, network expects {w}x{h}", f.id, f.width, f.height),
            ));
        }
        px.extend_from_slice(&f.pixels);
    }
    Tensor::new(Shape::nchw(frames.len(), c, h, w)?, normalize_raw(&px))
}

fn train(cfg: &RunConfig, corpus: &Path, bits: Option<&str>, init: Option<&Path>, out: &Path) -> Result<()> {
    let arch = cfg.arch_config()?;
    let mut tc: TrainConfig = cfg.train.clone();
    if let Some(b) = bits {
        tc.bit_schedule = b.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
        tc.validate()?;
    }
    let g = match init {
        Some(p) => load_checkpoint(p, Some(&arch))?.0,
        None => build_network(&arch, cfg.seed)?,
    };
    let frames = load_frames(corpus)?;
    let outcome = train_qat(&g, &frames, &tc)?;
    let mut summary = Vec::new();
    for (i, s) in outcome.stages.iter().enumerate() {
        let file = format!("stage{i}_{}.tfdw", s.stage.tag());
        save_checkpoint(&out.join(&file), &s.graph, &s.stage.tag())?;
        summary.push(StageSummary {
            stage: s.stage.tag(),
            file,
            steps: s.steps,
            final_loss: s.final_loss,
        });
    }
    write_log_csv(&out.join("train_log.csv"), &outcome.log)?;
    fs::write(out.join("stages.json"), serde_json::to_vec_pretty(&summary)?)?;
    match outcome.aborted {
        Some(why) => Err(Error::NonFinite(format!("training aborted: {why}"))),
        None => Ok(()),
    }
}

fn eval(cfg: &RunConfig, ckpt: &Path, corpus: &Path, engine: Engine, subsets: bool, out: &Path) -> Result<()> {
    let (g, h) = load_checkpoint(ckpt, None)?;
    let (w, a) = g.precision();
    let cost = cost_report(&g, w, a);
    let det = Detector::new(g, engine, cfg.eval.detect_config())?;
    let frames = load_frames(corpus)?;
    let mut report = evaluate(&det, &frames, &cfg.eval)?;
    if subsets {
        for (k, v) in Subset::ALL.into_iter().enumerate() {
            let seed = cfg.seed.wrapping_add(1 + k as u64);
            let ap = subset_eval(&det, v, cfg.eval.subset_size, seed, &cfg.scene, &cfg.synth, &cfg.noise, &cfg.eval)?;
            match v {
                Subset::Small => report.ap_small = Some(ap),
                Subset::Noisy => report.ap_noisy = Some(ap),
                Subset::Backlight => report.ap_backlight = Some(ap),
            }
        }
    }
    let table = render_table(&[TableRow {
        label: &h.stage,
        eval: Some(&report),
        cost: &cost,
    }]);
    let o = EvalOutput {
        stage: h.stage,
        engine,
        folded: h.folded,
        eval: report,
        cost,
    };
    fs::write(out.join("report.json"), serde_json::to_vec_pretty(&o)?)?;
    fs::write(out.join("table.txt"), table)?;
    Ok(())
}

fn draw_box(img: &mut RgbImage, b: &[f64], color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let c = |v: f64, hi: i64| (v.round() as i64).clamp(0, hi - 1);
    let (x1, y1, x2, y2) = (c(b[0], w), c(b[1], h), c(b[2], w), c(b[3], h));
    for x in x1..=x2 {
        img.put_pixel(x as u32, y1 as u32, color);
        img.put_pixel(x as u32, y2 as u32, color);
    }
    for y in y1..=y2 {
        img.put_pixel(x1 as u32, y as u32, color);
        img.put_pixel(x2 as u32, y as u32, color);
    }
}

fn render(corpus: &Path, detections: Option<&Path>, min_score: f64, out: &Path) -> Result<()> {
    let frames = load_frames(corpus)?;
    let dets = match detections {
        Some(p) => read_detections(p)?,
        None => Vec::new(),
    };
    for f in &frames {
        let mut img = RgbImage::from_fn(f.width as u32, f.height as u32, |x, y| {
            let v = f.pixels[y as usize * f.width + x as usize];
            Rgb([v, v, v])
        });
        for b in &f.boxes {
            draw_box(&mut img, b, Rgb([0, 255, 0]));
        }
        for r in dets.iter().filter(|r| r.file == f.id) {
            for b in r.boxes.iter().filter(|b| b[4] >= min_score) {
                draw_box(&mut img, b, Rgb([255, 0, 0]));
            }
        }
        img.save(out.join(format!("{}.png", f.id)))?;
    }
    Ok(())
}

fn replay(manifest: &Path, out: &Path) -> Result<()> {
    let m = RunManifest::read(manifest)?;
    if m.invocation.out() == out {
        return Err(Error::Config("replay needs a fresh --out, not the recorded one".into()));
    }
    let cmd = m.invocation.with_out(out.to_path_buf());
    // numeric failures replay too; the hashes are compared either way
    let status = execute(&cmd, &m.config.run);
    let got = hash_outputs(out)?;
    if got != m.outputs {
        let diff: Vec<&String> = m
            .outputs
            .keys()
            .chain(got.keys())
            .filter(|k| m.outputs.get(*k) != got.get(*k))
            .collect();
        return Err(Error::Replay(format!("outputs differ: {diff:?}")));
    }
    status
}

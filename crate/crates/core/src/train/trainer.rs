use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::attach_quantizers;
use crate::model::{anchor_grid, normalize_raw, AnchorSet, NetworkGraph};
use crate::quant::{l2_norm, salsq_step, Precision, SamConfig};
use crate::rawsim::LabeledFrame;
use crate::tensor::{Shape, Tensor};

use super::loss::{detector_loss, LossParts};
use super::matching::{match_anchors, MatchConfig, MatchResult};
use super::optim::Sgd;
use super::params::{flat_grads, tape_forward, BnStats, ParamLayout};
use super::schedule::LrSchedule;
use super::tape::Tape;

/// Weight and activation precision of one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitStage {
    pub weights: Precision,
    pub acts: Precision,
}

impl BitStage {
    pub const fn new(weights: Precision, acts: Precision) -> Self {
        BitStage { weights, acts }
    }

    pub fn is_float(&self) -> bool {
        !self.weights.is_quantized()
    }

    /// Short tag such as `fp32`, `w4a4` or `wtera3`.
    pub fn tag(&self) -> String {
        if self.is_float() {
            return "fp32".into();
        }
        let b = |p: Precision| match p {
            Precision::Ternary => "ter".to_string(),
            Precision::Int(n) => n.to_string(),
            Precision::Float => "32".to_string(),
        };
        format!("w{}a{}", b(self.weights), b(self.acts))
    }
}

impl fmt::Display for BitStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for BitStage {
    type Err = Error;

    /// Inverse of [`BitStage::tag`]: `fp32`, `w8a8`, `wtera3`, ...
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bit stage `{s}` is not `fp32` or `w<bits>a<bits>`"));
        if s == "fp32" {
            return Ok(BitStage::new(Precision::Float, Precision::Float));
        }
        let body = s.strip_prefix('w').ok_or_else(bad)?;
        let cut = body.rfind('a').ok_or_else(bad)?;
        let p = |t: &str| match t {
            "ter" => Ok(Precision::Ternary),
            "32" => Ok(Precision::Float),
            n => n.parse::<u8>().map_err(|_| bad()).and_then(|b| Precision::from_str(&format!("int{b}"))),
        };
        Ok(BitStage::new(p(&body[..cut])?, p(&body[cut + 1..])?))
    }
}

pub fn default_bit_schedule() -> Vec<BitStage> {
    use Precision::*;
    vec![
        BitStage::new(Float, Float),
        BitStage::new(Int(8), Int(8)),
        BitStage::new(Int(4), Int(4)),
        BitStage::new(Int(3), Int(3)),
        BitStage::new(Ternary, Int(3)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs of the float stage.
    pub float_epochs: usize,
    /// Epochs of each quantized stage.
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the float stage.
    pub base_lr: f64,
    /// Peak learning rate of quantized stages.
    pub qat_lr: f64,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradient L2-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub bit_schedule: Vec<BitStage>,
    /// Used in quantized stages; the float stage is plain SGD.
    pub sam: SamConfig,
    pub matching: MatchConfig,
    pub neg_pos_ratio: usize,
    /// Random horizontal flips.
    pub flip: bool,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            float_epochs: 8,
            epochs: 2,
            batch_size: 16,
            base_lr: 0.05,
            qat_lr: 0.005,
            min_lr_ratio: 0.01,
            warmup_epochs: 0.5,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 10.0,
            bit_schedule: default_bit_schedule(),
            sam: SamConfig::default(),
            matching: MatchConfig::default(),
            neg_pos_ratio: 3,
            flip: true,
            bn_momentum: 0.99,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.bit_schedule.is_empty() {
            return Err(Error::Config("bit schedule is empty".into()));
        }
        for w in self.bit_schedule.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b.weights.storage_bits() > a.weights.storage_bits() || b.acts.storage_bits() > a.acts.storage_bits() {
                return Err(Error::Config(format!("bit widths must not increase: {a} then {b}")));
            }
        }
        for s in &self.bit_schedule {
            if s.weights.is_quantized() != s.acts.is_quantized() {
                return Err(Error::Config(format!("stage {s}: weights and activations must both be quantized")));
            }
            if s.acts == Precision::Ternary {
                return Err(Error::Config("ternary activations are not supported".into()));
            }
        }
        if !(self.base_lr > 0.0 && self.qat_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn momentum must lie in [0, 1)".into()));
        }
        SamConfig::new(self.sam.rho)?;
        Ok(())
    }
}

/// Horizontal mirror of a frame and its boxes.
fn flipped(s: &LabeledFrame) -> (Vec<u8>, Vec<[f64; 4]>) {
    let w = s.width;
    let mut px = s.pixels.clone();
    for row in px.chunks_mut(w) {
        row.reverse();
    }
    let wf = w as f64;
    let boxes = s.boxes.iter().map(|b| [wf - b[2], b[1], wf - b[0], b[3]]).collect();
    (px, boxes)
}

/// One CSV row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls_loss: f64,
    pub box_loss: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "stage,epoch,step,lr,loss,cls_loss,box_loss")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{:e},{:.9},{:.9},{:.9}",
            r.stage, r.epoch, r.step, r.lr, r.loss, r.cls_loss, r.box_loss
        )?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageCheckpoint {
    pub stage: BitStage,
    pub graph: NetworkGraph,
    pub steps: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub stages: Vec<StageCheckpoint>,
    pub log: Vec<LogRow>,
    /// Set when a stage stopped on a non-finite loss; earlier stages are kept.
    pub aborted: Option<String>,
}

impl TrainOutcome {
    pub fn last(&self) -> Option<&StageCheckpoint> {
        self.stages.last()
    }
}

fn stage_rng(seed: u64, stage: usize, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((stage as u64) << 32) | epoch as u64);
    r
}

/// Sample order and horizontal-flip flags of one epoch.
pub fn epoch_order(seed: u64, stage_index: usize, epoch: usize, n: usize, flip: bool) -> (Vec<usize>, Vec<bool>) {
    let mut rng = stage_rng(seed, stage_index, epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let flips = (0..n).map(|_| flip && rng.random_bool(0.5)).collect();
    (order, flips)
}

/// Normalized frames and their anchor assignments.
pub struct Batch {
    pub x: Tensor,
    pub matches: Vec<MatchResult>,
}

/// Builds a batch from `corpus[idx]`, mirroring the frames flagged in `flips`.
pub fn make_batch(
    g: &NetworkGraph,
    corpus: &[LabeledFrame],
    idx: &[usize],
    flips: &[bool],
    anchors: &AnchorSet,
    mc: &MatchConfig,
) -> Result<Batch> {
    let (c, h, w) = g.input_dims();
    let mut raw = Vec::with_capacity(idx.len() * c * h * w);
    let mut matches = Vec::with_capacity(idx.len());
    for (&i, &flip) in idx.iter().zip(flips) {
        let s = &corpus[i];
        if s.pixels.len() != c * h * w || s.width != w || s.height != h {
            return Err(Error::shape(
                "input",
                format!("sample {} is {}x{}, network expects {w}x{h}", s.id, s.width, s.height),
            ));
        }
        let (px, boxes) = if flip {
            flipped(s)
        } else {
            (s.pixels.clone(), s.boxes.clone())
        };
        raw.extend_from_slice(&px);
        matches.push(match_anchors(anchors, &boxes, mc));
    }
    let x = Tensor::new(Shape::nchw(idx.len(), c, h, w)?, normalize_raw(&raw))?;
    Ok(Batch { x, matches })
}

/// Loss and flat gradient of `g` on a batch, plus float-mode batch statistics.
#[allow(clippy::type_complexity)]
pub fn loss_and_grad(
    g: &NetworkGraph,
    layout: &ParamLayout,
    x: &Tensor,
    matches: &[MatchResult],
    neg_pos_ratio: usize,
) -> Result<(LossParts, Vec<f64>, BnStats)> {
    let mut tape = Tape::new();
    let fwd = tape_forward(&mut tape, g, layout, x)?;
    let (loss, parts) = detector_loss(&mut tape, fwd.cls, fwd.boxes, matches, neg_pos_ratio);
    let grads = tape.backward(loss)?;
    let flat = flat_grads(layout, &fwd, &grads);
    Ok((parts, flat, fwd.bn_stats))
}

/// Rescales `g` to at most `max_norm`; `0` disables clipping.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) {
    if max_norm > 0.0 {
        let n = l2_norm(g);
        if n > max_norm {
            let k = max_norm / n;
            g.iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// Trains one stage in place on `g`. `stage_index` only feeds the shuffling
/// seed. Quantizers for the stage are attached here, calibrated on the
/// stage's first batch.
pub fn train_stage(
    g: &NetworkGraph,
    corpus: &[LabeledFrame],
    cfg: &TrainConfig,
    stage: BitStage,
    stage_index: usize,
    log: &mut Vec<LogRow>,
) -> Result<StageCheckpoint> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    let anchors = anchor_grid(&g.anchor_config());
    let bs = cfg.batch_size.min(corpus.len());
    let per_epoch = corpus.len() / bs;
    let epochs = if stage.is_float() { cfg.float_epochs } else { cfg.epochs };
    let total = per_epoch * epochs;
    let peak = if stage.is_float() { cfg.base_lr } else { cfg.qat_lr };
    let sched = LrSchedule {
        base_lr: peak,
        min_lr: peak * cfg.min_lr_ratio,
        warmup: ((cfg.warmup_epochs * per_epoch as f64).round() as usize).min(total),
        total,
    };
    let sam = if stage.is_float() { SamConfig { rho: 0.0 } } else { cfg.sam };

    let orders: Vec<(Vec<usize>, Vec<bool>)> = (0..epochs.max(1))
        .map(|e| epoch_order(cfg.seed, stage_index, e, corpus.len(), cfg.flip))
        .collect();

    let mut graph = if stage.is_float() {
        let mut f = g.clone();
        f.strip_quantizers();
        f
    } else {
        let (order, flips) = &orders[0];
        let calib = make_batch(g, corpus, &order[..bs], &flips[..bs], &anchors, &cfg.matching)?;
        attach_quantizers(g, stage.weights, stage.acts, &calib.x)?
    };
    let layout = ParamLayout::new(&graph)?;
    let mut params = layout.gather(&graph);
    let mut opt = Sgd::new(peak, cfg.momentum, cfg.weight_decay, layout.decay_mask());
    let mut step = 0;
    let mut last_loss = f64::NAN;
    for (epoch, (order, flips)) in orders.iter().enumerate().take(epochs) {
        let mut epoch_loss = 0.0;
        for b in 0..per_epoch {
            let idx = &order[b * bs..(b + 1) * bs];
            let batch = make_batch(&graph, corpus, idx, &flips[b * bs..(b + 1) * bs], &anchors, &cfg.matching)?;
            opt.lr = sched.lr(step);
            let mut work = graph.clone();
            let mut first: Option<(LossParts, BnStats)> = None;
            salsq_step(
                &mut params,
                |p| {
                    layout.scatter(&mut work, p);
                    let (parts, mut grad, stats) =
                        loss_and_grad(&work, &layout, &batch.x, &batch.matches, cfg.neg_pos_ratio)?;
                    clip_grad_norm(&mut grad, cfg.grad_clip);
                    if first.is_none() {
                        first = Some((parts, stats));
                    }
                    Ok((parts.total, grad))
                },
                &mut opt,
                &sam,
            )?;
            layout.scatter(&mut graph, &params);
            params = layout.gather(&graph);
            let (parts, stats) = first.expect("first pass ran");
            let m = cfg.bn_momentum;
            for (j, mean, var) in stats {
                let bn = graph.layers[j].bn.as_mut().expect("bn");
                for c in 0..bn.channels() {
                    bn.mean[c] = m * bn.mean[c] + (1.0 - m) * mean[c];
                    bn.var[c] = m * bn.var[c] + (1.0 - m) * var[c];
                }
            }
            log.push(LogRow {
                stage: stage.tag(),
                epoch,
                step,
                lr: opt.lr,
                loss: parts.total,
                cls_loss: parts.cls,
                box_loss: parts.boxes,
            });
            epoch_loss += parts.total;
            last_loss = parts.total;
            step += 1;
        }
        log::info!(
            "stage {} epoch {epoch}: mean loss {:.4}",
            stage.tag(),
            epoch_loss / per_epoch.max(1) as f64
        );
    }
    Ok(StageCheckpoint {
        stage,
        graph,
        steps: step,
        final_loss: last_loss,
    })
}

/// Progressive training over `cfg.bit_schedule`, one checkpoint per stage.
/// A non-finite loss stops the schedule and keeps the stages finished so far.
pub fn train_qat(g: &NetworkGraph, corpus: &[LabeledFrame], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if g.folded {
        return Err(Error::Graph("training needs an unfolded graph".into()));
    }
    let mut log = Vec::new();
    let mut stages: Vec<StageCheckpoint> = Vec::new();
    let mut current = g.clone();
    for (i, &stage) in cfg.bit_schedule.iter().enumerate() {
        match train_stage(&current, corpus, cfg, stage, i, &mut log) {
            Ok(ck) => {
                current = ck.graph.clone();
                stages.push(ck);
            }
            Err(Error::NonFinite(msg)) => {
                log::warn!("stage {stage} aborted: non-finite loss ({msg})");
                return Ok(TrainOutcome {
                    stages,
                    log,
                    aborted: Some(format!("stage {stage}: {msg}")),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome {
        stages,
        log,
        aborted: None,
    })
}

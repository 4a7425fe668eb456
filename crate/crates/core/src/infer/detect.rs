use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{anchor_grid, normalize_raw, AnchorSet, NetworkGraph};
use crate::tensor::{Shape, Tensor};

use super::exec::{run_fake_quant, run_float, HeadOutputs};
use super::integer::{freeze, quantize_raw, run_frozen, IntegerGraph};
use super::nms::{decode_boxes, nms, Detection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Float,
    FakeQuant,
    Integer,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Float => "float",
            Engine::FakeQuant => "fakequant",
            Engine::Integer => "integer",
        })
    }
}

impl FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(Engine::Float),
            "fakequant" | "fake-quant" | "fake_quant" => Ok(Engine::FakeQuant),
            "integer" | "int" => Ok(Engine::Integer),
            _ => Err(Error::Config(format!("unknown engine {s:?} (float, fakequant, integer)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_keep: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_thresh: 0.5,
            nms_iou: 0.4,
            max_keep: 50,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config(format!("nms iou {} outside (0,1)", self.nms_iou)));
        }
        if !(0.0..=1.0).contains(&self.score_thresh) {
            return Err(Error::Config(format!("score threshold {} outside [0,1]", self.score_thresh)));
        }
        Ok(())
    }
}

/// Face probability from a `(background, face)` logit pair.
pub fn face_score(logits: &[f64]) -> f64 {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

/// Scores, decodes, drops degenerate boxes and runs NMS for one image.
pub fn postprocess(cls: &[f64], boxes: &[f64], anchors: &AnchorSet, cfg: &DetectConfig) -> Vec<Detection> {
    let decoded = decode_boxes(anchors, boxes, anchors.variances);
    let dets: Vec<Detection> = decoded
        .iter()
        .zip(cls.chunks(2))
        .enumerate()
        .filter_map(|(i, (b, l))| {
            let d = Detection {
                x1: b[0],
                y1: b[1],
                x2: b[2],
                y2: b[3],
                score: face_score(l),
                index: i,
            };
            (d.x2 > d.x1 && d.y2 > d.y1).then_some(d)
        })
        .collect();
    nms(&dets, cfg.nms_iou, cfg.score_thresh, cfg.max_keep)
}

/// A graph prepared for one engine.
pub struct Detector {
    pub graph: NetworkGraph,
    pub engine: Engine,
    pub cfg: DetectConfig,
    anchors: AnchorSet,
    frozen: Option<IntegerGraph>,
}

impl Detector {
    pub fn new(graph: NetworkGraph, engine: Engine, cfg: DetectConfig) -> Result<Self> {
        cfg.validate()?;
        let frozen = match engine {
            Engine::Integer => Some(freeze(&graph)?),
            Engine::FakeQuant => {
                if !graph.check_quantizers()? {
                    return Err(Error::Engine("fake-quant engine on a checkpoint without quantizers".into()));
                }
                None
            }
            Engine::Float => None,
        };
        let anchors = anchor_grid(&graph.anchor_config());
        Ok(Detector {
            graph,
            engine,
            cfg,
            anchors,
            frozen,
        })
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    /// Raw head outputs for a batch of 8-bit frames of the input size.
    pub fn heads(&self, frames: &[&[u8]]) -> Result<HeadOutputs> {
        let (c, h, w) = self.graph.input_dims();
        let n = frames.len();
        if n == 0 {
            return Err(Error::Empty("no frames".into()));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != c * h * w) {
            return Err(Error::shape(
                "input",
                format!("frame has {} pixels, network expects {}x{}x{}", f.len(), c, h, w),
            ));
        }
        let raw: Vec<u8> = frames.concat();
        match self.engine {
            Engine::Integer => run_frozen(self.frozen.as_ref().expect("frozen"), &quantize_raw(&raw, n, c, h, w)?),
            e => {
                let x = Tensor::new(Shape::nchw(n, c, h, w)?, normalize_raw(&raw))?;
                if e == Engine::Float {
                    run_float(&self.graph, &x)
                } else {
                    run_fake_quant(&self.graph, &x)
                }
            }
        }
    }

    pub fn detect(&self, frame: &[u8]) -> Result<Vec<Detection>> {
        let out = self.heads(&[frame])?;
        if !out.cls.is_finite() || !out.boxes.is_finite() {
            return Err(Error::NonFinite("detector outputs".into()));
        }
        Ok(postprocess(out.cls.data(), out.boxes.data(), &self.anchors, &self.cfg))
    }

    /// One image per task; results in input order.
    pub fn detect_many(&self, frames: &[&[u8]]) -> Result<Vec<Vec<Detection>>> {
        frames.par_iter().map(|f| self.detect(f)).collect()
    }
}

/// One line of a detection dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub file: String,
    /// `[x1, y1, x2, y2, score]`.
    pub boxes: Vec<[f64; 5]>,
}

impl DetectionRecord {
    pub fn new(file: impl Into<String>, dets: &[Detection]) -> Self {
        DetectionRecord {
            file: file.into(),
            boxes: dets.iter().map(|d| [d.x1, d.y1, d.x2, d.y2, d.score]).collect(),
        }
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.boxes
            .iter()
            .enumerate()
            .map(|(i, b)| Detection {
                x1: b[0],
                y1: b[1],
                x2: b[2],
                y2: b[3],
                score: b[4],
                index: i,
            })
            .collect()
    }
}

pub fn write_detections(path: &Path, recs: &[DetectionRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in recs {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn engine_names() {
        for e in [Engine::Float, Engine::FakeQuant, Engine::Integer] {
            assert_eq!(e.to_string().parse::<Engine>().unwrap(), e);
        }
        assert!("gpu".parse::<Engine>().is_err());
    }

    #[test]
    fn score_is_softmax() {
        assert!((face_score(&[0.0, 0.0]) - 0.5).abs() < 1e-15);
        let s = face_score(&[1.0, 3.0]);
        let e = (3f64).exp() / ((1f64).exp() + (3f64).exp());
        assert!((s - e).abs() < 1e-12);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let recs = vec![
            DetectionRecord {
                file: "a.pgm".into(),
                boxes: vec![[1.0, 2.0, 3.0, 4.0, 0.9]],
            },
            DetectionRecord {
                file: "b.pgm".into(),
                boxes: vec![],
            },
        ];
        write_detections(&p, &recs).unwrap();
        assert_eq!(read_detections(&p).unwrap(), recs);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("{\"file\":\"a.pgm\",\"boxes\":[[1.0,2.0,3.0,4.0,0.9]]}"));
    }

    #[test]
    fn integer_engine_needs_folded() {
        let g = crate::model::build_network(&crate::model::ArchConfig::toy(), 0).unwrap();
        assert!(matches!(
            Detector::new(g, Engine::Integer, DetectConfig::default()),
            Err(Error::Engine(_))
        ));
    }
}

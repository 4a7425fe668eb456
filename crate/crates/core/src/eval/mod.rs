//! Accuracy metrics (AP at several IoU thresholds, robustness subsets,
//! false-positive rate) and efficiency accounting.

mod ap;
mod cost;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{DetectConfig, Detection, DetectionRecord, Detector};
use crate::quant::Precision;
use crate::rawsim::scene::{toy_corpus, SceneConfig};
use crate::rawsim::{LabeledFrame, NoiseParams, SynthConfig};

pub use ap::{average_precision, false_positive_rate, match_detections, pr_curve, PrPoint};
pub use cost::{cost_report, layer_macs, node_sizes, total_macs, CostReport, ACC_LOG2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Detections below this score are dropped before ranking.
    pub score_floor: f64,
    /// A faceless frame counts as a false positive when any box reaches this score.
    pub fp_score_thresh: f64,
    pub nms_iou: f64,
    pub max_keep: usize,
    /// Frames per robustness subset.
    pub subset_size: usize,
    /// Keep per-frame detections in the report.
    pub dump_detections: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_floor: 0.05,
            fp_score_thresh: 0.5,
            nms_iou: 0.4,
            max_keep: 50,
            subset_size: 200,
            dump_detections: true,
        }
    }
}

impl EvalConfig {
    pub fn detect_config(&self) -> DetectConfig {
        DetectConfig {
            score_thresh: self.score_floor,
            nms_iou: self.nms_iou,
            max_keep: self.max_keep,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub num_faces: usize,
    pub num_faceless: usize,
    pub ap50: f64,
    pub ap75: f64,
    pub ap90: f64,
    pub ap_small: Option<f64>,
    pub ap_noisy: Option<f64>,
    pub ap_backlight: Option<f64>,
    /// `None` when the set has no faceless frame.
    pub fp_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detections: Vec<DetectionRecord>,
}

/// AP50/75/90 and the faceless false-positive rate from precomputed detections.
pub fn score_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<[f64; 4]>],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let faceless: Vec<Vec<Detection>> = dets
        .iter()
        .zip(gts)
        .filter(|(_, g)| g.is_empty())
        .map(|(d, _)| d.clone())
        .collect();
    let fp_rate = if faceless.is_empty() {
        None
    } else {
        Some(false_positive_rate(&faceless, cfg.fp_score_thresh)?)
    };
    Ok(EvalReport {
        num_images: dets.len(),
        num_faces: gts.iter().map(Vec::len).sum(),
        num_faceless: faceless.len(),
        ap50: average_precision(dets, gts, 0.5)?,
        ap75: average_precision(dets, gts, 0.75)?,
        ap90: average_precision(dets, gts, 0.9)?,
        ap_small: None,
        ap_noisy: None,
        ap_backlight: None,
        fp_rate,
        detections: Vec::new(),
    })
}

/// Runs `det` over `frames` and scores the result. The detector's own score
/// threshold acts as the ranking floor.
pub fn evaluate(det: &Detector, frames: &[LabeledFrame], cfg: &EvalConfig) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let px: Vec<&[u8]> = frames.iter().map(|f| f.pixels.as_slice()).collect();
    let dets = det.detect_many(&px)?;
    let gts: Vec<Vec<[f64; 4]>> = frames.iter().map(|f| f.boxes.clone()).collect();
    let mut r = score_detections(&dets, &gts, cfg)?;
    if cfg.dump_detections {
        r.detections = frames.iter().zip(&dets).map(|(f, d)| DetectionRecord::new(&f.id, d)).collect();
    }
    Ok(r)
}

/// Robustness subsets, each changing one synthesis knob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    /// Faces 4 to 10 percent of the frame.
    Small,
    /// Four times the photon-noise gain.
    Noisy,
    /// Backlight applied to every frame.
    Backlight,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Small, Subset::Noisy, Subset::Backlight];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Small => "small",
            Subset::Noisy => "noisy",
            Subset::Backlight => "backlight",
        }
    }

    pub fn configure(self, synth: &SynthConfig, noise: &NoiseParams) -> (SynthConfig, NoiseParams) {
        let (mut s, mut n) = (synth.clone(), *noise);
        match self {
            Subset::Small => s.face_ratio_range = (0.04, 0.10),
            Subset::Noisy => n.gain *= 4.0,
            Subset::Backlight => s.backlight = true,
        }
        (s, n)
    }
}

/// Procedural frames for one subset. Scenes always carry at least one face.
pub fn subset_corpus(
    v: Subset,
    n: usize,
    seed: u64,
    scene: &SceneConfig,
    synth: &SynthConfig,
    noise: &NoiseParams,
) -> Result<Vec<LabeledFrame>> {
    let (s, nz) = v.configure(synth, noise);
    let scene = SceneConfig {
        faceless_fraction: 0.0,
        ..scene.clone()
    };
    Ok(toy_corpus(n, seed, &scene, &s, &nz)?.iter().map(LabeledFrame::from_raw).collect())
}

/// AP@0.50 of `det` on a freshly synthesized subset.
#[allow(clippy::too_many_arguments)]
pub fn subset_eval(
    det: &Detector,
    v: Subset,
    n: usize,
    seed: u64,
    scene: &SceneConfig,
    synth: &SynthConfig,
    noise: &NoiseParams,
    cfg: &EvalConfig,
) -> Result<f64> {
    let frames = subset_corpus(v, n, seed, scene, synth, noise)?;
    let cfg = EvalConfig {
        dump_detections: false,
        ..cfg.clone()
    };
    Ok(evaluate(det, &frames, &cfg)?.ap50)
}

/// `FP32`, `W4A4`, `WterA3`.
pub fn precision_label(w: Precision, a: Precision) -> String {
    let b = |p: Precision| match p {
        Precision::Float => "32".to_string(),
        Precision::Int(n) => n.to_string(),
        Precision::Ternary => "ter".to_string(),
    };
    if !w.is_quantized() && !a.is_quantized() {
        "FP32".into()
    } else {
        format!("W{}A{}", b(w), b(a))
    }
}

/// One table row: a label, optional accuracy and the cost columns.
pub struct TableRow<'a> {
    pub label: &'a str,
    pub eval: Option<&'a EvalReport>,
    pub cost: &'a CostReport,
}

/// Text table with accuracy columns first, then efficiency.
pub fn render_table(rows: &[TableRow]) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
    let fp = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}%", 100.0 * x));
    let mut s = String::new();
    let head = [
        "Approach", "Precision", "AP50", "AP75", "AP90", "AP_S", "AP_N", "AP_B", "FP", "Layers", "Params(M)",
        "FLOPs(G)", "BOPs(M)",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let e = r.eval;
            vec![
                r.label.to_string(),
                precision_label(r.cost.weights, r.cost.acts),
                pct(e.map(|e| e.ap50)),
                pct(e.map(|e| e.ap75)),
                pct(e.map(|e| e.ap90)),
                pct(e.and_then(|e| e.ap_small)),
                pct(e.and_then(|e| e.ap_noisy)),
                pct(e.and_then(|e| e.ap_backlight)),
                fp(e.and_then(|e| e.fp_rate)),
                r.cost.num_layers.to_string(),
                format!("{:.3}", r.cost.params_m),
                format!("{:.3}", r.cost.flops_g),
                format!("{:.0}", r.cost.bops_m),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([head[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String], s: &mut String| {
        let row: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(s, "{}", row.join("  ").trim_end());
    };
    line(&head.map(String::from), &mut s);
    let _ = writeln!(s, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    for r in &body {
        line(r, &mut s);
    }
    s
}

use serde::{Deserialize, Serialize};

use crate::infer::iou;
use crate::model::{encode_box, AnchorSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub iou_pos: f64,
    pub iou_neg: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            iou_pos: 0.5,
            iou_neg: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<Label>,
    /// Ground-truth index for positives.
    pub gt_index: Vec<Option<usize>>,
    /// Encoded regression targets; zero for non-positives.
    pub targets: Vec<[f64; 4]>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Positive).count()
    }
}

/// Labels anchors against corner-form ground truth boxes. An anchor is
/// positive if its best IoU reaches `iou_pos` or it is some box's best
/// anchor, negative if its best IoU is under `iou_neg`, otherwise ignored.
pub fn match_anchors(anchors: &AnchorSet, gt: &[[f64; 4]], cfg: &MatchConfig) -> MatchResult {
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt: Vec<Option<usize>> = vec![None; n];
    let corners: Vec<[f64; 4]> = anchors.anchors.iter().map(|a| a.corners()).collect();
    let mut forced: Vec<(usize, usize)> = Vec::new();
    for (g, b) in gt.iter().enumerate() {
        if !(b[2] > b[0] && b[3] > b[1]) {
            continue;
        }
        let mut arg = (0usize, -1.0f64);
        for (k, c) in corners.iter().enumerate() {
            let v = iou(c, b);
            if v > best_iou[k] || best_gt[k].is_none() && v > 0.0 {
                best_iou[k] = v;
                best_gt[k] = Some(g);
            }
            if v > arg.1 {
                arg = (k, v);
            }
        }
        forced.push((arg.0, g));
    }
    let mut labels: Vec<Label> = best_iou
        .iter()
        .map(|&v| {
            if v >= cfg.iou_pos {
                Label::Positive
            } else if v < cfg.iou_neg {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect();
    for (k, g) in forced {
        labels[k] = Label::Positive;
        best_gt[k] = Some(g);
    }
    let mut targets = vec![[0.0; 4]; n];
    let mut gt_index = vec![None; n];
    for k in 0..n {
        if labels[k] == Label::Positive {
            let g = best_gt[k].expect("positive has a box");
            gt_index[k] = Some(g);
            targets[k] = encode_box(&anchors.anchors[k], &gt[g], anchors.variances);
        }
    }
    MatchResult {
        labels,
        gt_index,
        targets,
    }
}

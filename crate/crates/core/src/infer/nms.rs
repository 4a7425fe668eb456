use serde::{Deserialize, Serialize};

use crate::model::{decode_box, AnchorSet};

/// A scored box in input-pixel corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    /// Anchor that produced the box; breaks score ties.
    pub index: usize,
}

impl Detection {
    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Decodes one row of deltas per anchor and clips to the image.
pub fn decode_boxes(anchors: &AnchorSet, deltas: &[f64], variances: (f64, f64)) -> Vec<[f64; 4]> {
    assert_eq!(deltas.len(), 4 * anchors.len(), "one delta row per anchor");
    let (w, h) = (anchors.image_size.0 as f64, anchors.image_size.1 as f64);
    anchors
        .anchors
        .iter()
        .zip(deltas.chunks(4))
        .map(|(a, d)| {
            let b = decode_box(a, d, variances);
            [b[0].clamp(0.0, w), b[1].clamp(0.0, h), b[2].clamp(0.0, w), b[3].clamp(0.0, h)]
        })
        .collect()
}

/// Greedy suppression in descending score order, ties to the lower index.
/// Drops boxes under `score_thresh` and suppresses on IoU above `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64, score_thresh: f64, max_keep: usize) -> Vec<Detection> {
    let mut cand: Vec<Detection> = dets.iter().copied().filter(|d| d.score >= score_thresh).collect();
    cand.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    let mut keep: Vec<Detection> = Vec::new();
    for d in cand {
        if keep.len() >= max_keep {
            break;
        }
        if keep.iter().all(|k| iou(&k.corners(), &d.corners()) <= iou_thresh) {
            keep.push(d);
        }
    }
    keep
}

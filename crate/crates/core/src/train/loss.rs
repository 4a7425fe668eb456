use serde::{Deserialize, Serialize};

use super::matching::{Label, MatchResult};
use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub boxes: f64,
    pub num_pos: usize,
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Cross-entropy of a `(background, face)` logit pair and its gradient.
fn ce(l: &[f64], face: bool) -> (f64, [f64; 2]) {
    let m = l[0].max(l[1]);
    let (e0, e1) = ((l[0] - m).exp(), (l[1] - m).exp());
    let z = e0 + e1;
    let lse = m + z.ln();
    let (p0, p1) = (e0 / z, e1 / z);
    if face {
        (lse - l[1], [p0, p1 - 1.0])
    } else {
        (lse - l[0], [p0 - 1.0, p1])
    }
}

/// Loss value and gradients with respect to the `[N, A, 2]` logits and
/// `[N, A, 4]` deltas.
///
/// Softmax cross-entropy over all positives and the hardest negatives (at
/// most `neg_pos_ratio` per positive, and that many when an image has no
/// positives), plus smooth-L1 on positive deltas, divided by the batch's
/// positive count clamped to at least one.
pub fn detector_loss_values(
    cls: &[f64],
    boxes: &[f64],
    matches: &[MatchResult],
    neg_pos_ratio: usize,
) -> (LossParts, Vec<f64>, Vec<f64>) {
    let n = matches.len();
    let a = cls.len() / (2 * n.max(1));
    assert_eq!(cls.len(), 2 * a * n, "logits do not match the anchor count");
    assert_eq!(boxes.len(), 4 * a * n, "deltas do not match the anchor count");
    let total_pos: usize = matches.iter().map(|m| m.num_positive()).sum();
    let norm = total_pos.max(1) as f64;
    let mut g_cls = vec![0.0; cls.len()];
    let mut g_box = vec![0.0; boxes.len()];
    let (mut cls_loss, mut box_loss) = (0.0, 0.0);
    for (b, m) in matches.iter().enumerate() {
        assert_eq!(m.labels.len(), a, "match result for a different anchor set");
        let pos = m.num_positive();
        let mut negs: Vec<(f64, usize)> = Vec::new();
        for k in 0..a {
            let row = (b * a + k) * 2;
            match m.labels[k] {
                Label::Positive => {
                    let (l, g) = ce(&cls[row..row + 2], true);
                    cls_loss += l;
                    g_cls[row] += g[0] / norm;
                    g_cls[row + 1] += g[1] / norm;
                    let brow = (b * a + k) * 4;
                    for i in 0..4 {
                        let d = boxes[brow + i] - m.targets[k][i];
                        box_loss += smooth_l1(d);
                        g_box[brow + i] += smooth_l1_grad(d) / norm;
                    }
                }
                Label::Negative => negs.push((ce(&cls[row..row + 2], false).0, k)),
                Label::Ignore => {}
            }
        }
        negs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let take = (neg_pos_ratio * pos.max(1)).min(negs.len());
        for &(_, k) in &negs[..take] {
            let row = (b * a + k) * 2;
            let (l, g) = ce(&cls[row..row + 2], false);
            cls_loss += l;
            g_cls[row] += g[0] / norm;
            g_cls[row + 1] += g[1] / norm;
        }
    }
    let parts = LossParts {
        total: (cls_loss + box_loss) / norm,
        cls: cls_loss / norm,
        boxes: box_loss / norm,
        num_pos: total_pos,
    };
    (parts, g_cls, g_box)
}

/// Records the detector loss on the tape.
pub fn detector_loss(tape: &mut Tape, cls: Var, boxes: Var, matches: &[MatchResult], neg_pos_ratio: usize) -> (Var, LossParts) {
    let (parts, gc, gb) = detector_loss_values(tape.value(cls).data(), tape.value(boxes).data(), matches, neg_pos_ratio);
    let v = tape.custom_scalar("detector_loss", &[cls, boxes], parts.total, vec![gc, gb]);
    (v, parts)
}

//! Helpers shared by the integration tests.
#![allow(dead_code)]

use tfd::infer::{iou, Detection};

/// True positives among the `k` highest-ranked detections, matching each
/// to the free ground truth box of highest IoU.
pub fn tp_at(dets: &[Vec<Detection>], gts: &[Vec<[f64; 4]>], t: f64, k: usize) -> usize {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, x) in d.iter().enumerate() {
            all.push((x.score, i, j));
        }
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut taken = vec![Vec::new(); gts.len()];
    let mut tp = 0;
    for &(_, i, j) in &all[..k] {
        let c = dets[i][j].corners();
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in gts[i].iter().enumerate() {
            let v = iou(&c, b);
            if !taken[i].contains(&g) && v >= t && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[i].push(g);
            tp += 1;
        }
    }
    tp
}

/// AP by enumerating every cut-off of the ranked list: each recall step is
/// weighted by the best precision at that cut-off or any deeper one.
pub fn brute_ap(dets: &[Vec<Detection>], gts: &[Vec<[f64; 4]>], t: f64) -> f64 {
    let m: usize = dets.iter().map(Vec::len).sum();
    let n: usize = gts.iter().map(Vec::len).sum();
    let tp: Vec<usize> = (0..=m).map(|k| tp_at(dets, gts, t, k)).collect();
    let prec = |k: usize| tp[k] as f64 / k as f64;
    let mut ap = 0.0;
    for k in 1..=m {
        if tp[k] > tp[k - 1] {
            let best = (k..=m).map(prec).fold(0.0, f64::max);
            ap += (tp[k] - tp[k - 1]) as f64 / n as f64 * best;
        }
    }
    ap
}

/// Mean best-IoU of each box in `a` against the boxes of the same frame in
/// `b`, both directions pooled. Frames where both lists are empty count as
/// full agreement.
pub fn mean_agreement(a: &[Vec<Detection>], b: &[Vec<Detection>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        if x.is_empty() && y.is_empty() {
            total += 1.0;
            n += 1;
            continue;
        }
        for (p, q) in [(x, y), (y, x)] {
            for d in p {
                total += q.iter().map(|e| iou(&d.corners(), &e.corners())).fold(0.0, f64::max);
                n += 1;
            }
        }
    }
    if n == 0 {
        1.0
    } else {
        total / n as f64
    }
}

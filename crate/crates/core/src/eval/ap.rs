use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{iou, Detection};

/// One point of the precision-recall curve, after the `k`-th ranked detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Ranks all detections by descending score (ties: image order, then
/// position within the image) and greedily matches each one to the unmatched
/// ground truth box of its image with the highest IoU. Returns
/// `(score, is_true_positive)` in rank order and the number of ground truth
/// boxes.
pub fn match_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<[f64; 4]>],
    iou_thresh: f64,
) -> Result<(Vec<(f64, bool)>, usize)> {
    if dets.len() != gts.len() {
        return Err(Error::shape(
            "eval",
            format!("{} detection lists for {} images", dets.len(), gts.len()),
        ));
    }
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::Config(format!("iou threshold {iou_thresh} outside (0, 1]")));
    }
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, det) in d.iter().enumerate() {
            if !det.score.is_finite() {
                return Err(Error::NonFinite(format!("detection score in image {i}")));
            }
            ranked.push((i, j));
        }
    }
    ranked.sort_by(|a, b| {
        let (sa, sb) = (dets[a.0][a.1].score, dets[b.0][b.1].score);
        sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then(a.cmp(b))
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let out = ranked
        .into_iter()
        .map(|(i, j)| {
            let d = &dets[i][j];
            let c = d.corners();
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gts[i].iter().enumerate() {
                if used[i][k] {
                    continue;
                }
                let v = iou(&c, g);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            if let Some((k, _)) = best {
                used[i][k] = true;
            }
            (d.score, best.is_some())
        })
        .collect();
    Ok((out, gts.iter().map(Vec::len).sum()))
}

pub fn pr_curve(dets: &[Vec<Detection>], gts: &[Vec<[f64; 4]>], iou_thresh: f64) -> Result<Vec<PrPoint>> {
    let (ranked, n_gt) = match_detections(dets, gts, iou_thresh)?;
    if n_gt == 0 {
        return Err(Error::Empty("average precision needs at least one ground truth box".into()));
    }
    let mut tp = 0usize;
    Ok(ranked
        .iter()
        .enumerate()
        .map(|(k, &(score, hit))| {
            tp += hit as usize;
            PrPoint {
                score,
                recall: tp as f64 / n_gt as f64,
                precision: tp as f64 / (k + 1) as f64,
            }
        })
        .collect())
}

/// Area under the precision-recall curve with all-points interpolation:
/// each recall step is weighted by the best precision at that recall or
/// beyond.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<[f64; 4]>], iou_thresh: f64) -> Result<f64> {
    let curve = pr_curve(dets, gts, iou_thresh)?;
    let mut envelope = 0.0f64;
    let mut ap = 0.0;
    let mut next_recall = curve.last().map_or(0.0, |p| p.recall);
    for p in curve.iter().rev() {
        // p.recall <= next_recall; the step from p to the following point
        ap += (next_recall - p.recall) * envelope;
        envelope = envelope.max(p.precision);
        next_recall = p.recall;
    }
    ap += next_recall * envelope;
    Ok(ap.clamp(0.0, 1.0))
}

/// Share of faceless frames with at least one detection scoring at least
/// `score_thresh`.
pub fn false_positive_rate(dets: &[Vec<Detection>], score_thresh: f64) -> Result<f64> {
    if dets.is_empty() {
        return Err(Error::Empty("false positive rate needs at least one faceless image".into()));
    }
    let fired = dets.iter().filter(|d| d.iter().any(|x| x.score >= score_thresh)).count();
    Ok(fired as f64 / dets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(b: [f64; 4], score: f64) -> Detection {
        Detection {
            x1: b[0],
            y1: b[1],
            x2: b[2],
            y2: b[3],
            score,
            index: 0,
        }
    }

    /// Number of true positives among the `k` best-scored detections, by a
    /// fresh ranking and greedy matching of that subset alone.
    fn tp_at(dets: &[Vec<Detection>], gts: &[Vec<[f64; 4]>], t: f64, k: usize) -> usize {
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
            let cand = (0..gts[i].len())
                .filter(|g| !taken[i].contains(g))
                .map(|g| (g, iou(&c, &gts[i][g])))
                .filter(|&(_, v)| v >= t)
                .fold(None::<(usize, f64)>, |best, (g, v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((g, v)),
                });
            if let Some((g, _)) = cand {
                taken[i].push(g);
                tp += 1;
            }
        }
        tp
    }

    /// Exhaustive PR enumeration: precision and recall at every cut-off, AP
    /// as the sum over recall increments of the best precision at any
    /// deeper cut-off.
    fn brute_ap(dets: &[Vec<Detection>], gts: &[Vec<[f64; 4]>], t: f64) -> f64 {
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

    #[test]
    fn perfect_and_empty() {
        let gts = vec![vec![[0.0, 0.0, 10.0, 10.0]], vec![[5.0, 5.0, 20.0, 30.0], [40.0, 40.0, 50.0, 50.0]]];
        let dets: Vec<Vec<Detection>> =
            gts.iter().map(|g| g.iter().enumerate().map(|(i, b)| det(*b, 0.1 + i as f64)).collect()).collect();
        assert_eq!(average_precision(&dets, &gts, 0.9).unwrap(), 1.0);
        let none = vec![vec![], vec![]];
        assert_eq!(average_precision(&none, &gts, 0.5).unwrap(), 0.0);
        assert!(matches!(average_precision(&none, &[vec![], vec![]], 0.5), Err(Error::Empty(_))));
    }

    #[test]
    fn planted_pattern_by_hand() {
        // ranks: TP, FP, TP, FP; two GTs -> recall steps at ranks 1 and 3
        // envelope precisions 1 and 2/3 -> AP = 0.5 * 1 + 0.5 * 2/3
        let gts = vec![vec![[0.0, 0.0, 10.0, 10.0]], vec![[20.0, 20.0, 30.0, 30.0]]];
        let dets = vec![
            vec![det([0.0, 0.0, 10.0, 10.0], 0.9), det([50.0, 50.0, 60.0, 60.0], 0.8)],
            vec![det([20.0, 20.0, 30.0, 30.0], 0.7), det([20.0, 20.0, 30.0, 30.0], 0.6)],
        ];
        let ap = average_precision(&dets, &gts, 0.5).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_is_false_positive() {
        let gts = vec![vec![[0.0, 0.0, 10.0, 10.0]]];
        let dets = vec![vec![det([0.0, 0.0, 10.0, 10.0], 0.9), det([0.0, 0.0, 10.0, 10.0], 0.8)]];
        let (r, _) = match_detections(&dets, &gts, 0.5).unwrap();
        assert_eq!(r.iter().map(|x| x.1).collect::<Vec<_>>(), vec![true, false]);
    }

    #[test]
    fn fp_rate_counting() {
        let hit = vec![det([0.0, 0.0, 1.0, 1.0], 0.9)];
        let mut d: Vec<Vec<Detection>> = vec![vec![]; 200];
        assert_eq!(false_positive_rate(&d, 0.5).unwrap(), 0.0);
        for x in d.iter_mut().take(5) {
            *x = hit.clone();
        }
        assert!((false_positive_rate(&d, 0.5).unwrap() - 0.025).abs() < 1e-15);
        let all = vec![hit.clone(); 7];
        assert_eq!(false_positive_rate(&all, 0.5).unwrap(), 1.0);
        assert_eq!(false_positive_rate(&all, 0.95).unwrap(), 0.0);
        assert!(false_positive_rate(&[], 0.5).is_err());
    }

    fn random_set(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<[f64; 4]>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..5 {
            let g: Vec<[f64; 4]> = (0..rng.random_range(0..4))
                .map(|_| {
                    let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
                    [x, y, x + rng.random_range(10.0..40.0), y + rng.random_range(10.0..40.0)]
                })
                .collect();
            let mut d = Vec::new();
            for b in &g {
                for _ in 0..rng.random_range(0..3) {
                    let j = rng.random_range(-4.0..4.0);
                    d.push(det([b[0] + j, b[1] - j, b[2] + j, b[3]], rng.random_range(0.0..1.0)));
                }
            }
            for _ in 0..rng.random_range(0..3) {
                let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
                d.push(det([x, y, x + 20.0, y + 20.0], rng.random_range(0.0..1.0)));
            }
            gts.push(g);
            dets.push(d);
        }
        if gts.iter().all(Vec::is_empty) {
            gts[0].push([0.0, 0.0, 10.0, 10.0]);
        }
        (dets, gts)
    }

    #[test]
    fn matches_brute_force_on_planted_sets() {
        for seed in 0..200 {
            let (dets, gts) = random_set(seed);
            for t in [0.5, 0.75, 0.9] {
                let ap = average_precision(&dets, &gts, t).unwrap();
                assert!((ap - brute_ap(&dets, &gts, t)).abs() < 1e-12, "seed {seed} iou {t}");
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_in_threshold_and_score_invariant(seed in 0u64..10_000) {
            let (dets, gts) = random_set(seed);
            let a50 = average_precision(&dets, &gts, 0.5).unwrap();
            let a75 = average_precision(&dets, &gts, 0.75).unwrap();
            let a90 = average_precision(&dets, &gts, 0.9).unwrap();
            prop_assert!(a50 >= a75 && a75 >= a90);
            prop_assert!((0.0..=1.0).contains(&a50));
            let warped: Vec<Vec<Detection>> = dets
                .iter()
                .map(|d| d.iter().map(|x| Detection { score: (3.0 * x.score).exp() - 7.0, ..*x }).collect())
                .collect();
            prop_assert_eq!(average_precision(&warped, &gts, 0.5).unwrap(), a50);
        }
    }
}

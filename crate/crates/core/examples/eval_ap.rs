//! Average precision on a hand-made set of detections, at the three IoU
//! thresholds, with the precision/recall curve behind AP50.
//!
//! cargo run --example eval_ap

use tfd::eval::{average_precision, false_positive_rate, pr_curve};
use tfd::infer::Detection;

fn det(b: [f64; 4], score: f64, index: usize) -> Detection {
    Detection {
        x1: b[0],
        y1: b[1],
        x2: b[2],
        y2: b[3],
        score,
        index,
    }
}

fn main() -> tfd::Result<()> {
    let gts = vec![
        vec![[10.0, 10.0, 40.0, 40.0], [60.0, 20.0, 80.0, 45.0]],
        vec![[30.0, 30.0, 70.0, 70.0]],
        vec![],
    ];
    let dets = vec![
        vec![
            det([10.0, 10.0, 40.0, 40.0], 0.95, 0),
            det([62.0, 22.0, 82.0, 47.0], 0.80, 1),
            det([11.0, 9.0, 41.0, 41.0], 0.60, 2),
        ],
        vec![det([34.0, 33.0, 74.0, 75.0], 0.90, 0)],
        vec![det([100.0, 50.0, 120.0, 70.0], 0.55, 0)],
    ];
    for t in [0.5, 0.75, 0.9] {
        println!("AP@{t:.2} = {:.3}", average_precision(&dets, &gts, t)?);
    }
    println!("\nPR curve at IoU 0.5:");
    for p in pr_curve(&dets, &gts, 0.5)? {
        println!("  score {:.2}  recall {:.3}  precision {:.3}", p.score, p.recall, p.precision);
    }
    println!("\nfalse positives on the faceless frame at 0.5: {:.2}", false_positive_rate(&dets[2..], 0.5)?);
    Ok(())
}

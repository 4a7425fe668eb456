//! Anchor grid of the default detector, box encoding and greedy NMS.
//!
//! cargo run --example anchors_nms

use tfd::infer::{nms, Detection};
use tfd::model::{anchor_grid, build_network, decode_box, encode_box, ArchConfig};

fn main() -> tfd::Result<()> {
    let g = build_network(&ArchConfig::default_arch(), 0)?;
    let cfg = g.anchor_config();
    let set = anchor_grid(&cfg);
    let (rows, cols) = cfg.grid_dims();
    println!(
        "{} anchors: {rows}x{cols} cells, {} per cell, stride {}, sizes {:?}",
        set.len(),
        cfg.per_cell(),
        cfg.stride,
        cfg.sizes
    );
    for a in set.anchors.iter().take(3) {
        println!("  {:?}", a.corners());
    }

    let a = set.anchors[100];
    let face = [a.cx - 9.0, a.cy - 7.0, a.cx + 12.0, a.cy + 15.0];
    let t = encode_box(&a, &face, set.variances);
    println!("\nencode {face:?}\n  -> {t:?}\n  -> {:?}", decode_box(&a, &t, set.variances));

    let d = |x: f64, y: f64, s: f64, score: f64, index| Detection {
        x1: x,
        y1: y,
        x2: x + s,
        y2: y + s,
        score,
        index,
    };
    let dets = [
        d(10.0, 10.0, 30.0, 0.9, 0),
        d(12.0, 11.0, 30.0, 0.8, 1),
        d(60.0, 40.0, 20.0, 0.7, 2),
        d(61.0, 40.0, 20.0, 0.7, 3),
        d(100.0, 5.0, 10.0, 0.3, 4),
    ];
    println!("\nNMS (IoU 0.4, score 0.5):");
    for k in nms(&dets, 0.4, 0.5, 10) {
        println!("  keep #{} score {}", k.index, k.score);
    }
    Ok(())
}

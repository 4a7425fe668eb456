//! Procedural sRGB scenes with planted face-like blobs, used as a stand-in
//! source corpus for desk-scale runs.

use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{write_annotations, AnnotationRecord};
use super::{image_seed, stage_rng, synthesize, AnnotatedImage, BoxXywh, ImagePlane, NoiseParams, RawSample, SynthConfig};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Share of scenes with no face at all.
    pub faceless_fraction: f64,
    pub max_faces: usize,
    pub distractors: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 320,
            height: 240,
            faceless_fraction: 0.15,
            max_faces: 2,
            distractors: 3,
        }
    }
}

fn fill_ellipse(img: &mut ImagePlane, cx: f64, cy: f64, rx: f64, ry: f64, color: [f64; 3]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let y0 = (cy - ry).floor().max(0.0) as usize;
    let y1 = (cy + ry).ceil().min(h) as usize;
    let x0 = (cx - rx).floor().max(0.0) as usize;
    let x1 = (cx + rx).ceil().min(w) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                for (c, &v) in color.iter().enumerate() {
                    img.set(c, y, x, v);
                }
            }
        }
    }
}

fn jitter(rng: &mut impl Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

fn draw_face(img: &mut ImagePlane, rng: &mut impl Rng, b: &BoxXywh) {
    let (cx, cy) = (b.x + b.w / 2.0, b.y + b.h / 2.0);
    let (rx, ry) = (b.w / 2.0, b.h / 2.0);
    let skin = jitter(rng, [0.86, 0.66, 0.52], 0.08);
    let hair = jitter(rng, [0.18, 0.12, 0.08], 0.08);
    let dark = jitter(rng, [0.08, 0.05, 0.05], 0.04);
    fill_ellipse(img, cx, cy - 0.15 * ry, rx * 1.02, ry * 0.9, hair);
    fill_ellipse(img, cx, cy + 0.08 * ry, rx * 0.92, ry * 0.9, skin);
    for side in [-1.0, 1.0] {
        fill_ellipse(img, cx + side * 0.38 * rx, cy - 0.05 * ry, 0.16 * rx, 0.09 * ry, [0.95, 0.95, 0.95]);
        fill_ellipse(img, cx + side * 0.38 * rx, cy - 0.05 * ry, 0.08 * rx, 0.08 * ry, dark);
    }
    let lips = jitter(rng, [0.6, 0.25, 0.25], 0.06);
    fill_ellipse(img, cx, cy + 0.5 * ry, 0.32 * rx, 0.08 * ry, lips);
    let nose = skin.map(|v| v * 0.8);
    fill_ellipse(img, cx, cy + 0.2 * ry, 0.08 * rx, 0.14 * ry, nose);
}

fn overlaps(a: &BoxXywh, b: &BoxXywh) -> bool {
    a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h
}

/// One procedural scene; deterministic in `seed`.
pub fn blob_scene(id: &str, seed: u64, cfg: &SceneConfig) -> AnnotatedImage {
    let mut rng = stage_rng(seed, 17);
    let (w, h) = (cfg.width, cfg.height);
    let mut img = ImagePlane::filled(w, h, 3, 0.0);
    let base: [f64; 3] = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
    let gx: [f64; 3] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    let gy: [f64; 3] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 / w as f64 - 0.5;
                let v = y as f64 / h as f64 - 0.5;
                let tex = 0.03 * ((x as f64 * 0.21 + c as f64).sin() * (y as f64 * 0.17).cos());
                img.set(c, y, x, (base[c] + gx[c] * u + gy[c] * v + tex).clamp(0.0, 1.0));
            }
        }
    }
    for _ in 0..cfg.distractors {
        let r = rng.random_range(0.05..0.25) * h as f64;
        let color = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        if rng.random_bool(0.5) {
            fill_ellipse(&mut img, cx, cy, r * rng.random_range(0.5..2.0), r, color);
        } else {
            let (x0, y0) = ((cx - r).max(0.0) as usize, (cy - r).max(0.0) as usize);
            let (x1, y1) = (((cx + r) as usize).min(w), ((cy + r * 0.6) as usize).min(h));
            for y in y0..y1 {
                for x in x0..x1 {
                    for (c, &v) in color.iter().enumerate() {
                        img.set(c, y, x, v);
                    }
                }
            }
        }
    }
    let mut boxes: Vec<BoxXywh> = Vec::new();
    if !rng.random_bool(cfg.faceless_fraction.clamp(0.0, 1.0)) {
        let n = rng.random_range(1..=cfg.max_faces.max(1));
        for _ in 0..n * 10 {
            if boxes.len() == n {
                break;
            }
            let fh = rng.random_range(0.2..0.5) * h as f64;
            let fw = fh * rng.random_range(0.7..0.85);
            let b = BoxXywh::new(
                rng.random_range(0.0..(w as f64 - fw)),
                rng.random_range(0.0..(h as f64 - fh)),
                fw,
                fh,
            );
            if boxes.iter().all(|o| !overlaps(o, &b)) {
                draw_face(&mut img, &mut rng, &b);
                boxes.push(b);
            }
        }
    }
    AnnotatedImage {
        image: img,
        boxes,
        source_id: id.to_string(),
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene{index:05}")
}

/// Writes `n` scenes as PNGs plus `annotations.jsonl` into `dir`.
pub fn write_scene_sources(dir: &Path, n: usize, master_seed: u64, cfg: &SceneConfig) -> Result<Vec<AnnotationRecord>> {
    fs::create_dir_all(dir)?;
    let recs: Vec<Result<AnnotationRecord>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let id = scene_id(i);
            let a = blob_scene(&id, image_seed(master_seed, &id), cfg);
            let (w, h) = (a.image.width(), a.image.height());
            let mut rgb = RgbImage::new(w as u32, h as u32);
            for (x, y, p) in rgb.enumerate_pixels_mut() {
                for c in 0..3 {
                    p.0[c] = (a.image.get(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
            let file = format!("{id}.png");
            rgb.save(dir.join(&file))?;
            Ok(AnnotationRecord { id, file, boxes: a.boxes })
        })
        .collect();
    let recs = recs.into_iter().collect::<Result<Vec<_>>>()?;
    write_annotations(&dir.join("annotations.jsonl"), &recs)?;
    Ok(recs)
}

/// In-memory toy RAW corpus: `n` scenes pushed through [`synthesize`].
pub fn toy_corpus(
    n: usize,
    master_seed: u64,
    scene: &SceneConfig,
    cfg: &SynthConfig,
    noise: &NoiseParams,
) -> Result<Vec<RawSample>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let id = scene_id(i);
            let seed = image_seed(master_seed, &id);
            let a = blob_scene(&id, seed, scene);
            synthesize(&a, cfg, noise, seed)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_annotated() {
        let cfg = SceneConfig::default();
        let a = blob_scene("a", 1, &cfg);
        assert_eq!(a, blob_scene("a", 1, &cfg));
        for b in &a.boxes {
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 320.0 && b.y + b.h <= 240.0);
        }
        let with_faces = (0..40).filter(|&s| !blob_scene("x", s, &cfg).boxes.is_empty()).count();
        assert!(with_faces > 25 && with_faces < 40);
    }

    #[test]
    fn toy_corpus_shapes() {
        let c = toy_corpus(6, 3, &SceneConfig::default(), &SynthConfig::default(), &NoiseParams::default()).unwrap();
        assert_eq!(c.len(), 6);
        for s in &c {
            assert_eq!((s.width, s.height), (160, 120));
            assert_eq!(s.pixels.len(), 160 * 120);
        }
    }
}

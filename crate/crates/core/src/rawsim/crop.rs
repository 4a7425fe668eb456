use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{stage_rng, AnnotatedImage, BoxXywh, ImagePlane, SynthConfig};
use crate::error::{Error, Result};

const CROP_STREAM: u64 = 3;
const MAX_SUPERSAMPLE: usize = 4;

/// What the crop stage drew, for manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropInfo {
    pub face_index: Option<usize>,
    pub ratio: Option<f64>,
    /// Source window `[x, y, w, h]`; may extend past the source (black fill).
    pub window: [f64; 4],
}

/// Bilinear tap at pixel-centre coordinates; black outside the source area,
/// edge-clamped inside it.
fn sample_black(img: &ImagePlane, c: usize, sx: f64, sy: f64) -> f64 {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if sx < -0.5 || sy < -0.5 || sx >= w - 0.5 || sy >= h - 0.5 {
        return 0.0;
    }
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let at = |x: f64, y: f64| img.get(c, y.clamp(0.0, h - 1.0) as usize, x.clamp(0.0, w - 1.0) as usize);
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
    let bot = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Resamples the window `[x, y, w, h]` of `img` to `out_w x out_h`, filling
/// area outside the source with black. Downscaling averages a small grid of
/// bilinear taps per output pixel.
fn resample_window(img: &ImagePlane, window: [f64; 4], out_w: usize, out_h: usize) -> ImagePlane {
    let [wx, wy, ww, wh] = window;
    let sx = ww / out_w as f64;
    let sy = wh / out_h as f64;
    let nx = (sx.ceil() as usize).clamp(1, MAX_SUPERSAMPLE);
    let ny = (sy.ceil() as usize).clamp(1, MAX_SUPERSAMPLE);
    let mut out = ImagePlane::filled(out_w, out_h, img.channels(), 0.0);
    let norm = 1.0 / (nx * ny) as f64;
    for c in 0..img.channels() {
        for v in 0..out_h {
            for u in 0..out_w {
                let mut acc = 0.0;
                for ky in 0..ny {
                    let py = wy + (v as f64 + (ky as f64 + 0.5) / ny as f64) * sy - 0.5;
                    for kx in 0..nx {
                        let px = wx + (u as f64 + (kx as f64 + 0.5) / nx as f64) * sx - 0.5;
                        acc += sample_black(img, c, px, py);
                    }
                }
                out.set(c, v, u, acc * norm);
            }
        }
    }
    out
}

pub fn resize_bilinear(img: &ImagePlane, out_w: usize, out_h: usize) -> ImagePlane {
    if img.width() == out_w && img.height() == out_h {
        return img.clone();
    }
    resample_window(img, [0.0, 0.0, img.width() as f64, img.height() as f64], out_w, out_h)
}

fn crop_window(a: &AnnotatedImage, window: [f64; 4], out_w: usize, out_h: usize) -> AnnotatedImage {
    let image = if window == [0.0, 0.0, a.image.width() as f64, a.image.height() as f64] {
        resize_bilinear(&a.image, out_w, out_h)
    } else {
        resample_window(&a.image, window, out_w, out_h)
    };
    let kx = out_w as f64 / window[2];
    let ky = out_h as f64 / window[3];
    let boxes = a
        .boxes
        .iter()
        .filter_map(|b| {
            BoxXywh::new((b.x - window[0]) * kx, (b.y - window[1]) * ky, b.w * kx, b.h * ky)
                .clip(out_w as f64, out_h as f64)
        })
        .collect();
    AnnotatedImage {
        image,
        boxes,
        source_id: a.source_id.clone(),
    }
}

/// Crop centred on face `face_index` so that face height over crop height is
/// `ratio`, resized to `out_w x out_h`.
pub fn crop_around_face(
    a: &AnnotatedImage,
    face_index: usize,
    ratio: f64,
    out_w: usize,
    out_h: usize,
) -> Result<(AnnotatedImage, CropInfo)> {
    let face = a
        .boxes
        .get(face_index)
        .ok_or_else(|| Error::Config(format!("face index {face_index} out of range")))?;
    if !(ratio > 0.0) || !(face.h > 0.0 && face.w > 0.0) {
        return Err(Error::Config(format!("degenerate crop: ratio {ratio}, face {face:?}")));
    }
    let ch = face.h / ratio;
    let cw = ch * out_w as f64 / out_h as f64;
    let cx = face.x + face.w / 2.0;
    let cy = face.y + face.h / 2.0;
    let window = [cx - cw / 2.0, cy - ch / 2.0, cw, ch];
    let info = CropInfo {
        face_index: Some(face_index),
        ratio: Some(ratio),
        window,
    };
    Ok((crop_window(a, window, out_w, out_h), info))
}

/// Face-ratio crop into the pre-rotation frame. Faceless inputs get a centred
/// crop at a random scale in `[0.5, 1]` of the largest fitting window.
pub fn face_crop_augment(a: &AnnotatedImage, cfg: &SynthConfig, seed: u64) -> Result<(AnnotatedImage, CropInfo)> {
    let (out_w, out_h) = cfg.pre_rotation_size();
    let (sw, sh) = (a.image.width() as f64, a.image.height() as f64);
    if !cfg.crop {
        let window = [0.0, 0.0, sw, sh];
        let info = CropInfo {
            face_index: None,
            ratio: None,
            window,
        };
        return Ok((crop_window(a, window, out_w, out_h), info));
    }
    let mut rng = stage_rng(seed, CROP_STREAM);
    let valid: Vec<usize> = (0..a.boxes.len()).filter(|&i| a.boxes[i].area() > 0.0).collect();
    if valid.is_empty() {
        let aspect = out_w as f64 / out_h as f64;
        let full_h = sh.min(sw / aspect);
        let ch = full_h * rng.random_range(0.5..=1.0);
        let cw = ch * aspect;
        let window = [(sw - cw) / 2.0, (sh - ch) / 2.0, cw, ch];
        let mut out = crop_window(a, window, out_w, out_h);
        out.boxes.clear();
        let info = CropInfo {
            face_index: None,
            ratio: None,
            window,
        };
        return Ok((out, info));
    }
    let face = valid[rng.random_range(0..valid.len())];
    let (lo, hi) = cfg.face_ratio_range;
    let ratio = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    crop_around_face(a, face, ratio, out_w, out_h)
}

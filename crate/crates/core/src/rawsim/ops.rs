use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{stage_rng, BoxXywh, CfaPhase, ImagePlane, NoiseMode, NoiseParams};

const NOISE_STREAM: u64 = 1;
const SALT_PEPPER_STREAM: u64 = 2;

pub fn smoothstep(x: f64) -> f64 {
    3.0 * x * x - 2.0 * x * x * x
}

/// Closed-form inverse of [`smoothstep`].
pub fn inverse_tone_curve(img: &ImagePlane) -> ImagePlane {
    img.map(|v| {
        let x = v.clamp(0.0, 1.0);
        (0.5 - ((1.0 - 2.0 * x).asin() / 3.0).sin()).clamp(0.0, 1.0)
    })
}

pub fn inverse_gamma(img: &ImagePlane, gamma: f64) -> ImagePlane {
    img.map(|v| v.clamp(0.0, 1.0).powf(gamma))
}

pub fn forward_gamma(img: &ImagePlane, gamma: f64) -> ImagePlane {
    img.map(|v| v.clamp(0.0, 1.0).powf(1.0 / gamma))
}

/// Darkens toward the corners by `1 / (1 + k r^2)`. `r` is the distance of
/// the pixel index from the central index, over the center-to-corner distance,
/// so corner pixels sit at `r = 1`.
pub fn inverse_lens_shading(img: &ImagePlane, k: f64) -> ImagePlane {
    if k == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let half_diag2 = (cx * cx + cy * cy).max(f64::MIN_POSITIVE);
    let mut out = img.clone();
    for c in 0..img.channels() {
        for y in 0..h {
            let dy = y as f64 - cy;
            for x in 0..w {
                let dx = x as f64 - cx;
                let r2 = (dx * dx + dy * dy) / half_diag2;
                let v = img.get(c, y, x) / (1.0 + k * r2);
                out.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Samples one channel per pixel following the CFA tile. Odd extents are
/// cropped to even.
pub fn bayer_mosaic(img: &ImagePlane, phase: CfaPhase) -> ImagePlane {
    let w = img.width() & !1;
    let h = img.height() & !1;
    let (w, h) = (w.max(2).min(img.width()), h.max(2).min(img.height()));
    let src = img.to_rgb();
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(src.get(phase.channel_at(y, x), y, x));
        }
    }
    ImagePlane::new(w, h, 1, data).expect("mosaic dims are nonzero")
}

/// Unclamped corrupted value for clean intensity `y`.
pub(crate) fn noisy_value(y: f64, p: &NoiseParams, gauss: Option<&Normal<f64>>, rng: &mut impl Rng) -> f64 {
    let y = y.max(0.0);
    let shot = match p.mode {
        NoiseMode::Off => return y,
        NoiseMode::PhotonCount => {
            let lambda = y / p.gain;
            if lambda > 0.0 {
                p.gain * Poisson::new(lambda).expect("positive finite rate").sample(rng)
            } else {
                0.0
            }
        }
        NoiseMode::Literal => {
            let lambda = p.gain * y;
            if lambda > 0.0 {
                Poisson::new(lambda).expect("positive finite rate").sample(rng) / p.gain
            } else {
                0.0
            }
        }
    };
    shot + gauss.map_or(0.0, |n| n.sample(rng))
}

/// Poisson-Gaussian sensor noise, clamped to `[0,1]`.
pub fn add_sensor_noise(img: &ImagePlane, p: &NoiseParams) -> ImagePlane {
    if p.mode == NoiseMode::Off {
        return img.clone();
    }
    let mut rng = stage_rng(p.seed, NOISE_STREAM);
    let gauss = (p.gauss_sigma > 0.0).then(|| Normal::new(0.0, p.gauss_sigma).expect("finite sigma"));
    img.map(|v| noisy_value(v, p, gauss.as_ref(), &mut rng).clamp(0.0, 1.0))
}

/// Each pixel independently becomes 0 or 1 with probability `density`.
pub fn salt_pepper(img: &ImagePlane, density: f64, seed: u64) -> ImagePlane {
    let mut rng = stage_rng(seed, SALT_PEPPER_STREAM);
    img.map(|v| {
        if rng.random_bool(density) {
            if rng.random_bool(0.5) {
                1.0
            } else {
                0.0
            }
        } else {
            v
        }
    })
}

/// Backlit scene: face regions are halved, the background is lifted toward
/// white by a horizontal ramp from 0.3 to 0.7.
pub fn backlight(img: &ImagePlane, boxes: &[BoxXywh]) -> ImagePlane {
    let (w, h) = (img.width(), img.height());
    let inside = |x: usize, y: usize| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        boxes
            .iter()
            .any(|b| px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h)
    };
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let face = inside(x, y);
            let ramp = 0.3 + 0.4 * x as f64 / (w.max(2) - 1) as f64;
            for c in 0..img.channels() {
                let v = img.get(c, y, x);
                let nv = if face { 0.5 * v } else { v + (1.0 - v) * ramp };
                out.set(c, y, x, nv.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Box under the clockwise quarter turn of an image of height `height`.
pub fn rotate_box_right(b: &BoxXywh, height: f64) -> BoxXywh {
    BoxXywh::new(height - (b.y + b.h), b.x, b.h, b.w)
}

/// Clockwise quarter turn: pixel `(i, j)` moves to `(j, H-1-i)`.
pub fn rotate90_right(img: &ImagePlane, boxes: &[BoxXywh]) -> (ImagePlane, Vec<BoxXywh>) {
    let (w, h) = (img.width(), img.height());
    // output is h wide, w tall
    let mut data = vec![0.0; img.data().len()];
    for c in 0..img.channels() {
        for i in 0..h {
            for j in 0..w {
                data[(c * w + j) * h + (h - 1 - i)] = img.get(c, i, j);
            }
        }
    }
    let out = ImagePlane::new(h, w, img.channels(), data).expect("same element count");
    let boxes = boxes.iter().map(|b| rotate_box_right(b, h as f64)).collect();
    (out, boxes)
}

/// `round(255 x)` half away from zero, clamped to `[0, 255]`.
pub fn to_u8(img: &ImagePlane) -> Vec<u8> {
    img.data().iter().map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect()
}

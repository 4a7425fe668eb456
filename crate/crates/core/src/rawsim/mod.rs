//! Reverse-ISP synthesis of sensor-like RAW frames from annotated sRGB images.
//!
//! Stage order inside [`synthesize`]: face crop, inverse tone curve, inverse
//! gamma, inverse lens shading, Bayer mosaic, sensor noise, optional
//! backlight and salt-and-pepper, rotation, 8-bit quantization.

mod crop;
mod io;
mod ops;
pub mod scene;
mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use crop::{crop_around_face, face_crop_augment, resize_bilinear, CropInfo};
pub use io::{
    load_annotated, load_frames, read_annotations, read_pgm, synthesize_corpus, write_annotations, write_pgm,
    AnnotationRecord, CorpusEntry, CorpusManifest, LabeledFrame, STAGE_ORDER,
};
pub use ops::{
    add_sensor_noise, backlight, bayer_mosaic, forward_gamma, inverse_gamma, inverse_lens_shading,
    inverse_tone_curve, rotate90_right, rotate_box_right, salt_pepper, smoothstep, to_u8,
};
pub use synth::{synthesize, RawSample, StageRecord};

/// Floating image in `[0,1]`, planar channel layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Config(format!(
                "image plane {width}x{height}x{channels} is not a 1- or 3-channel image"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Config(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(ImagePlane {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        ImagePlane {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> ImagePlane {
        ImagePlane {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Replicates a gray plane into three channels; 3-channel input is returned as is.
    pub fn to_rgb(&self) -> ImagePlane {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        ImagePlane {
            channels: 3,
            data,
            ..*self
        }
    }
}

/// Axis-aligned box as `(x, y, w, h)` in pixels; serialized as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxXywh {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXywh {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoxXywh { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Intersection with `[0,width] x [0,height]`; `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BoxXywh> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width);
        let y1 = (self.y + self.h).min(height);
        (x1 > x0 && y1 > y0).then(|| BoxXywh::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn to_corners(&self) -> [f64; 4] {
        [self.x, self.y, self.x + self.w, self.y + self.h]
    }
}

impl From<[f64; 4]> for BoxXywh {
    fn from(a: [f64; 4]) -> Self {
        BoxXywh::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BoxXywh> for [f64; 4] {
    fn from(b: BoxXywh) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image: ImagePlane,
    pub boxes: Vec<BoxXywh>,
    pub source_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CfaPhase {
    #[default]
    Rggb,
    Grbg,
    Gbrg,
    Bggr,
}

impl CfaPhase {
    /// Channel index (0 = R, 1 = G, 2 = B) sampled at pixel `(y, x)`.
    pub fn channel_at(self, y: usize, x: usize) -> usize {
        let tile = match self {
            CfaPhase::Rggb => [0, 1, 1, 2],
            CfaPhase::Grbg => [1, 0, 2, 1],
            CfaPhase::Gbrg => [1, 2, 0, 1],
            CfaPhase::Bggr => [2, 1, 1, 0],
        };
        tile[(y % 2) * 2 + (x % 2)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// `gain * Poisson(y / gain) + N(0, sigma^2)`.
    #[default]
    PhotonCount,
    /// `Poisson(gain * y) / gain + N(0, sigma^2)`.
    Literal,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    pub gain: f64,
    pub gauss_sigma: f64,
    pub mode: NoiseMode,
    pub seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            gain: 0.01,
            gauss_sigma: 0.02,
            mode: NoiseMode::PhotonCount,
            seed: 0,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::Config(format!("noise gain must be > 0, got {}", self.gain)));
        }
        if !(self.gauss_sigma >= 0.0 && self.gauss_sigma.is_finite()) {
            return Err(Error::Config(format!("gauss sigma must be >= 0, got {}", self.gauss_sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Final output size `(width, height)`, after rotation.
    pub target_size: (usize, usize),
    pub gamma: f64,
    pub tone_curve: bool,
    pub shading_strength: f64,
    /// Crop around a face; when off the whole source is resized.
    pub crop: bool,
    pub face_ratio_range: (f64, f64),
    pub sp_prob: f64,
    pub sp_density: f64,
    pub backlight: bool,
    pub rotate_right: bool,
    pub cfa_phase: CfaPhase,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            target_size: (160, 120),
            gamma: 2.2,
            tone_curve: true,
            shading_strength: 0.25,
            crop: true,
            face_ratio_range: (0.20, 1.10),
            sp_prob: 0.5,
            sp_density: 0.02,
            backlight: false,
            rotate_right: true,
            cfa_phase: CfaPhase::Rggb,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.face_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("face ratio range ({lo}, {hi}) invalid")));
        }
        if !(0.0..=1.0).contains(&self.sp_prob) || !(0.0..=1.0).contains(&self.sp_density) {
            return Err(Error::Config("salt-and-pepper probabilities must lie in [0,1]".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.shading_strength >= 0.0) {
            return Err(Error::Config("shading strength must be >= 0".into()));
        }
        let (w, h) = self.target_size;
        if w < 2 || h < 2 {
            return Err(Error::Config(format!("target size {w}x{h} too small")));
        }
        Ok(())
    }

    /// Frame size `(width, height)` before the optional rotation.
    pub fn pre_rotation_size(&self) -> (usize, usize) {
        let (w, h) = self.target_size;
        if self.rotate_right {
            (h, w)
        } else {
            (w, h)
        }
    }
}

/// Per-image seed derived from the master seed and the source id.
pub fn image_seed(master_seed: u64, source_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(source_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Independent RNG stream per pipeline stage.
pub(crate) fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stage);
    r
}

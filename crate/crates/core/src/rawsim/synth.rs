use rand::Rng;
use serde::{Deserialize, Serialize};

use super::crop::face_crop_augment;
use super::ops::*;
use super::{stage_rng, AnnotatedImage, BoxXywh, NoiseParams, SynthConfig};
use crate::error::{Error, Result};

const COIN_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub params: serde_json::Value,
}

/// One synthesized 8-bit RAW frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub source_id: String,
    pub width: usize,
    pub height: usize,
    #[serde(skip)]
    pub pixels: Vec<u8>,
    pub boxes: Vec<BoxXywh>,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

fn wrap(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Synthesis {
        stage,
        source: Box::new(e),
    }
}

fn record(stages: &mut Vec<StageRecord>, stage: &str, params: serde_json::Value) {
    stages.push(StageRecord {
        stage: stage.to_string(),
        params,
    });
}

/// Full reverse-ISP chain for one annotated image. Deterministic in `seed`.
pub fn synthesize(a: &AnnotatedImage, cfg: &SynthConfig, noise: &NoiseParams, seed: u64) -> Result<RawSample> {
    cfg.validate().map_err(wrap("config"))?;
    noise.validate().map_err(wrap("config"))?;
    let mut stages = Vec::new();

    let (cropped, info) = face_crop_augment(a, cfg, seed).map_err(wrap("face_crop"))?;
    record(&mut stages, "face_crop", serde_json::to_value(&info)?);
    let mut img = cropped.image;
    let mut boxes = cropped.boxes;

    if cfg.tone_curve {
        img = inverse_tone_curve(&img);
    }
    record(&mut stages, "inverse_tone_curve", serde_json::json!({ "enabled": cfg.tone_curve }));
    img = inverse_gamma(&img, cfg.gamma);
    record(&mut stages, "inverse_gamma", serde_json::json!({ "gamma": cfg.gamma }));
    img = inverse_lens_shading(&img, cfg.shading_strength);
    record(&mut stages, "inverse_lens_shading", serde_json::json!({ "k": cfg.shading_strength }));
    img = bayer_mosaic(&img, cfg.cfa_phase);
    record(&mut stages, "bayer_mosaic", serde_json::to_value(cfg.cfa_phase)?);
    boxes.retain_mut(|b| match b.clip(img.width() as f64, img.height() as f64) {
        Some(c) => {
            *b = c;
            true
        }
        None => false,
    });

    let np = NoiseParams { seed, ..*noise };
    img = add_sensor_noise(&img, &np);
    record(&mut stages, "sensor_noise", serde_json::to_value(np)?);

    if cfg.backlight {
        img = backlight(&img, &boxes);
    }
    record(&mut stages, "backlight", serde_json::json!({ "applied": cfg.backlight }));
    let mut coin = stage_rng(seed, COIN_STREAM);
    let sp = cfg.sp_prob > 0.0 && coin.random_bool(cfg.sp_prob);
    if sp {
        img = salt_pepper(&img, cfg.sp_density, seed);
    }
    record(
        &mut stages,
        "salt_pepper",
        serde_json::json!({ "applied": sp, "density": cfg.sp_density }),
    );

    if cfg.rotate_right {
        let (r, b) = rotate90_right(&img, &boxes);
        img = r;
        boxes = b;
    }
    record(&mut stages, "rotate90_right", serde_json::json!({ "applied": cfg.rotate_right }));

    let (w, h) = cfg.target_size;
    if img.width() != w || img.height() != h {
        return Err(Error::Synthesis {
            stage: "output",
            source: Box::new(Error::Config(format!(
                "frame is {}x{}, expected {w}x{h} (odd target sizes are not supported)",
                img.width(),
                img.height()
            ))),
        });
    }
    Ok(RawSample {
        source_id: a.source_id.clone(),
        width: img.width(),
        height: img.height(),
        pixels: to_u8(&img),
        boxes,
        seed,
        stages,
    })
}

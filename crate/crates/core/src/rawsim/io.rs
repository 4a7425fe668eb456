use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    image_seed, synthesize, AnnotatedImage, BoxXywh, ImagePlane, NoiseParams, RawSample, StageRecord, SynthConfig,
};
use crate::error::{Error, Result};

/// One line of an annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub file: String,
    pub boxes: Vec<BoxXywh>,
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Decodes an sRGB image (PNG or PNM) into a 3-channel plane.
pub fn load_annotated(dir: &Path, rec: &AnnotationRecord) -> Result<AnnotatedImage> {
    let img = image::open(dir.join(&rec.file))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; w * h * 3];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    let image = ImagePlane::new(w, h, 3, data)?;
    let boxes = rec
        .boxes
        .iter()
        .filter_map(|b| b.clip(w as f64, h as f64))
        .collect();
    Ok(AnnotatedImage {
        image,
        boxes,
        source_id: rec.id.clone(),
    })
}

/// Binary 8-bit graymap (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    PnmEncoder::new(w)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

/// A RAW frame with corner-form face boxes, the unit of training and
/// evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFrame {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    /// `[x1, y1, x2, y2]` in pixels.
    pub boxes: Vec<[f64; 4]>,
}

impl LabeledFrame {
    pub fn from_raw(s: &RawSample) -> Self {
        LabeledFrame {
            id: s.source_id.clone(),
            width: s.width,
            height: s.height,
            pixels: s.pixels.clone(),
            boxes: s.boxes.iter().map(|b| b.to_corners()).collect(),
        }
    }
}

/// Loads a synthesized corpus directory (`annotations.jsonl` plus frames).
pub fn load_frames(dir: &Path) -> Result<Vec<LabeledFrame>> {
    let recs = read_annotations(&dir.join("annotations.jsonl"))?;
    recs.par_iter()
        .map(|r| {
            let (width, height, pixels) = read_pgm(&dir.join(&r.file))?;
            Ok(LabeledFrame {
                id: r.id.clone(),
                width,
                height,
                pixels,
                boxes: r.boxes.iter().map(|b| b.to_corners()).collect(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub source_file: String,
    pub file: String,
    pub seed: u64,
    pub boxes: Vec<BoxXywh>,
    pub stages: Vec<StageRecord>,
}

/// Everything needed to regenerate a synthesized corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub in_dir: PathBuf,
    pub annotations: PathBuf,
    pub master_seed: u64,
    pub config: SynthConfig,
    pub noise: NoiseParams,
    pub stage_order: Vec<String>,
    pub skipped: Vec<String>,
    pub entries: Vec<CorpusEntry>,
}

pub const STAGE_ORDER: [&str; 9] = [
    "face_crop",
    "inverse_tone_curve",
    "inverse_gamma",
    "inverse_lens_shading",
    "bayer_mosaic",
    "sensor_noise",
    "backlight",
    "salt_pepper",
    "rotate90_right",
];

/// Synthesizes every annotated image under `in_dir` into `out_dir`:
/// `<id>.pgm` frames, `annotations.jsonl` in output coordinates and
/// `manifest.json`. Unreadable images are skipped with a warning; if every
/// image fails the call errors.
pub fn synthesize_corpus(
    in_dir: &Path,
    ann_file: &Path,
    out_dir: &Path,
    cfg: &SynthConfig,
    noise: &NoiseParams,
    master_seed: u64,
) -> Result<CorpusManifest> {
    cfg.validate()?;
    noise.validate()?;
    let records = read_annotations(ann_file)?;
    fs::create_dir_all(out_dir)?;
    if records.is_empty() {
        log::warn!("annotation file {} is empty; writing an empty corpus", ann_file.display());
    }
    let results: Vec<Result<CorpusEntry>> = records
        .par_iter()
        .map(|rec| {
            let a = load_annotated(in_dir, rec)?;
            let seed = image_seed(master_seed, &rec.id);
            let s = synthesize(&a, cfg, noise, seed)?;
            let file = format!("{}.pgm", rec.id);
            write_pgm(&out_dir.join(&file), s.width, s.height, &s.pixels)?;
            Ok(CorpusEntry {
                id: rec.id.clone(),
                source_file: rec.file.clone(),
                file,
                seed,
                boxes: s.boxes,
                stages: s.stages,
            })
        })
        .collect();
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (rec, r) in records.iter().zip(results) {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => {
                log::warn!("skipping {}: {e}", rec.file);
                skipped.push(rec.id.clone());
            }
        }
    }
    if !records.is_empty() && entries.is_empty() {
        return Err(Error::Empty(format!("all {} input images failed to synthesize", records.len())));
    }
    let ann: Vec<AnnotationRecord> = entries
        .iter()
        .map(|e| AnnotationRecord {
            id: e.id.clone(),
            file: e.file.clone(),
            boxes: e.boxes.clone(),
        })
        .collect();
    write_annotations(&out_dir.join("annotations.jsonl"), &ann)?;
    let manifest = CorpusManifest {
        in_dir: in_dir.to_path_buf(),
        annotations: ann_file.to_path_buf(),
        master_seed,
        config: cfg.clone(),
        noise: *noise,
        stage_order: STAGE_ORDER.iter().map(|s| s.to_string()).collect(),
        skipped,
        entries,
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

//! Turns one procedural sRGB scene into an 8-bit Bayer RAW frame and prints
//! the parameters every pipeline stage drew.
//!
//! cargo run --example synth_raw -- [out_dir]

use std::path::PathBuf;

use tfd::rawsim::scene::{blob_scene, SceneConfig};
use tfd::rawsim::{image_seed, synthesize, write_pgm, NoiseParams, SynthConfig};

fn main() -> tfd::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/synth_raw".into()));
    std::fs::create_dir_all(&out)?;
    let scene = blob_scene("demo", 11, &SceneConfig::default());
    println!("source {}x{} with {} face(s)", scene.image.width(), scene.image.height(), scene.boxes.len());

    let seed = image_seed(42, "demo");
    let raw = synthesize(&scene, &SynthConfig::default(), &NoiseParams::default(), seed)?;
    for s in &raw.stages {
        println!("{:>14}: {}", s.stage, s.params);
    }
    for b in &raw.boxes {
        println!("face at ({:.1}, {:.1}) size {:.1}x{:.1}", b.x, b.y, b.w, b.h);
    }
    let path = out.join("demo_raw.pgm");
    write_pgm(&path, raw.width, raw.height, &raw.pixels)?;
    println!("wrote {}x{} RAW frame to {}", raw.width, raw.height, path.display());
    Ok(())
}

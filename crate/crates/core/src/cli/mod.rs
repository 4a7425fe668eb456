//! Command-line surface: run configuration, checkpoint files, run manifests
//! and the `tfd` subcommands.
//!
//! Every command that writes into `--out` also writes `run_manifest.json`
//! with the full effective config and a sha256 of each output, which
//! `tfd replay` uses to regenerate and verify the outputs.

mod checkpoint;
mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::Engine;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_header, save_checkpoint, CheckpointHeader,
    LayerRecord, WeightEncoding, MAGIC,
};
pub use commands::{execute, EvalOutput};
pub use config::{EffectiveConfig, RunConfig};
pub use manifest::{hash_outputs, RunManifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "tfd", version, about = "RAW face detection with ternary QAT and integer inference")]
pub struct Cli {
    /// TOML run config; missing keys take defaults, unknown keys are errors.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Write procedural blob-face scenes as PNG sources plus annotations.jsonl.
    Toy {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn annotated sRGB images into a RAW corpus.
    Synth {
        #[arg(long = "in")]
        in_dir: PathBuf,
        /// Defaults to `<in>/annotations.jsonl`.
        #[arg(long)]
        ann: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Progressive quantization-aware training, one checkpoint per stage.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated stage list such as `fp32,w8a8,w4a4`.
        #[arg(long)]
        bits: Option<String>,
        /// Start from this unfolded checkpoint instead of a fresh network.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach and calibrate quantizers on a checkpoint (post-training).
    Quantize {
        #[arg(long)]
        ckpt: PathBuf,
        /// Calibration frames; the first `train.batch_size` are used.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        bits: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold BN into the preceding convs.
    Fold {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint over a corpus and dump detections.jsonl.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "float", value_parser = parse_engine)]
        engine: Engine,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and cost of a checkpoint: report.json and table.txt.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "float", value_parser = parse_engine)]
        engine: Engine,
        /// Also synthesize and score the small, noisy and backlight subsets.
        #[arg(long)]
        subsets: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Burn ground truth (green) and detections (red) into PNGs.
    Render {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        min_score: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest and compare output hashes.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_engine(s: &str) -> Result<Engine> {
    s.parse()
}

impl Command {
    pub fn out(&self) -> &PathBuf {
        match self {
            Command::Toy { out, .. }
            | Command::Synth { out, .. }
            | Command::Train { out, .. }
            | Command::Quantize { out, .. }
            | Command::Fold { out, .. }
            | Command::Infer { out, .. }
            | Command::Eval { out, .. }
            | Command::Render { out, .. }
            | Command::Replay { out, .. } => out,
        }
    }

    pub fn with_out(&self, dir: PathBuf) -> Command {
        let mut c = self.clone();
        match &mut c {
            Command::Toy { out, .. }
            | Command::Synth { out, .. }
            | Command::Train { out, .. }
            | Command::Quantize { out, .. }
            | Command::Fold { out, .. }
            | Command::Infer { out, .. }
            | Command::Eval { out, .. }
            | Command::Render { out, .. }
            | Command::Replay { out, .. } => *out = dir,
        }
        c
    }
}

/// Caps rayon's pool at `TFD_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("TFD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("TFD_THREADS={v:?} is not a positive integer")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    let cfg = RunConfig::resolve(cli.config.as_deref(), cli.seed)?;
    execute(&cli.command, &cfg)
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 1 for input errors, 2 for numeric failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! End-to-end runs of the `tfd` binary on a small toy corpus.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tfd::cli::{hash_outputs, load_checkpoint, EvalOutput, RunManifest, MANIFEST_FILE};
use tfd::eval::average_precision;
use tfd::infer::{read_detections, Detection};
use tfd::rawsim::{load_frames, CorpusManifest, STAGE_ORDER};

const CONFIG: &str = r#"
seed = 7
arch = "toy"

[train]
float_epochs = 2
epochs = 1
batch_size = 8
bit_schedule = [
  { weights = "fp32", acts = "fp32" },
  { weights = "int8", acts = "int8" },
  { weights = "ternary", acts = "int3" },
]

[eval]
subset_size = 8
"#;

fn tfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfd"))
        .args(args)
        .env("TFD_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = tfd(args);
    assert!(
        o.status.success(),
        "tfd {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Sources, a synthesized corpus and a trained run shared by the tests.
struct World {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    corpus: PathBuf,
    run: PathBuf,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("run.toml");
        fs::write(&config, CONFIG).unwrap();
        let (src, corpus, run) = (root.join("src"), root.join("corpus"), root.join("run"));
        let c = s(&config);
        ok(&["--config", c, "toy", "--n", "24", "--out", s(&src)]);
        ok(&["--config", c, "synth", "--in", s(&src), "--out", s(&corpus)]);
        ok(&["--config", c, "train", "--corpus", s(&corpus), "--out", s(&run)]);
        World {
            _tmp: tmp,
            root,
            config,
            corpus,
            run,
        }
    })
}

fn dets_of(path: &Path) -> Vec<Vec<Detection>> {
    read_detections(path).unwrap().iter().map(|r| r.detections()).collect()
}

#[test]
fn synth_manifest_and_determinism() {
    let w = world();
    let m: CorpusManifest = serde_json::from_slice(&fs::read(w.corpus.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.entries.len(), 24);
    for e in &m.entries {
        let names: Vec<&str> = e.stages.iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(names, STAGE_ORDER, "{}", e.id);
    }
    let again = w.root.join("corpus_again");
    let c = s(&w.config);
    ok(&["--config", c, "synth", "--in", s(&w.root.join("src")), "--out", s(&again)]);
    assert_eq!(hash_outputs(&again).unwrap(), hash_outputs(&w.corpus).unwrap());
    // the flag beats the file
    let other = w.root.join("corpus_seed8");
    ok(&["--config", c, "--seed", "8", "synth", "--in", s(&w.root.join("src")), "--out", s(&other)]);
    assert_ne!(hash_outputs(&other).unwrap(), hash_outputs(&w.corpus).unwrap());
    let rm = RunManifest::read(&other.join(MANIFEST_FILE)).unwrap();
    assert_eq!(rm.config.run.seed, 8);
}

#[test]
fn empty_annotations_give_empty_corpus() {
    let w = world();
    let src = w.root.join("empty_src");
    fs::create_dir_all(&src).unwrap();
    fs::write(src.join("annotations.jsonl"), "").unwrap();
    let out = w.root.join("empty_corpus");
    ok(&["synth", "--in", s(&src), "--out", s(&out)]);
    assert!(load_frames(&out).unwrap().is_empty());
}

#[test]
fn train_writes_stages_log_and_manifest() {
    let w = world();
    let stages: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(w.run.join("stages.json")).unwrap()).unwrap();
    let tags: Vec<&str> = stages.iter().map(|v| v["stage"].as_str().unwrap()).collect();
    assert_eq!(tags, ["fp32", "w8a8", "wtera3"]);
    let log = fs::read_to_string(w.run.join("train_log.csv")).unwrap();
    assert!(log.lines().count() > 3);
    let m = RunManifest::read(&w.run.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.config.run.arch, "toy");
    assert_eq!(m.config.run.train.batch_size, 8);
    assert_eq!(m.config.anchors.sizes.len(), m.config.anchors.per_cell());
    assert!(m.outputs.contains_key("stage2_wtera3.tfdw"));
    let (g, h) = load_checkpoint(&w.run.join("stage2_wtera3.tfdw"), None).unwrap();
    assert_eq!(h.stage, "wtera3");
    assert!(!g.folded && g.is_quantized());
}

#[test]
fn replay_reproduces_training() {
    let w = world();
    let out = w.root.join("replayed");
    ok(&["replay", "--manifest", s(&w.run.join(MANIFEST_FILE)), "--out", s(&out)]);
    assert_eq!(hash_outputs(&out).unwrap(), hash_outputs(&w.run).unwrap());
    let o = tfd(&["replay", "--manifest", s(&w.run.join(MANIFEST_FILE)), "--out", s(&w.run)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fold_twice_is_refused() {
    let w = world();
    let (a, b) = (w.root.join("fold1"), w.root.join("fold2"));
    ok(&["fold", "--ckpt", s(&w.run.join("stage1_w8a8.tfdw")), "--out", s(&a)]);
    let o = tfd(&["fold", "--ckpt", s(&a.join("w8a8_folded.tfdw")), "--out", s(&b)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("already folded"));
}

#[test]
fn engines_agree_on_folded_ternary() {
    let w = world();
    let fold = w.root.join("fold_ter");
    ok(&["fold", "--ckpt", s(&w.run.join("stage2_wtera3.tfdw")), "--out", s(&fold)]);
    let ck = fold.join("wtera3_folded.tfdw");
    let (fq, int) = (w.root.join("inf_fq"), w.root.join("inf_int"));
    ok(&["infer", "--ckpt", s(&ck), "--corpus", s(&w.corpus), "--engine", "fakequant", "--out", s(&fq)]);
    ok(&["infer", "--ckpt", s(&ck), "--corpus", s(&w.corpus), "--engine", "integer", "--out", s(&int)]);
    let agree = common::mean_agreement(&dets_of(&fq.join("detections.jsonl")), &dets_of(&int.join("detections.jsonl")));
    assert!(agree >= 0.95, "mean IoU {agree}");
    // integer engine on an unfolded checkpoint is rejected with a reason
    let o = tfd(&[
        "infer", "--ckpt", s(&w.run.join("stage2_wtera3.tfdw")), "--corpus", s(&w.corpus), "--engine", "integer",
        "--out", s(&w.root.join("inf_bad")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fold"));
}

#[test]
fn eval_matches_oracle_and_reports_cost() {
    let w = world();
    let ck = w.run.join("stage0_fp32.tfdw");
    let (ev, inf) = (w.root.join("eval"), w.root.join("eval_inf"));
    ok(&["--config", s(&w.config), "eval", "--ckpt", s(&ck), "--corpus", s(&w.corpus), "--subsets", "--out", s(&ev)]);
    ok(&["--config", s(&w.config), "infer", "--ckpt", s(&ck), "--corpus", s(&w.corpus), "--out", s(&inf)]);
    let r: EvalOutput = serde_json::from_slice(&fs::read(ev.join("report.json")).unwrap()).unwrap();
    let frames = load_frames(&w.corpus).unwrap();
    let gts: Vec<Vec<[f64; 4]>> = frames.iter().map(|f| f.boxes.clone()).collect();
    let dets = dets_of(&inf.join("detections.jsonl"));
    for (t, got) in [(0.5, r.eval.ap50), (0.75, r.eval.ap75), (0.9, r.eval.ap90)] {
        let want = common::brute_ap(&dets, &gts, t);
        assert!((got - want).abs() < 1e-12, "AP@{t}: {got} vs {want}");
        assert_eq!(average_precision(&dets, &gts, t).unwrap(), got);
    }
    assert!(r.eval.ap_small.is_some() && r.eval.ap_noisy.is_some() && r.eval.ap_backlight.is_some());
    assert_eq!(r.stage, "fp32");
    assert_eq!(r.cost.num_layers, load_checkpoint(&ck, None).unwrap().0.weight_layers().len());
    let table = fs::read_to_string(ev.join("table.txt")).unwrap();
    assert!(table.contains("FP32"), "{table}");
}

#[test]
fn quantize_then_render() {
    let w = world();
    let q = w.root.join("ptq");
    ok(&["quantize", "--ckpt", s(&w.run.join("stage0_fp32.tfdw")), "--corpus", s(&w.corpus), "--bits", "w4a4", "--out", s(&q)]);
    let (g, h) = load_checkpoint(&q.join("w4a4.tfdw"), None).unwrap();
    assert_eq!(h.stage, "w4a4");
    assert!(g.check_quantizers().unwrap());
    let inf = w.root.join("ptq_inf");
    ok(&["infer", "--ckpt", s(&q.join("w4a4.tfdw")), "--corpus", s(&w.corpus), "--engine", "fakequant", "--out", s(&inf)]);
    let png = w.root.join("png");
    ok(&["render", "--corpus", s(&w.corpus), "--detections", s(&inf.join("detections.jsonl")), "--out", s(&png)]);
    let n = fs::read_dir(&png).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(n, 24);
    let img = image::open(png.join("scene00000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (160, 120));
}

#[test]
fn input_and_numeric_errors_have_distinct_codes() {
    let w = world();
    let bad = w.root.join("bad.toml");
    fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    let o = tfd(&["--config", s(&bad), "toy", "--out", s(&w.root.join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(tfd(&["fold", "--ckpt", s(&w.root.join("missing.tfdw")), "--out", s(&w.root.join("y"))]).status.code(), Some(1));
    assert_eq!(tfd(&["toy"]).status.code(), Some(1));
    let boom = w.root.join("boom.toml");
    fs::write(&boom, format!("{CONFIG}\n").replace("batch_size = 8", "batch_size = 8\nbase_lr = 1e200\nwarmup_epochs = 0.0\ngrad_clip = 0.0")).unwrap();
    let out = w.root.join("boom");
    let o = tfd(&["--config", s(&boom), "train", "--corpus", s(&w.corpus), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join(MANIFEST_FILE).exists());
}

#[test]
fn commands_leave_inputs_alone() {
    let w = world();
    let before = hash_outputs(&w.corpus).unwrap();
    let o = tfd(&["synth", "--in", s(&w.root.join("src")), "--out", s(&w.root.join("src"))]);
    assert_eq!(o.status.code(), Some(1));
    ok(&["infer", "--ckpt", s(&w.run.join("stage0_fp32.tfdw")), "--corpus", s(&w.corpus), "--out", s(&w.root.join("inf_again"))]);
    assert_eq!(hash_outputs(&w.corpus).unwrap(), before);
}

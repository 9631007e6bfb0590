use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csctrack::checkpoint::load_model;
use csctrack::config::RunConfig;
use csctrack::model::Model;
use csctrack::mot::{read_mot, MotKind, TrackRecord};

const TINY: &str = r#"
seed = 3
[data]
train_sequences = 2
test_sequences = 1
[data.scenario]
frames = 12
num_targets = 3
crossings = []
[model]
dim = 8
[model.encoder]
channels = [4]
[model.region]
patch_size = 8
[train]
steps = 3
batch_size = 1
clip_len = 3
[ablation]
seeds = [0]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_csctrack"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    Fixture { _dir: dir, root, config }
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic() {
    let f = fixture();
    let a = f.root.join("a");
    let b = f.root.join("b");
    ok(&["synth", "--config", s(&f.config), "--out", s(&a)]);
    ok(&["synth", "--config", s(&f.config), "--out", s(&b)]);
    let fa: Vec<_> = files(&a).into_iter().filter(|(p, _)| p != Path::new("manifest.json")).collect();
    let fb: Vec<_> = files(&b).into_iter().filter(|(p, _)| p != Path::new("manifest.json")).collect();
    assert!(fa.iter().any(|(p, _)| p.ends_with("gt/gt.txt")));
    assert_eq!(fa, fb);
    assert!(a.join("train/train-001").is_dir() && a.join("test/test-000").is_dir());

    let c = f.root.join("c");
    ok(&["synth", "--config", s(&f.config), "--seed", "4", "--out", s(&c)]);
    assert_ne!(
        fs::read(a.join("test/test-000/gt/gt.txt")).unwrap(),
        fs::read(c.join("test/test-000/gt/gt.txt")).unwrap()
    );
}

#[test]
fn manifest_and_config_allow_rerun() {
    let f = fixture();
    let a = f.root.join("a");
    ok(&["synth", "--config", s(&f.config), "--seed", "9", "--out", s(&a)]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
    assert!(m["command"].as_array().unwrap().iter().any(|v| v == "synth"));
    let resolved = a.join("config.toml");
    assert_eq!(RunConfig::load(&resolved).unwrap().seed, 9);

    let b = f.root.join("b");
    ok(&["synth", "--config", s(&resolved), "--out", s(&b)]);
    assert_eq!(
        fs::read(a.join("train/train-000/gt/gt.txt")).unwrap(),
        fs::read(b.join("train/train-000/gt/gt.txt")).unwrap()
    );
}

#[test]
fn zero_steps_saves_initial_weights() {
    let f = fixture();
    let out = f.root.join("t");
    ok(&["train", "--config", s(&f.config), "--steps", "0", "--out", s(&out)]);
    let (model, _) = load_model(&out.join("checkpoint.json")).unwrap();
    let cfg = RunConfig::load(&f.config).unwrap();
    let init = Model::init(cfg.model, cfg.seed).unwrap();
    assert_eq!(model.params, init.params);
}

#[test]
fn training_is_reproducible() {
    let f = fixture();
    let data = f.root.join("data");
    ok(&["synth", "--config", s(&f.config), "--out", s(&data)]);
    let a = f.root.join("a");
    let b = f.root.join("b");
    for out in [&a, &b] {
        ok(&["train", "--config", s(&f.config), "--data", s(&data), "--out", s(out)]);
    }
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert!(log.lines().count() >= 3);
    assert_eq!(log, fs::read_to_string(b.join("train_log.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("checkpoint.json")).unwrap(),
        fs::read(b.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn track_flags_and_eval() {
    let f = fixture();
    let data = f.root.join("data");
    let model = f.root.join("model");
    ok(&["synth", "--config", s(&f.config), "--out", s(&data)]);
    ok(&["train", "--config", s(&f.config), "--steps", "0", "--out", s(&model)]);
    let ck = model.join("checkpoint.json");
    let seq = data.join("test/test-000");

    let plain = f.root.join("plain");
    ok(&["track", "--checkpoint", s(&ck), "--sequence", s(&seq), "--out", s(&plain)]);
    let result = plain.join("test-000.txt");
    let tracks = read_mot(&result, MotKind::GroundTruth).unwrap();
    assert!(!tracks.is_empty());

    let strict = f.root.join("strict");
    ok(&["track", "--checkpoint", s(&ck), "--sequence", s(&seq), "--beta", "1.1", "--out", s(&strict)]);
    let mut frames_per_id: HashMap<i64, usize> = HashMap::new();
    for r in read_mot(&strict.join("test-000.txt"), MotKind::GroundTruth).unwrap().records {
        *frames_per_id.entry(r.id).or_default() += 1;
    }
    assert!(frames_per_id.values().all(|&n| n == 1));

    let noise = f.root.join("noise.toml");
    fs::write(&noise, "shift_prob = 1.0\nshift_max_pixels = 6.0\n").unwrap();
    let noisy = f.root.join("noisy");
    ok(&["track", "--checkpoint", s(&ck), "--sequence", s(&seq), "--noise-config", s(&noise), "--out", s(&noisy)]);
    assert_ne!(fs::read(&result).unwrap(), fs::read(noisy.join("test-000.txt")).unwrap());

    let ev = f.root.join("ev");
    let gt = seq.join("gt/gt.txt");
    let out = ok(&["eval", "--result", s(&gt), "--gt", s(&seq), "--out", s(&ev)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("OVERALL"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["mota"], 1.0);
    assert_eq!(report["idf1"], 1.0);
    assert!(fs::read_to_string(ev.join("eval.csv")).unwrap().starts_with("sequence,mota,idf1"));
    ok(&["eval", "--result", s(&result), "--gt", s(&gt), "--iou", "0.3", "--out", s(&ev)]);
}

#[test]
fn ablate_prints_one_row_per_setting() {
    let f = fixture();
    let out = f.root.join("ab");
    let o = ok(&["ablate", "--axis", "fusion", "--config", s(&f.config), "--out", s(&out)]);
    let text = String::from_utf8_lossy(&o.stdout);
    for label in ["semantic", "multi-region", "csc"] {
        assert!(text.contains(label), "{text}");
    }
    let csv = fs::read_to_string(out.join("ablate_fusion.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

#[test]
fn failures_are_one_categorised_line() {
    let f = fixture();
    let out = f.root.join("x");
    let e = error_line(&run(&["eval", "--result", "/nonexistent/r.txt", "--gt", "/nonexistent", "--out", s(&out)]));
    assert!(e.starts_with("error: io: "), "{e}");

    let o = run(&["ablate", "--axis", "colour", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error: usage: "));

    let o = run(&["track", "--beta", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error: usage: "));

    let bad = f.root.join("bad.toml");
    fs::write(&bad, "[tracker]\nbeta = -1.0\n").unwrap();
    let e = error_line(&run(&["synth", "--config", s(&bad), "--out", s(&out)]));
    assert!(e.starts_with("error: config: "), "{e}");

    let junk = f.root.join("junk.json");
    fs::write(&junk, "{").unwrap();
    let e = error_line(&run(&["track", "--checkpoint", s(&junk), "--sequence", s(&out), "--out", s(&out)]));
    assert!(e.starts_with("error: checkpoint: "), "{e}");

    assert!(!run(&["track"]).status.success());
}

#[test]
fn rerun_reproduces_outputs() {
    let f = fixture();
    let a = f.root.join("a");
    ok(&["train", "--config", s(&f.config), "--seed", "5", "--steps", "2", "--out", s(&a)]);
    let b = f.root.join("b");
    ok(&["rerun", "--manifest", s(&a.join("manifest.json")), "--out", s(&b)]);
    for name in ["checkpoint.json", "train_log.csv", "config.toml"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn single_scenario_config_writes_one_sequence() {
    let f = fixture();
    let cfg = f.root.join("one.toml");
    fs::write(&cfg, TINY.replace("train_sequences = 2\ntest_sequences = 1", "train_sequences = 1\ntest_sequences = 0")).unwrap();
    let out = f.root.join("one");
    ok(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    let seqs: Vec<_> = files(&out).into_iter().filter(|(p, _)| p.ends_with("gt/gt.txt")).collect();
    assert_eq!(seqs.len(), 1);
}

fn overlap(a: &TrackRecord, b: &TrackRecord) -> bool {
    let (a, b) = (&a.bbox, &b.bbox);
    a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h
}

#[test]
fn hard_preset_contains_crossings() {
    let f = fixture();
    let cfg = f.root.join("hard.toml");
    fs::write(&cfg, "seed = 1\n[data]\npreset = \"hard\"\ntrain_sequences = 1\ntest_sequences = 0\n").unwrap();
    let out = f.root.join("hard");
    ok(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    let gt = read_mot(&out.join("train/train-000/gt/gt.txt"), MotKind::GroundTruth).unwrap();
    let mut by_frame: HashMap<usize, Vec<_>> = HashMap::new();
    for r in &gt.records {
        by_frame.entry(r.frame).or_default().push(r);
    }
    let crossings = by_frame
        .values()
        .filter(|rs| rs.iter().enumerate().any(|(i, a)| rs[i + 1..].iter().any(|b| overlap(a, b))))
        .count();
    assert!(crossings > 0);
}

//! End-to-end runs of the command-line tool on a reduced configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use wsodlab::eval;
use wsodlab::experiment::commands;
use wsodlab::experiment::store;
use wsodlab::experiment::ExperimentConfig;

const SMALL: &str = "\
# reduced benchmark for tests
train_scenes = 12
eval_scenes = 6
train.steps = 42
context.steps = 20
diagnose.every = 10
diagnose.scenes = 4
log.every = 10
ablate.seeds = 2
";

fn wsodlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsodlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = wsodlab(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) -> String {
    let cfg = dir.join("small.txt");
    fs::write(&cfg, SMALL).unwrap();
    cfg.to_str().unwrap().to_string()
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

#[test]
fn gen_train_eval_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();

    let gen = ok(&["gen", "--config", &cfg, "--out", o]);
    assert!(gen.contains("train.scenes = 12"));
    let manifest = store::read_manifest(&out.join(commands::MANIFEST)).unwrap();
    assert!(manifest.iter().any(|(k, v)| k == "proposals" && v == "149"));

    ok(&[
        "train", "--config", &cfg, "--mode", "cap+srn", "--seed", "3", "--out", o,
    ]);
    for f in [commands::CONTEXT_CKPT, commands::CONTEXT_PROBS, commands::DETECTOR_CKPT] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let saved = ExperimentConfig::load(&out.join(commands::CONFIG)).unwrap();
    assert_eq!(saved.seed, 3);
    assert_eq!(saved.mode.as_str(), "cap+srn");
    assert_eq!(saved.train_steps, 42);

    let log = header(&out.join(commands::TRAIN_LOG));
    assert_eq!(&log[..5], ["step", "scene", "lr", "total", "wsddn"]);
    assert!(log.contains(&"refine3".to_string()) && log.contains(&"far_weighted3".to_string()));
    let steps = csv::Reader::from_path(out.join(commands::TRAIN_LOG))
        .unwrap()
        .records()
        .count();
    assert_eq!(steps, 42);
    let invariants = csv::Reader::from_path(out.join(commands::INVARIANTS_LOG))
        .unwrap()
        .records()
        .count();
    assert_eq!(invariants, 5);
    let probs = store::read_probs(&out.join(commands::CONTEXT_PROBS)).unwrap();
    assert_eq!(probs.len(), 12);

    let eval_out = ok(&["eval", "--config", &cfg, "--seed", "3", "--out", o]);
    assert!(eval_out.starts_with("mAP "));
    let metrics = eval::read_csv(&out.join(commands::METRICS_CSV)).unwrap();
    assert_eq!(metrics.len(), 1);
    let records = eval::read_jsonl(&out.join(commands::METRICS_JSONL)).unwrap();
    assert_eq!(eval::Metrics::from_records(&records).unwrap(), metrics[0]);
}

#[test]
fn baseline_training_skips_the_context_phase() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let o = tmp.path().join("run");
    let o = o.to_str().unwrap();
    ok(&["gen", "--config", &cfg, "--out", o]);
    ok(&["train", "--config", &cfg, "--mode", "baseline", "--out", o]);
    assert!(!Path::new(o).join(commands::CONTEXT_CKPT).exists());
    let mut r = csv::Reader::from_path(Path::new(o).join(commands::LABELING_LOG)).unwrap();
    assert!(r
        .records()
        .map(Result::unwrap)
        .all(|e| e[4].is_empty() && e[5].is_empty()));
}

#[test]
fn diagnose_and_ablate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    ok(&["gen", "--config", &cfg, "--out", o]);

    let diag = ok(&["diagnose", "--config", &cfg, "--out", o]);
    assert!(diag.contains("step 0:") && diag.contains("step 20:"));
    let buckets = eval::read_bucket_csv(&out.join(commands::BUCKET_LOSSES)).unwrap();
    assert_eq!(buckets.iter().map(|r| r.0).collect::<Vec<_>>(), [0, 10, 20]);

    let table = ok(&["ablate", "--config", &cfg, "--out", o]);
    for mode in ["baseline", "cap", "srn", "cap+srn"] {
        assert!(table.lines().any(|l| l.starts_with(mode)), "{mode} row missing");
    }
    let all = eval::read_csv(&out.join(commands::ABLATION_CSV)).unwrap();
    assert_eq!(all.len(), 8);
    assert_eq!(fs::read_to_string(out.join(commands::ABLATION_TXT)).unwrap(), table);
    assert!(out
        .join("cap_srn")
        .join("seed1")
        .join(commands::METRICS_JSONL)
        .is_file());
}

#[test]
fn errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().join("empty");
    let out = wsodlab(&["train", "--out", o.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "labeling.negative_iou = 0.6\n").unwrap();
    let out = wsodlab(&["gen", "--config", bad.to_str().unwrap(), "--out", o.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!o.join(commands::TRAIN_SPLIT).exists());

    let out = wsodlab(&["gen", "--mode", "oicr", "--out", o.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn regenerating_gives_identical_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["gen", "--config", &cfg, "--out", a.to_str().unwrap()]);
    ok(&["gen", "--config", &cfg, "--out", b.to_str().unwrap()]);
    for f in [
        commands::TRAIN_SPLIT,
        commands::EVAL_SPLIT,
        commands::MANIFEST,
        commands::CONFIG,
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_without_checkpoint_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = tmp.path().join("run");
    ok(&["gen", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let config = ExperimentConfig::load(Path::new(&cfg)).unwrap();
    assert!(matches!(commands::cmd_eval(&config, &out), Err(wsodlab::Error::Io(_))));
}

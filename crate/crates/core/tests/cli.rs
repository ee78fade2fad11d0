use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use dvla::cli::Checkpoint;
use dvla::decoder::{expected_trace, TRACE_HEADER};
use dvla::trainer::LOG_HEADER;
use serde_json::Value;
use sha2::{Digest, Sha256};

const TINY: &[&str] = &[
    "model.layers=1",
    "model.d_model=32",
    "model.heads=2",
    "train.max_steps=40",
    "train.lr=1e-3",
    "codec.kmeans_frames=200",
    "decode.steps=8",
];

fn dvla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dvla")).args(args).output().expect("spawn dvla")
}

fn ok(args: &[&str]) -> String {
    let out = dvla(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn sha256(path: &Path) -> String {
    Sha256::digest(std::fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

fn train_args<'a>(data: &'a str, out: &'a str, log: &'a str) -> Vec<&'a str> {
    let mut args = vec!["train", "--data", data, "--out", out, "--log", log, "--progress", "0"];
    for s in TINY {
        args.extend(["--set", s]);
    }
    args
}

struct Fixture {
    dir: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
    log: PathBuf,
    summary: Value,
}

/// 50 episodes and one tiny checkpoint shared by the tests below.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli_fixture");
        std::fs::create_dir_all(&dir).unwrap();
        let data = dir.join("episodes.jsonl");
        let ckpt = dir.join("tiny.ckpt");
        let log = dir.join("log.csv");
        ok(&["gen-data", "--episodes", "50", "--seed", "3", "--out", data.to_str().unwrap()]);
        let out = ok(&train_args(data.to_str().unwrap(), ckpt.to_str().unwrap(), log.to_str().unwrap()));
        Fixture { dir, data, ckpt, log, summary: serde_json::from_str(&out).unwrap() }
    })
}

#[test]
fn gen_data_lines_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    ok(&["gen-data", "--episodes", "10", "--seed", "7", "--out", a.to_str().unwrap()]);
    ok(&["gen-data", "--episodes", "10", "--seed", "7", "--out", b.to_str().unwrap()]);
    let text = std::fs::read_to_string(&a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    for line in lines {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["success"], Value::Bool(true));
        for key in ["episode_id", "seed", "instruction"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        for s in v["steps"].as_array().unwrap() {
            assert_eq!(s["image"].as_array().unwrap().len(), 3 * 32 * 32);
            assert_eq!(s["action"].as_array().unwrap().len(), 3);
            assert!(s["proprio"].as_str().unwrap().starts_with("| x="));
        }
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn train_smoke_writes_checkpoint_and_log() {
    let f = fixture();
    let initial = f.summary["initial_loss"].as_f64().unwrap();
    let fin = f.summary["final_loss"].as_f64().unwrap();
    assert!(fin < initial, "{initial} -> {fin}");
    assert_eq!(f.summary["steps"], 40);
    let log = std::fs::read_to_string(&f.log).unwrap();
    assert_eq!(log.lines().next(), Some(LOG_HEADER));
    assert_eq!(log.lines().count(), 41);
}

#[test]
fn checkpoint_reload_and_config_determinism() {
    let f = fixture();
    let ck = Checkpoint::load(&f.ckpt).unwrap();
    let again = f.dir.join("resaved.ckpt");
    ck.save(&again).unwrap();
    assert_eq!(sha256(&again), sha256(&f.ckpt));
    assert_eq!(Checkpoint::load(&again).unwrap().params, ck.params);

    let second = f.dir.join("second.ckpt");
    let log = f.dir.join("second.csv");
    ok(&train_args(f.data.to_str().unwrap(), second.to_str().unwrap(), log.to_str().unwrap()));
    assert_eq!(sha256(&second), sha256(&f.ckpt));
}

#[test]
fn config_file_with_dotted_keys() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model.layers": 1, "model.d_model": 16, "model.heads": 2, "train.max_steps": 3, "codec.kmeans_frames": 100}"#,
    )
    .unwrap();
    let ck = tmp.path().join("c.ckpt");
    let log = tmp.path().join("c.csv");
    let out = ok(&[
        "train",
        "--data",
        f.data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.seed=4",
        "--out",
        ck.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
        "--progress",
        "0",
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["steps"], 3);
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.config.model.d_model, 16);
    assert_eq!(loaded.config.train.seed, 4);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.jsonl");
    let ck = tmp.path().join("x.ckpt");
    let out = dvla(&["train", "--data", missing.to_str().unwrap(), "--out", ck.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let f = fixture();
    let out = dvla(&["train", "--data", f.data.to_str().unwrap(), "--set", "train.bogus=1"]);
    assert_eq!(out.status.code(), Some(1));

    let mut bytes = std::fs::read(&f.ckpt).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    let future = tmp.path().join("future.ckpt");
    std::fs::write(&future, bytes).unwrap();
    let out = dvla(&["rollout", "--ckpt", future.to_str().unwrap(), "--episodes", "1"]);
    assert_eq!(out.status.code(), Some(4));
    let out = dvla(&["inspect-decode", "--ckpt", future.to_str().unwrap(), "--out", "-"]);
    assert_eq!(out.status.code(), Some(4));
}

fn rollout_json(args: &[&str]) -> Value {
    serde_json::from_str(&ok(args)).unwrap()
}

#[test]
fn rollout_baselines() {
    let expert = rollout_json(&["rollout", "--policy", "expert", "--episodes", "100", "--seed", "900"]);
    let random = rollout_json(&["rollout", "--policy", "random", "--episodes", "100", "--seed", "900"]);
    assert!(expert["success_rate"].as_f64().unwrap() >= 0.95);
    assert!(random["success_rate"].as_f64().unwrap() <= 0.05);
    assert_eq!(expert["episodes"].as_array().unwrap().len(), 100);
}

#[test]
fn rollout_cache_refresh_every_step_matches_uncached() {
    let f = fixture();
    let ck = f.ckpt.to_str().unwrap();
    let common = ["rollout", "--ckpt", ck, "--episodes", "3", "--seed", "40", "--set", "sim.max_steps=20"];
    let off = rollout_json(&[&common[..], &["--cache", "off"]].concat());
    let on = rollout_json(&[&common[..], &["--cache", "on", "--lambda", "1", "--compare"]].concat());
    assert_eq!(off["episodes"], on["episodes"]);
    assert_eq!(on["cache_agreement"].as_f64(), Some(1.0));
    assert!(off["cache_agreement"].is_null());
    assert!(off["decode_ms_mean"].as_f64().unwrap() > 0.0);
}

fn trace_rows(csv: &str) -> Vec<Vec<String>> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(TRACE_HEADER));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn inspect_decode_trace_follows_schedule() {
    let f = fixture();
    let ck = f.ckpt.to_str().unwrap();
    let rows = trace_rows(&ok(&["inspect-decode", "--ckpt", ck, "--seed", "2", "--out", "-"]));
    assert_eq!(rows.len(), 8);
    let masked: Vec<usize> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(masked, expected_trace(79, 8)[1..]);
    assert_eq!(*masked.last().unwrap(), 0);
    assert!(rows.iter().all(|r| r[6].is_empty()));

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("t.csv");
    ok(&[
        "inspect-decode",
        "--ckpt",
        ck,
        "--seed",
        "2",
        "--cache",
        "on",
        "--lambda",
        "4",
        "--rho",
        "0.5",
        "--out",
        path.to_str().unwrap(),
    ]);
    let cached = trace_rows(&std::fs::read_to_string(&path).unwrap());
    assert_eq!(cached.len(), 8);
    assert!(cached.iter().all(|r| r[6].parse::<f64>().is_ok()));
    let hits: usize = cached.iter().map(|r| r[5].parse::<usize>().unwrap()).sum();
    assert!(hits > 0);
}

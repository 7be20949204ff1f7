//! End-to-end runs of the binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use fedadapter::adapter::{AdapterConfig, AdapterParams};
use fedadapter::qlora::{encode_delta, LowRankDelta, Precision};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedadapter")).args(args).output().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> String {
    small_config_named(dir, "run.toml", extra)
}

fn small_config_named(dir: &Path, name: &str, extra: &str) -> String {
    let out = dir.join("run");
    let text = format!(
        "seed = 3\nrounds = 10\nn_clients = 3\nout_path = {:?}\n{extra}\n[gan]\nepochs = 5\n\n[dataset]\nsamples_per_class = 30\n",
        out.to_str().unwrap()
    );
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn records(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("run/metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn run_writes_one_record_per_round_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let o = bin(&["run", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rounds: 10"));

    let recs = records(dir.path());
    assert_eq!(recs.len(), 11);
    for (t, r) in recs[..10].iter().enumerate() {
        assert_eq!(r["type"], "round");
        assert_eq!(r["round"], t);
    }
    let summary = &recs[10];
    assert_eq!(summary["type"], "summary");
    assert_eq!(summary["per_class_recall"].as_array().unwrap().len(), 8);
    assert_eq!(fs::read_to_string(dir.path().join("run/timing.jsonl")).unwrap().lines().count(), 10);
    assert!(dir.path().join("run/config.toml").exists());

    let plots = dir.path().join("plots");
    let metrics = dir.path().join("run/metrics.jsonl");
    let o = bin(&["export-plots", "--in", metrics.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let acc = fs::read_to_string(plots.join("server_accuracy.csv")).unwrap();
    assert_eq!(acc.lines().count(), 11);
    assert_eq!(acc.lines().next(), Some("round,accuracy,loss"));
    let bytes = fs::read_to_string(plots.join("bytes.csv")).unwrap();
    let up: Vec<u64> = bytes.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(up.len(), 10);
    assert!(up.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(fs::read_to_string(plots.join("client_loss.csv")).unwrap().lines().count(), 1 + 10 * 3);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let o = bin(&["run", "--config", &cfg, "--rounds", "2", "--gan", "off", "--bits", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = records(dir.path());
    assert_eq!(recs.len(), 3);
    let written = fs::read_to_string(dir.path().join("run/config.toml")).unwrap();
    assert!(written.contains("rounds = 2"));
    assert!(written.contains("bits = 8"));
    let aug = recs[2]["augmentation"].as_array().unwrap();
    assert!(aug.iter().all(|c| c["synthetic_per_class"].as_array().unwrap().is_empty()));
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let cfg = small_config(d.path(), "");
        assert!(bin(&["run", "--config", &cfg, "--rounds", "3"]).status.success());
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn bad_input_maps_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    assert_eq!(bin(&["run", "--config", &cfg, "--bits", "3"]).status.code(), Some(1));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["run", "--rounds", "many"]).status.code(), Some(1));

    let unknown = small_config_named(dir.path(), "unknown.toml", "no_such_key = 1");
    let o = bin(&["run", "--config", &unknown]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let missing = dir.path().join("absent.csv");
    let arg = format!("embeddings:{}", missing.display());
    assert_eq!(bin(&["run", "--config", &cfg, "--dataset", &arg]).status.code(), Some(2));
    assert_eq!(bin(&["inspect-delta", missing.to_str().unwrap()]).status.code(), Some(2));

    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a payload").unwrap();
    assert_eq!(bin(&["inspect-delta", junk.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn inspect_delta_lists_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let params = AdapterParams::init(&AdapterConfig::default(), 0);
    let bytes = encode_delta(&LowRankDelta::zeros_for(&params, 4, 8.0), Precision::Int4, 64).unwrap();
    let p = dir.path().join("delta.bin");
    fs::write(&p, &bytes).unwrap();
    let o = bin(&["inspect-delta", p.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("precision: 4-bit\nblock_size: 64\ntensors: 10\n"));
    assert!(text.contains(&format!("bytes: {}\n", bytes.len())));
    assert_eq!(text.lines().filter(|l| l.starts_with("  ")).count(), 10);
}

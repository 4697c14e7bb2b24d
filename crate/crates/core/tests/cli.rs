use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

use flatoram::memory::Dram;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flatoram")).args(args).output().expect("binary runs")
}

const SMALL: &[&str] = &["--capacity", "512K", "--utilization", "1/2", "--plb-bytes", "8K"];

fn simulate(extra: &[&str]) -> Output {
    let mut args = vec!["simulate"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    bin(&args)
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn simulate_emits_consistent_report() {
    let r = json(&simulate(&["--gen", "uniform", "--len", "2000", "--scheme", "hive"]));
    assert_eq!(r["scheme"], "hive");
    assert_eq!(r["requests"], 2000);
    let acc = (r["dram_reads"].as_u64().unwrap() + r["dram_writes"].as_u64().unwrap()) as f64 / 2000.0;
    assert_eq!(r["accesses_per_request"].as_f64().unwrap(), acc);
    assert_eq!(r["params"]["physical_slots"], 4096);
}

#[test]
fn same_seed_same_bytes() {
    let a = simulate(&["--gen", "zipf", "--len", "1000", "--seed", "9"]);
    let b = simulate(&["--gen", "zipf", "--len", "1000", "--seed", "9"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn audit_and_periodic() {
    let r = json(&simulate(&["--gen", "uniform", "--len", "3000", "--audit"]));
    let audit = &r["audit"];
    assert_eq!(audit["writes_during_reads"], 0);
    assert_eq!(audit["consistent"], true);
    assert_eq!(audit["uniformity"]["pass"], true);
    let r = json(&simulate(&["--gen", "uniform", "--len", "500", "--period", "100"]));
    assert_eq!(r["mode"], "periodic");
    let sizes = r["period_diff_sizes"].as_object().unwrap();
    assert_eq!(sizes.keys().collect::<Vec<_>>(), vec!["1"]);
}

#[test]
fn trace_file_metrics_file_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.trace");
    fs::write(&trace, "# warmup\nW 0\nW 0x1\nR 0\n\nR 1\n").unwrap();
    let metrics = dir.path().join("m.json");
    let dump = dir.path().join("d.bin");
    let out = simulate(&[
        "--trace",
        trace.to_str().unwrap(),
        "--metrics-out",
        metrics.to_str().unwrap(),
        "--snapshot-dump",
        dump.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let r: Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!((r["reads"].as_u64(), r["writes"].as_u64()), (Some(2), Some(2)));
    let d = Dram::load_dump(fs::File::open(&dump).unwrap(), 4096, 100).unwrap();
    assert_eq!(d.len(), 4096);
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("p.conf");
    fs::write(&cfg, "# small\ncapacity_bytes = 256K\ndata_blocks = 600\nstash_capacity = 40\n").unwrap();
    let out = bin(&["simulate", "--config", cfg.to_str().unwrap(), "--stash", "20", "--len", "100"]);
    let r = json(&out);
    assert_eq!(r["params"]["physical_slots"], 2048);
    assert_eq!(r["params"]["data_blocks"], 600);
    assert_eq!(r["params"]["stash_capacity"], 20);
    assert_eq!(r["params"]["stash_low_watermark"], 10);
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let mut args = vec!["sweep", "--param", "stash_capacity", "--values", "8,32", "--len", "500"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--csv-out", csv.to_str().unwrap()]);
    let r = json(&bin(&args));
    assert_eq!(r["points"].as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn attack_plain_memory_recovers_key() {
    let r = json(&bin(&["attack", "--mode", "dram", "--key-bits", "64", "--trials", "3"]));
    assert_eq!(r["mean_accuracy"], 1.0);
}

#[test]
fn exit_codes() {
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    assert_eq!(bin(&["simulate", "--bogus"]).status.code(), Some(1));
    assert_eq!(simulate(&["--scheme", "pathoram"]).status.code(), Some(1));
    assert_eq!(simulate(&["--gen", "nope"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.trace");
    fs::write(&bad, "R 1\nX 2\n").unwrap();
    let out = simulate(&["--trace", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let ok = dir.path().join("ok.trace");
    fs::write(&ok, "R 3\n").unwrap();
    let out = simulate(&["--trace", ok.to_str().unwrap(), "--tamper-block", "3"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = simulate(&["--trace", ok.to_str().unwrap(), "--tamper-block", "4"]);
    assert_eq!(out.status.code(), Some(0));
}

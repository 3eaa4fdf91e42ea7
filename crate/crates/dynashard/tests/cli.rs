//! End-to-end checks of the `dynashard` binary: output files, exit codes,
//! the output-directory variable and trace round trips.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "small"
seeds = [1, 2]
compare_baseline = true
[shards]
count = 4
validators = 4
[workload]
rate = 200.0
max_txs = 100
cross_ratio = 0.5
accounts = 64
zipf = 0.0
[mgmt]
trigger = "disabled"
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dynashard"));
    c.env_remove("DYNASHARD_OUT");
    c
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_csv_summary_and_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("out");
    let o = bin()
        .arg("run")
        .arg(&sc)
        .arg("--out")
        .arg(&out)
        .arg("--traces")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = out.join("small");
    let runs = fs::read_to_string(dir.join("runs.csv")).unwrap();
    // Header plus two seeds in each mode.
    assert_eq!(runs.lines().count(), 5);
    assert!(runs.starts_with("scenario,variant,mode,seed,"));
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let table = fs::read_to_string(dir.join("summary.txt")).unwrap();
    assert!(table.contains("dynashard") && table.contains("baseline"));
    assert!(stdout(&o).contains("tps gain"));
    let traces: Vec<_> = fs::read_dir(dir.join("traces")).unwrap().collect();
    assert_eq!(traces.len(), 4);
}

#[test]
fn metrics_recomputes_the_recorded_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("out");
    let o = bin()
        .args(["run", "--seed", "5", "--mode", "dynashard", "--traces", "--out"])
        .arg(&out)
        .arg(&sc)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = fs::read_to_string(out.join("small/runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 2, "one seed, one mode");
    let digest = runs.lines().nth(1).unwrap().rsplit(',').next().unwrap().to_string();
    let trace = fs::read_dir(out.join("small/traces"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let m = bin().arg("metrics").arg(&trace).output().unwrap();
    assert!(m.status.success(), "{}", String::from_utf8_lossy(&m.stderr));
    let text = stdout(&m);
    assert!(text.contains(&format!("digest          {digest}")), "{text}");
    assert!(text.contains("submitted       100"));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(tmp.path(), "small.toml", SMALL);
    let env_out = tmp.path().join("from-env");
    let o = bin()
        .env("DYNASHARD_OUT", &env_out)
        .args(["run", "--seed", "1", "--mode", "baseline"])
        .arg(&sc)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_out.join("small/runs.csv").exists());
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    // Configuration error.
    let bad = write(tmp.path(), "bad.toml", "[shards]\ncount = 4\nbogus = 1\n");
    let o = bin().arg("run").arg(&bad).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    // The horizon ends before the batch resolves.
    let cut_text = SMALL.replacen("seeds = [1, 2]", "seeds = [1, 2]\nhorizon_s = 0.2", 1);
    let cut = write(tmp.path(), "cut.toml", &cut_text);
    let o = bin().arg("run").arg(&cut).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    // Missing file.
    let o = bin().args(["metrics", "/nonexistent/trace.ndjson"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn approx_prints_the_factor_and_rejects_bad_input() {
    let o = bin()
        .args([
            "approx",
            "--topology",
            "general",
            "--method",
            "dynashard",
            "-k",
            "2",
            "-d",
            "3",
            "-s",
            "4",
            "-D",
            "8",
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).trim_end().ends_with(": 18"), "{}", stdout(&o));
    let o = bin()
        .args([
            "approx",
            "--topology",
            "ring",
            "--method",
            "dynashard",
            "-k",
            "2",
            "-d",
            "3",
            "-s",
            "4",
            "-D",
            "8",
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

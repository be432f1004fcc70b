#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_cardioquant");

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

/// Runs and asserts the exit status, echoing stderr on mismatch.
pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// Renders a synthetic video into `dir` with extra flags.
pub fn synth_video(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", p(dir)];
    args.extend_from_slice(extra);
    run_ok(&args);
    dir.join("manifest.json")
}

/// Column `name` of the single data row of a summary CSV.
pub fn summary_field(csv: &str, name: &str) -> f64 {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name}"));
    row[i].parse().unwrap()
}

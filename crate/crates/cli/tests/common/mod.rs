#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use epihybrid::synthetic::{generate, SyntheticSpec};

/// Writes a small synthetic case matrix and ring adjacency into `dir`.
pub fn write_synthetic(dir: &Path) -> (PathBuf, PathBuf) {
    let (ds, adj) = generate(&SyntheticSpec { regions: 4, length: 80, ..SyntheticSpec::default() });
    let matrix = |rows: Vec<Vec<f64>>| {
        rows.iter()
            .map(|r| r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    };
    let cases = dir.join("cases.txt");
    let adjacency = dir.join("adj.txt");
    std::fs::write(&cases, matrix(ds.cases().to_rows())).unwrap();
    std::fs::write(&adjacency, matrix(adj.matrix().to_rows())).unwrap();
    (cases, adjacency)
}

/// Flags that keep every run to a couple of seconds.
pub fn quick_flags(cases: &Path, adjacency: &Path) -> Vec<String> {
    let mut flags = data_flags(cases, adjacency);
    flags.extend(args(&["--max-epochs", "2", "--patience", "2"]));
    flags
}

/// Data and small-model flags without the epoch budget.
pub fn data_flags(cases: &Path, adjacency: &Path) -> Vec<String> {
    [
        "--dataset", "toy",
        "--cases-file", cases.to_str().unwrap(),
        "--adjacency-file", adjacency.to_str().unwrap(),
        "--window", "6",
        "--batch-size", "16",
        "--set", "hybrid.filters=2",
        "--set", "hybrid.hidden=4",
        "--set", "hybrid.risk_dim=4",
        "--set", "hybrid.attention_dim=4",
        "--set", "epignn.filters=2",
        "--set", "epignn.attention_dim=4",
        "--set", "colagnn.hidden=4",
        "--set", "colagnn.filters=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub fn epihybrid(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epihybrid"))
        .args(args)
        .env_remove("EPIHYB_SEED")
        .output()
        .expect("binary runs")
}

pub fn args(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

pub fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

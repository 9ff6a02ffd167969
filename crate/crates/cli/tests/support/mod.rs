#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use avio_cli::ExperimentConfig;

pub fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"))
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// A checked-in config cut to `duration` seconds, written into `dir`.
pub fn short_config(dir: &Path, name: &str, duration: f64) -> PathBuf {
    let mut config = ExperimentConfig::load(&repo_config(name)).unwrap();
    config.simulation.duration = duration;
    let path = dir.join(format!("{name}_{duration}.toml"));
    fs::write(&path, config.to_toml()).unwrap();
    path
}

pub fn avio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avio")).args(args).output().expect("spawn avio")
}

pub fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Every file of a directory, sorted by name.
pub fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

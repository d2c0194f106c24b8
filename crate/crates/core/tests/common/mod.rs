#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nap_steer::harness::ExperimentConfig;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// A checked-in config with its artifacts redirected to `out`.
pub fn config(name: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&repo_root().join("configs").join(name)).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg.validate().unwrap();
    cfg
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

//! Serialized pipeline outputs: proxy evaluations, α selections, the final
//! report, the transfer matrix and the size study.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::metrics::Polarity;
use crate::perturb::{mean, sample_std};

/// A statistic over seeds. `std` is the sample standard deviation and is
/// absent with a single seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStat {
    pub mean: f64,
    pub std: Option<f64>,
    pub per_seed: Vec<f64>,
}

impl SeedStat {
    pub fn of(values: Vec<f64>) -> Self {
        SeedStat {
            mean: mean(&values),
            std: (values.len() >= 2).then(|| sample_std(&values)),
            per_seed: values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NapEval {
    pub task: String,
    pub seed: u64,
    pub split: String,
    pub r: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub task: String,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub mean_score: f64,
    pub std_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    pub beam: usize,
    pub baseline: SeedStat,
    pub perturbed: SeedStat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub n_valid: usize,
    pub n_test: usize,
    pub nap_valid_r: SeedStat,
    pub nap_test_r: SeedStat,
    pub selected_alpha: f64,
    /// Test score at α = 0 with the first beam.
    pub baseline: SeedStat,
    /// Test score at the selected α with the first beam.
    pub perturbed: SeedStat,
    pub gain: f64,
    pub valid_curve: Vec<CurvePoint>,
    pub test_curve: Vec<CurvePoint>,
    pub beams: Vec<BeamResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub task: String,
    pub split: String,
    pub beam: usize,
    pub alpha: f64,
    /// Mean wall time per sample over seeds: encoding, proxy pass and decoding.
    pub mean_runtime_ms: f64,
}

/// Run report. Everything outside `timing` is a deterministic function of
/// the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scorer: String,
    pub polarity: Polarity,
    pub seeds: Vec<u64>,
    pub alphas: Vec<f64>,
    pub beams: Vec<usize>,
    pub tasks: Vec<TaskReport>,
    pub timing: Vec<TimingRow>,
}

impl Report {
    /// The report as JSON with the `timing` key removed.
    pub fn without_timing(value: &serde_json::Value) -> serde_json::Value {
        let mut v = value.clone();
        if let Some(o) = v.as_object_mut() {
            o.remove("timing");
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub train: String,
    pub eval: String,
    pub r: SeedStat,
}

pub const TRANSFER_HEADER: &str = "train,eval,mean_r,std_r";

/// Matrix CSV; `std_r` is empty with a single seed.
pub fn transfer_csv(cells: &[TransferCell]) -> String {
    let mut s = format!("{TRANSFER_HEADER}\n");
    for c in cells {
        let std = c.r.std.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(s, "{},{},{:.6},{}", c.train, c.eval, c.r.mean, std).expect("writing to a string");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub size: String,
    pub params: usize,
    pub alpha: f64,
    pub n_test: usize,
    /// SHA-256 of the test sample ids, identical across sizes.
    pub test_ids_sha256: String,
    pub nap_test_r: SeedStat,
    pub baseline: SeedStat,
    pub perturbed: SeedStat,
    /// `perturbed.mean - baseline.mean`.
    pub gain: f64,
    pub baseline_ms: f64,
    pub perturbed_ms: f64,
    /// Mean proxy forward plus backward time per sample.
    pub proxy_ms: f64,
}

pub const SIZE_HEADER: &str = "size,params,alpha,baseline,perturbed,gain,baseline_ms,perturbed_ms,proxy_ms";

pub fn size_csv(rows: &[SizeRow]) -> String {
    let mut s = format!("{SIZE_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            r.size,
            r.params,
            r.alpha,
            r.baseline.mean,
            r.perturbed.mean,
            r.gain,
            r.baseline_ms,
            r.perturbed_ms,
            r.proxy_ms
        )
        .expect("writing to a string");
    }
    s
}

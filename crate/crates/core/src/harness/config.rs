//! Declarative experiment configuration (TOML).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::metrics::{scorer_by_name, Polarity, Scorer};
use crate::nap::NapOpts;
use crate::seq2seq::{ModelConfig, TrainOpts};
use crate::tasks::TaskSpec;

pub const DEFAULT_ALPHAS: [f64; 8] = [0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0];

fn default_scorer() -> String {
    "seq_score".into()
}

fn default_alphas() -> Vec<f64> {
    DEFAULT_ALPHAS.to_vec()
}

fn default_beams() -> Vec<usize> {
    vec![1]
}

fn default_epsilon() -> f64 {
    1e-12
}

fn default_size_alpha() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every artifact the pipeline writes.
    pub out_dir: PathBuf,
    /// Frozen model checkpoint; defaults to `<out_dir>/model.ckpt`.
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    /// One proxy is trained and swept per seed.
    pub seeds: Vec<u64>,
    #[serde(default = "default_scorer")]
    pub scorer: String,
    /// Must agree with the scorer when given.
    #[serde(default)]
    pub polarity: Option<Polarity>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// The first beam drives the α sweeps; every beam is evaluated on the
    /// test split at α = 0 and at the selected α.
    #[serde(default = "default_beams")]
    pub beams: Vec<usize>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Output length cap; defaults to the model's `max_len`.
    #[serde(default)]
    pub decode_max_len: Option<usize>,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainOpts,
    #[serde(default)]
    pub nap: NapOpts,
    pub tasks: Vec<TaskConfig>,
    #[serde(default)]
    pub size_study: Option<SizeStudyConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    pub spec: TaskSpec,
    /// Rows per split: train, valid, test.
    pub splits: [usize; 3],
    pub data_seed: u64,
    /// Data the frozen model is trained on; the task's own train split
    /// when absent.
    #[serde(default)]
    pub corpus: Option<CorpusConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub spec: TaskSpec,
    pub size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeStudyConfig {
    #[serde(default = "default_size_alpha")]
    pub alpha: f64,
    /// Task to evaluate on; the first task when absent.
    #[serde(default)]
    pub task: Option<String>,
    pub sizes: Vec<SizeConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeConfig {
    pub name: String,
    pub model: ModelConfig,
    /// Defaults to the experiment's training options.
    #[serde(default)]
    pub train: Option<TrainOpts>,
    /// Defaults to `<out_dir>/sizes/<name>.ckpt`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn bad<T>(msg: impl Into<String>) -> Result<T, HarnessError> {
    Err(HarnessError::Config(msg.into()))
}

fn safe_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// `path` exists with the right type, or its nearest existing ancestor is
/// a directory it could be created in.
fn check_writable(path: &Path, what: &str, is_dir: bool) -> Result<(), HarnessError> {
    if path.exists() {
        return if path.is_dir() == is_dir {
            Ok(())
        } else {
            bad(format!("{what} {} has the wrong file type", path.display()))
        };
    }
    let mut p = path.parent();
    while let Some(q) = p {
        if q.exists() {
            return if q.is_dir() {
                Ok(())
            } else {
                bad(format!("{what} {}: {} is not a directory", path.display(), q.display()))
            };
        }
        p = q.parent();
    }
    Ok(())
}

fn check_spec(spec: &TaskSpec, model: &ModelConfig, what: &str) -> Result<(), HarnessError> {
    spec.validate()
        .map_err(|e| HarnessError::Config(format!("{what}: {e}")))?;
    if spec.vocab_size > model.vocab_size {
        return bad(format!(
            "{what}: vocab_size {} exceeds the model's {}",
            spec.vocab_size, model.vocab_size
        ));
    }
    if spec.required_model_len() > model.max_len {
        return bad(format!(
            "{what}: needs model max_len >= {}, model has {}",
            spec.required_model_len(),
            model.max_len
        ));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads and validates a config file. Relative paths inside it are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes every relative path absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let Some(p) = self.model_path.as_mut() {
            fix(p);
        }
        if let Some(s) = self.size_study.as_mut() {
            for size in &mut s.sizes {
                if let Some(p) = size.checkpoint.as_mut() {
                    fix(p);
                }
            }
        }
    }

    /// Replaces the seed list with the single seed `n`.
    pub fn with_seed_override(mut self, n: u64) -> Self {
        self.seeds = vec![n];
        self
    }

    pub fn scorer_impl(&self) -> Result<Box<dyn Scorer>, HarnessError> {
        scorer_by_name(&self.scorer).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn polarity(&self) -> Result<Polarity, HarnessError> {
        Ok(self.scorer_impl()?.polarity())
    }

    pub fn model_path(&self) -> PathBuf {
        self.model_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn decode_max_len(&self) -> usize {
        self.decode_max_len.unwrap_or(self.model.max_len)
    }

    pub fn task(&self, name: &str) -> Result<&TaskConfig, HarnessError> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| HarnessError::Config(format!("unknown task {name:?}")))
    }

    pub fn size_checkpoint(&self, size: &SizeConfig) -> PathBuf {
        size.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("sizes").join(format!("{}.ckpt", size.name)))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        let scorer = self.scorer_impl()?;
        if let Some(p) = self.polarity {
            if p != scorer.polarity() {
                return bad(format!("polarity {p:?} contradicts scorer {}", self.scorer));
            }
        }
        if !self.alphas.contains(&0.0) {
            return bad("alpha grid must contain 0");
        }
        if self.alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return bad("alphas must be finite and non-negative");
        }
        let mut sorted = self.alphas.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() != self.alphas.len() {
            return bad("alphas must be distinct");
        }
        if self.beams.is_empty() || self.beams.contains(&0) {
            return bad("beams must be a non-empty list of widths >= 1");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.decode_max_len() == 0 || self.decode_max_len() > self.model.max_len {
            return bad(format!("decode_max_len must be in [1, {}]", self.model.max_len));
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required");
        }
        let mut names = HashSet::new();
        for t in &self.tasks {
            if !safe_name(&t.name) {
                return bad(format!("task name {:?} must be non-empty [A-Za-z0-9_-]", t.name));
            }
            if !names.insert(t.name.as_str()) {
                return bad(format!("duplicate task name {:?}", t.name));
            }
            check_spec(&t.spec, &self.model, &format!("task {}", t.name))?;
            if t.splits.iter().any(|&n| n < 2) {
                return bad(format!("task {}: every split needs at least two rows", t.name));
            }
            if let Some(c) = &t.corpus {
                check_spec(&c.spec, &self.model, &format!("task {} corpus", t.name))?;
                if c.size == 0 {
                    return bad(format!("task {}: corpus size must be positive", t.name));
                }
            }
        }
        check_writable(&self.out_dir, "out_dir", true)?;
        check_writable(&self.model_path(), "model_path", false)?;
        if let Some(s) = &self.size_study {
            self.validate_size_study(s)?;
        }
        Ok(())
    }

    fn validate_size_study(&self, s: &SizeStudyConfig) -> Result<(), HarnessError> {
        if !(s.alpha.is_finite() && s.alpha > 0.0) {
            return bad("size_study.alpha must be positive");
        }
        let task = match &s.task {
            Some(name) => self.task(name)?,
            None => &self.tasks[0],
        };
        if s.sizes.is_empty() {
            return bad("size_study.sizes must not be empty");
        }
        let mut seen: Vec<(&str, PathBuf)> = Vec::new();
        for size in &s.sizes {
            if !safe_name(&size.name) {
                return bad(format!("size name {:?} must be non-empty [A-Za-z0-9_-]", size.name));
            }
            if seen.iter().any(|(n, _)| *n == size.name) {
                return bad(format!("duplicate size name {:?}", size.name));
            }
            size.model
                .validate()
                .map_err(|e| HarnessError::Config(format!("size {}: {e}", size.name)))?;
            check_spec(&task.spec, &size.model, &format!("size {}", size.name))?;
            if let Some(c) = &task.corpus {
                check_spec(&c.spec, &size.model, &format!("size {} corpus", size.name))?;
            }
            if self.decode_max_len() > size.model.max_len {
                return bad(format!("size {}: max_len below decode_max_len", size.name));
            }
            let path = self.size_checkpoint(size);
            if let Some((other, _)) = seen.iter().find(|(_, p)| *p == path) {
                return Err(HarnessError::SharedCheckpoint {
                    a: other.to_string(),
                    b: size.name.clone(),
                    path,
                });
            }
            check_writable(&path, "checkpoint", false)?;
            seen.push((&size.name, path));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
out_dir = "out"
seeds = [1, 2]

[model]
vocab_size = 17
d_model = 8
d_ffn = 16
n_heads = 2
n_layers_enc = 1
n_layers_dec = 1
max_len = 9
seed = 0

[[tasks]]
name = "copy"
splits = [10, 4, 4]
data_seed = 1
spec = { kind = "noisy_copy", vocab_size = 17, min_len = 2, max_len = 6, noise_rate = 0.5, seed = 1 }
"#;

    fn parse(extra_top: &str) -> Result<ExperimentConfig, HarnessError> {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::from_toml_str(&format!("{extra_top}\n{BASE}"))?;
        cfg.resolve_paths(dir.path());
        cfg.validate().map(|_| cfg)
    }

    fn rejects(extra_top: &str, needle: &str) {
        match parse(extra_top) {
            Err(HarnessError::Config(m)) => assert!(m.contains(needle), "{m}"),
            other => panic!("{extra_top}: {other:?}"),
        }
    }

    #[test]
    fn defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.alphas, DEFAULT_ALPHAS);
        assert_eq!(cfg.beams, vec![1]);
        assert_eq!(cfg.scorer, "seq_score");
        assert_eq!(cfg.polarity().unwrap(), Polarity::HigherIsBetter);
        assert_eq!(cfg.decode_max_len(), 9);
        assert_eq!(cfg.with_seed_override(5).seeds, vec![5]);
    }

    #[test]
    fn invalid_values_are_named() {
        rejects("alphas = [0.5, 1.0]", "contain 0");
        rejects("alphas = [0.0, -1.0]", "non-negative");
        rejects("alphas = [0.0, 1.0, 1.0]", "distinct");
        rejects("beams = [0]", "beams");
        rejects("beams = []", "beams");
        rejects("epsilon = 0.0", "epsilon");
        rejects("scorer = \"bleu\"", "bleu");
        rejects(
            "scorer = \"error_rate\"\npolarity = \"higher_is_better\"",
            "contradicts",
        );
        rejects("decode_max_len = 10", "decode_max_len");
        rejects("bogus = 1", "bogus");
        let mut cfg = parse("").unwrap();
        cfg.seeds = vec![3, 3];
        assert!(cfg.validate().is_err());
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn task_checks() {
        let mut cfg = parse("").unwrap();
        cfg.tasks[0].name = "a/b".into();
        assert!(cfg.validate().is_err());
        let mut cfg = parse("").unwrap();
        cfg.tasks.push(cfg.tasks[0].clone());
        assert!(cfg.validate().is_err());
        let mut cfg = parse("").unwrap();
        cfg.tasks[0].spec.tag = Some(0);
        cfg.tasks[0].spec.max_len = 7;
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(m)) if m.contains("max_len")));
        let mut cfg = parse("").unwrap();
        cfg.tasks[0].spec.vocab_size = 21;
        assert!(cfg.validate().is_err());
        let mut cfg = parse("").unwrap();
        cfg.tasks[0].splits = [10, 1, 4];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn out_dir_must_be_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, b"x").unwrap();
        let mut cfg = parse("").unwrap();
        cfg.out_dir = file.clone();
        assert!(cfg.validate().is_err());
        cfg.out_dir = file.join("below");
        assert!(cfg.validate().is_err());
        cfg.out_dir = dir.path().join("new/deeper");
        assert!(cfg.validate().is_ok());
    }
}

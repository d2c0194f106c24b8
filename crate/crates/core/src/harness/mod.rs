//! Experiment pipeline: data, frozen model, scored decodings, proxies, α
//! sweeps and reports.
//!
//! Each stage writes its artifacts under `out_dir` plus a record
//! `stages/<stage>.json` holding a hash of everything the stage depends on
//! (its config slice and the hashes of upstream stages). A stage whose
//! record matches and whose artifacts exist is skipped; a record with a
//! different hash is refused unless the harness is forced.

mod config;
mod report;

use std::cell::RefCell;
use std::collections::HashMap;
use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::*;
pub use report::*;

use crate::checkpoint::sha256_hex;
use crate::error::HarnessError;
use crate::metrics::Token;
use crate::nap::{encode_scored, evaluate_nap, train_nap, Nap, NapOpts, ScoredSample};
use crate::perturb::{alpha_sweep, mean, select_alpha, SweepResult, SweepSpec};
use crate::seq2seq::{train_seq2seq, ModelConfig, Seq2Seq, TrainOpts};
use crate::tasks::{
    check_score_variance, decode_and_score, gen_dataset, gen_rows, read_jsonl, write_jsonl, Sample, Split,
};

type BoxError = Box<dyn Error + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Reused,
}

#[derive(Serialize, Deserialize)]
struct StageRecord {
    stage: String,
    hash: String,
    outputs: Vec<PathBuf>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BoxError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, BoxError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn hash_of(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())
}

pub struct Harness {
    cfg: ExperimentConfig,
    force: bool,
    hashes: RefCell<HashMap<String, String>>,
    log: RefCell<Vec<(String, Outcome)>>,
}

impl Harness {
    /// Validates `cfg`. With `force`, every stage that is asked for runs
    /// again even when its artifacts are current.
    pub fn new(cfg: ExperimentConfig, force: bool) -> Result<Self, HarnessError> {
        cfg.validate()?;
        Ok(Harness {
            cfg,
            force,
            hashes: RefCell::new(HashMap::new()),
            log: RefCell::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Stages touched so far, in order, with whether they ran.
    pub fn stage_log(&self) -> Vec<(String, Outcome)> {
        self.log.borrow().clone()
    }

    fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.cfg.out_dir.join(rel)
    }

    pub fn data_path(&self, task: &str, split: Split) -> PathBuf {
        self.out(format!("data/{task}/{}.jsonl", split.name()))
    }

    pub fn corpus_path(&self, task: &str) -> PathBuf {
        self.out(format!("data/{task}/corpus.jsonl"))
    }

    pub fn scores_path(&self, task: &str, split: Split) -> PathBuf {
        self.out(format!("scores/{task}/{}.jsonl", split.name()))
    }

    pub fn nap_path(&self, task: &str, seed: u64) -> PathBuf {
        self.out(format!("naps/{task}/seed-{seed}.nap"))
    }

    fn nap_report_path(&self, task: &str, seed: u64) -> PathBuf {
        self.out(format!("naps/{task}/seed-{seed}.json"))
    }

    pub fn eval_path(&self) -> PathBuf {
        self.out("eval_nap.json")
    }

    /// Full-precision sweep; a CSV copy sits next to it.
    pub fn sweep_path(&self, task: &str, split: Split) -> PathBuf {
        self.out(format!("sweeps/{task}/{}.json", split.name()))
    }

    pub fn selection_path(&self) -> PathBuf {
        self.out("selection.json")
    }

    pub fn report_path(&self) -> PathBuf {
        self.out("report.json")
    }

    pub fn transfer_path(&self) -> PathBuf {
        self.out("transfer_matrix.csv")
    }

    pub fn size_study_path(&self) -> PathBuf {
        self.out("size_study.json")
    }

    /// Runs `build` unless the stage record matches `key` and every output
    /// exists. Returns the stage hash.
    fn stage(
        &self,
        name: &str,
        key: serde_json::Value,
        outputs: Vec<PathBuf>,
        build: impl FnOnce() -> Result<(), BoxError>,
    ) -> Result<String, HarnessError> {
        if let Some(h) = self.hashes.borrow().get(name) {
            return Ok(h.clone());
        }
        let hash = hash_of(&json!({ "stage": name, "key": key }));
        let record_path = self.out(format!("stages/{name}.json"));
        let first = outputs.first().cloned().unwrap_or_else(|| record_path.clone());
        if !self.force && record_path.exists() {
            let rec: Option<StageRecord> = read_json(&record_path).ok();
            match rec {
                Some(r) if r.hash == hash => {
                    if outputs.iter().all(|p| p.exists()) {
                        log::info!("{name}: up to date");
                        self.log.borrow_mut().push((name.to_string(), Outcome::Reused));
                        self.hashes.borrow_mut().insert(name.to_string(), hash.clone());
                        return Ok(hash);
                    }
                }
                _ => {
                    return Err(HarnessError::Stale {
                        stage: name.to_string(),
                        path: first,
                    })
                }
            }
        }
        log::info!("{name}: running");
        let fail = |source: BoxError| HarnessError::Stage {
            stage: name.to_string(),
            path: first.clone(),
            source,
        };
        let _ = fs::remove_file(&record_path);
        build().map_err(fail)?;
        let rec = StageRecord {
            stage: name.to_string(),
            hash: hash.clone(),
            outputs,
        };
        write_json(&record_path, &rec).map_err(fail)?;
        self.log.borrow_mut().push((name.to_string(), Outcome::Ran));
        self.hashes.borrow_mut().insert(name.to_string(), hash.clone());
        Ok(hash)
    }

    fn load_model(&self, path: &Path) -> Result<Seq2Seq, BoxError> {
        Ok(Seq2Seq::load(path)?)
    }

    fn load_nap(&self, task: &str, seed: u64) -> Result<Nap, HarnessError> {
        let path = self.nap_path(task, seed);
        if !path.exists() {
            return Err(HarnessError::MissingNap {
                task: task.to_string(),
                seed,
                path,
            });
        }
        Nap::load(&path).map_err(|e| HarnessError::Stage {
            stage: "train-nap".into(),
            path,
            source: Box::new(e),
        })
    }

    fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, BoxError> {
        Ok(read_jsonl(path)?)
    }

    pub fn gen_data(&self) -> Result<String, HarnessError> {
        let mut outputs = Vec::new();
        for t in &self.cfg.tasks {
            outputs.extend(Split::ALL.iter().map(|&s| self.data_path(&t.name, s)));
            if t.corpus.is_some() {
                outputs.push(self.corpus_path(&t.name));
            }
        }
        self.stage("gen-data", json!({ "tasks": self.cfg.tasks }), outputs, || {
            for t in &self.cfg.tasks {
                let [a, b, c] = t.splits;
                let ds = gen_dataset(&t.spec, (a, b, c), t.data_seed)?;
                for s in Split::ALL {
                    write_jsonl(&self.data_path(&t.name, s), ds.split(s))?;
                }
                if let Some(c) = &t.corpus {
                    write_jsonl(&self.corpus_path(&t.name), &gen_rows(&c.spec, c.size, c.seed)?)?;
                }
            }
            Ok(())
        })
    }

    /// Pairs the frozen model is trained on: each task's corpus, or its
    /// train split when it has none.
    fn training_pairs(&self) -> Result<Vec<(Vec<Token>, Vec<Token>)>, BoxError> {
        let mut pairs = Vec::new();
        for t in &self.cfg.tasks {
            let path = if t.corpus.is_some() {
                self.corpus_path(&t.name)
            } else {
                self.data_path(&t.name, Split::Train)
            };
            let rows: Vec<Sample> = Self::read_rows(&path)?;
            pairs.extend(rows.into_iter().map(|r| (r.src, r.reference)));
        }
        Ok(pairs)
    }

    fn train_and_save(&self, config: &ModelConfig, opts: &TrainOpts, path: &Path) -> Result<(), BoxError> {
        let pairs = self.training_pairs()?;
        let (model, report) = train_seq2seq(&pairs, config.clone(), opts)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        model.save(path)?;
        write_json(&path.with_extension("train.json"), &report)?;
        Ok(())
    }

    pub fn train_model(&self) -> Result<String, HarnessError> {
        let up = self.gen_data()?;
        let path = self.cfg.model_path();
        let key = json!({ "up": up, "model": self.cfg.model, "train": self.cfg.train });
        self.stage("train-model", key, vec![path.clone()], || {
            self.train_and_save(&self.cfg.model, &self.cfg.train, &path)
        })
    }

    fn score_splits(&self, model: &Seq2Seq, task: &str, dest: impl Fn(Split) -> PathBuf) -> Result<(), BoxError> {
        let scorer = self.cfg.scorer_impl()?;
        let mut scored = Vec::new();
        for s in Split::ALL {
            let rows: Vec<Sample> = Self::read_rows(&self.data_path(task, s))?;
            scored.push(decode_and_score(
                model,
                &rows,
                scorer.as_ref(),
                self.cfg.decode_max_len(),
            ));
        }
        check_score_variance(&scored[0])?;
        for (s, rows) in Split::ALL.into_iter().zip(&scored) {
            write_jsonl(&dest(s), rows)?;
        }
        Ok(())
    }

    pub fn decode_score(&self) -> Result<String, HarnessError> {
        let up = self.train_model()?;
        let outputs = self
            .cfg
            .tasks
            .iter()
            .flat_map(|t| Split::ALL.map(|s| self.scores_path(&t.name, s)))
            .collect();
        let key = json!({ "up": up, "scorer": self.cfg.scorer, "max_len": self.cfg.decode_max_len() });
        self.stage("decode-score", key, outputs, || {
            let model = self.load_model(&self.cfg.model_path())?;
            for t in &self.cfg.tasks {
                self.score_splits(&model, &t.name, |s| self.scores_path(&t.name, s))?;
            }
            Ok(())
        })
    }

    fn nap_opts(&self, seed: u64) -> NapOpts {
        NapOpts {
            seed,
            ..self.cfg.nap.clone()
        }
    }

    pub fn train_nap(&self) -> Result<String, HarnessError> {
        let up = self.decode_score()?;
        let mut outputs = Vec::new();
        for t in &self.cfg.tasks {
            for &seed in &self.cfg.seeds {
                outputs.push(self.nap_path(&t.name, seed));
            }
        }
        let key = json!({ "up": up, "nap": self.cfg.nap, "seeds": self.cfg.seeds });
        self.stage("train-nap", key, outputs, || {
            let model = self.load_model(&self.cfg.model_path())?;
            for t in &self.cfg.tasks {
                let train: Vec<ScoredSample> = Self::read_rows(&self.scores_path(&t.name, Split::Train))?;
                let valid: Vec<ScoredSample> = Self::read_rows(&self.scores_path(&t.name, Split::Valid))?;
                for &seed in &self.cfg.seeds {
                    let (nap, report) = train_nap(&model, &train, &valid, &self.nap_opts(seed))?;
                    nap.save(&self.nap_path(&t.name, seed))?;
                    write_json(&self.nap_report_path(&t.name, seed), &report)?;
                }
            }
            Ok(())
        })
    }

    /// Pearson r of every proxy on every split of its own task.
    pub fn eval_nap(&self) -> Result<String, HarnessError> {
        let up = self.train_nap()?;
        self.stage("eval-nap", json!({ "up": up }), vec![self.eval_path()], || {
            let model = self.load_model(&self.cfg.model_path())?;
            let mut evals = Vec::new();
            for t in &self.cfg.tasks {
                let naps: Vec<Nap> = self
                    .cfg
                    .seeds
                    .iter()
                    .map(|&s| self.load_nap(&t.name, s))
                    .collect::<Result<_, _>>()?;
                for split in Split::ALL {
                    let rows: Vec<ScoredSample> = Self::read_rows(&self.scores_path(&t.name, split))?;
                    let (encs, targets) = encode_scored(&model, &rows)?;
                    for (&seed, nap) in self.cfg.seeds.iter().zip(&naps) {
                        evals.push(NapEval {
                            task: t.name.clone(),
                            seed,
                            split: split.name().into(),
                            r: evaluate_nap(nap, &encs, &targets)?,
                            n: encs.len(),
                        });
                    }
                }
            }
            write_json(&self.eval_path(), &evals)
        })
    }

    fn sweep(
        &self,
        model: &Seq2Seq,
        task: &str,
        split: Split,
        alphas: &[f64],
        beam: usize,
    ) -> Result<SweepResult, BoxError> {
        let naps: Vec<Nap> = self
            .cfg
            .seeds
            .iter()
            .map(|&s| self.load_nap(task, s))
            .collect::<Result<_, _>>()?;
        let pairs: Vec<(u64, &Nap)> = self.cfg.seeds.iter().copied().zip(&naps).collect();
        let rows: Vec<Sample> = Self::read_rows(&self.data_path(task, split))?;
        let spec = SweepSpec {
            task,
            split: split.name(),
            alphas,
            beam,
            max_len: self.cfg.decode_max_len(),
            epsilon: self.cfg.epsilon,
        };
        let scorer = self.cfg.scorer_impl()?;
        Ok(alpha_sweep(model, &pairs, &rows, &spec, scorer.as_ref())?)
    }

    fn save_sweep(&self, task: &str, split: Split, result: &SweepResult) -> Result<(), BoxError> {
        let path = self.sweep_path(task, split);
        write_json(&path, result)?;
        result.write_csv(&path.with_extension("csv"))?;
        Ok(())
    }

    fn sweep_outputs(&self, split: Split) -> Vec<PathBuf> {
        self.cfg.tasks.iter().map(|t| self.sweep_path(&t.name, split)).collect()
    }

    pub fn sweep_valid(&self) -> Result<String, HarnessError> {
        let up = self.train_nap()?;
        let beam = self.cfg.beams[0];
        let key = json!({ "up": up, "alphas": self.cfg.alphas, "beam": beam, "epsilon": self.cfg.epsilon });
        self.stage("sweep-valid", key, self.sweep_outputs(Split::Valid), || {
            let model = self.load_model(&self.cfg.model_path())?;
            for t in &self.cfg.tasks {
                let r = self.sweep(&model, &t.name, Split::Valid, &self.cfg.alphas, beam)?;
                self.save_sweep(&t.name, Split::Valid, &r)?;
            }
            Ok(())
        })
    }

    pub fn select_alpha(&self) -> Result<String, HarnessError> {
        let up = self.sweep_valid()?;
        let polarity = self.cfg.polarity()?;
        let key = json!({ "up": up, "polarity": polarity });
        self.stage("select-alpha", key, vec![self.selection_path()], || {
            let mut out = Vec::new();
            for t in &self.cfg.tasks {
                let r: SweepResult = read_json(&self.sweep_path(&t.name, Split::Valid))?;
                out.push(Selection {
                    task: t.name.clone(),
                    alpha: select_alpha(&r.aggregate(), polarity)?,
                });
            }
            write_json(&self.selection_path(), &out)
        })
    }

    pub fn selections(&self) -> Result<Vec<Selection>, HarnessError> {
        self.select_alpha()?;
        read_json(&self.selection_path()).map_err(|source| HarnessError::Stage {
            stage: "select-alpha".into(),
            path: self.selection_path(),
            source,
        })
    }

    /// The full α grid with the first beam, then α = 0 and the selected α
    /// for each further beam.
    pub fn sweep_test(&self) -> Result<String, HarnessError> {
        let up = self.select_alpha()?;
        let key = json!({ "up": up, "alphas": self.cfg.alphas, "beams": self.cfg.beams, "epsilon": self.cfg.epsilon });
        self.stage("sweep-test", key, self.sweep_outputs(Split::Test), || {
            let model = self.load_model(&self.cfg.model_path())?;
            let sel: Vec<Selection> = read_json(&self.selection_path())?;
            for t in &self.cfg.tasks {
                let alpha = sel.iter().find(|s| s.task == t.name).map_or(0.0, |s| s.alpha);
                let mut all = self.sweep(&model, &t.name, Split::Test, &self.cfg.alphas, self.cfg.beams[0])?;
                let pair: Vec<f64> = if alpha == 0.0 { vec![0.0] } else { vec![0.0, alpha] };
                for &beam in &self.cfg.beams[1..] {
                    all.rows
                        .extend(self.sweep(&model, &t.name, Split::Test, &pair, beam)?.rows);
                }
                all.selected_alpha = Some(alpha);
                self.save_sweep(&t.name, Split::Test, &all)?;
            }
            Ok(())
        })
    }

    pub fn report(&self) -> Result<String, HarnessError> {
        let st = self.sweep_test()?;
        let ev = self.eval_nap()?;
        self.stage("report", json!({ "up": [st, ev] }), vec![self.report_path()], || {
            let report = self.build_report()?;
            write_json(&self.report_path(), &report)
        })
    }

    fn build_report(&self) -> Result<Report, BoxError> {
        let evals: Vec<NapEval> = read_json(&self.eval_path())?;
        let sel: Vec<Selection> = read_json(&self.selection_path())?;
        let mut tasks = Vec::new();
        let mut timing = Vec::new();
        let beam0 = self.cfg.beams[0];
        for t in &self.cfg.tasks {
            let valid: SweepResult = read_json(&self.sweep_path(&t.name, Split::Valid))?;
            let test: SweepResult = read_json(&self.sweep_path(&t.name, Split::Test))?;
            let alpha = sel
                .iter()
                .find(|s| s.task == t.name)
                .ok_or_else(|| format!("no selected alpha for task {}", t.name))?
                .alpha;
            let r_of = |split: &str| {
                SeedStat::of(
                    self.cfg
                        .seeds
                        .iter()
                        .map(|&seed| {
                            evals
                                .iter()
                                .find(|e| e.task == t.name && e.seed == seed && e.split == split)
                                .map_or(f64::NAN, |e| e.r)
                        })
                        .collect(),
                )
            };
            let scores = |r: &SweepResult, beam: usize, a: f64| {
                SeedStat::of(
                    self.cfg
                        .seeds
                        .iter()
                        .map(|&seed| {
                            r.rows
                                .iter()
                                .find(|x| x.beam == beam && x.alpha == a && x.seed == seed)
                                .map_or(f64::NAN, |x| x.mean_score)
                        })
                        .collect(),
                )
            };
            let curve = |r: &SweepResult| -> Vec<CurvePoint> {
                let first = SweepResult {
                    rows: r.rows.iter().filter(|x| x.beam == beam0).cloned().collect(),
                    selected_alpha: None,
                };
                first
                    .aggregate()
                    .into_iter()
                    .map(|a| CurvePoint {
                        alpha: a.alpha,
                        mean_score: a.mean_score,
                        std_score: a.std_score,
                    })
                    .collect()
            };
            let baseline = scores(&test, beam0, 0.0);
            let perturbed = scores(&test, beam0, alpha);
            let beams = self
                .cfg
                .beams
                .iter()
                .map(|&b| BeamResult {
                    beam: b,
                    baseline: scores(&test, b, 0.0),
                    perturbed: scores(&test, b, alpha),
                })
                .collect();
            for (split, r) in [("valid", &valid), ("test", &test)] {
                let mut keys: Vec<(usize, f64)> = r.rows.iter().map(|x| (x.beam, x.alpha)).collect();
                keys.dedup();
                keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
                keys.dedup();
                for (beam, a) in keys {
                    let ms: Vec<f64> = r
                        .rows
                        .iter()
                        .filter(|x| x.beam == beam && x.alpha == a)
                        .map(|x| x.mean_runtime_ms)
                        .collect();
                    timing.push(TimingRow {
                        task: t.name.clone(),
                        split: split.into(),
                        beam,
                        alpha: a,
                        mean_runtime_ms: mean(&ms),
                    });
                }
            }
            tasks.push(TaskReport {
                task: t.name.clone(),
                n_valid: t.splits[1],
                n_test: t.splits[2],
                nap_valid_r: r_of("valid"),
                nap_test_r: r_of("test"),
                selected_alpha: alpha,
                gain: perturbed.mean - baseline.mean,
                baseline,
                perturbed,
                valid_curve: curve(&valid),
                test_curve: curve(&test),
                beams,
            });
        }
        Ok(Report {
            scorer: self.cfg.scorer.clone(),
            polarity: self.cfg.polarity()?,
            seeds: self.cfg.seeds.clone(),
            alphas: self.cfg.alphas.clone(),
            beams: self.cfg.beams.clone(),
            tasks,
            timing,
        })
    }

    /// Every stage through the report; returns the report.
    pub fn run_all(&self) -> Result<Report, HarnessError> {
        self.report()?;
        read_json(&self.report_path()).map_err(|source| HarnessError::Stage {
            stage: "report".into(),
            path: self.report_path(),
            source,
        })
    }

    /// Pearson r of every task's proxies on every task's test split, using
    /// existing artifacts only. Writes the matrix CSV.
    pub fn transfer_matrix(&self) -> Result<Vec<TransferCell>, HarnessError> {
        let model_path = self.cfg.model_path();
        if !model_path.exists() {
            return Err(HarnessError::MissingArtifact {
                stage: "train-model".into(),
                path: model_path,
            });
        }
        let fail = |path: PathBuf| {
            move |source: BoxError| HarnessError::Stage {
                stage: "transfer-matrix".into(),
                path,
                source,
            }
        };
        let model = self.load_model(&model_path).map_err(fail(model_path.clone()))?;
        let model_hash = sha256_hex(&model.to_bytes());
        let mut naps = Vec::new();
        for t in &self.cfg.tasks {
            let mut per_seed = Vec::new();
            for &seed in &self.cfg.seeds {
                let nap = self.load_nap(&t.name, seed)?;
                if nap.encoder_hash() != Some(model_hash.as_str()) {
                    return Err(fail(self.nap_path(&t.name, seed))(
                        "proxy was trained against a different checkpoint".into(),
                    ));
                }
                per_seed.push(nap);
            }
            naps.push(per_seed);
        }
        let mut evals = Vec::new();
        for t in &self.cfg.tasks {
            let path = self.scores_path(&t.name, Split::Test);
            if !path.exists() {
                return Err(HarnessError::MissingArtifact {
                    stage: "decode-score".into(),
                    path,
                });
            }
            let rows: Vec<ScoredSample> = Self::read_rows(&path).map_err(fail(path.clone()))?;
            evals.push(encode_scored(&model, &rows).map_err(|e| fail(path.clone())(Box::new(e)))?);
        }
        let mut cells = Vec::new();
        for (a, ta) in self.cfg.tasks.iter().enumerate() {
            for (b, tb) in self.cfg.tasks.iter().enumerate() {
                let (encs, targets) = &evals[b];
                let rs = naps[a]
                    .iter()
                    .map(|n| evaluate_nap(n, encs, targets))
                    .collect::<Result<Vec<f64>, _>>()
                    .map_err(|e| fail(self.scores_path(&tb.name, Split::Test))(Box::new(e)))?;
                cells.push(TransferCell {
                    train: ta.name.clone(),
                    eval: tb.name.clone(),
                    r: SeedStat::of(rs),
                });
            }
        }
        let path = self.transfer_path();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| fail(path.clone())(Box::new(e)))?;
        }
        fs::write(&path, transfer_csv(&cells)).map_err(|e| fail(path.clone())(Box::new(e)))?;
        Ok(cells)
    }

    /// Baseline and perturbed test scores at one fixed α for every model
    /// size, all on the same task and test split.
    pub fn size_study(&self) -> Result<Vec<SizeRow>, HarnessError> {
        let study = self
            .cfg
            .size_study
            .as_ref()
            .ok_or_else(|| HarnessError::Config("config has no [size_study] section".into()))?;
        let task = match &study.task {
            Some(n) => self.cfg.task(n)?,
            None => &self.cfg.tasks[0],
        };
        let up = self.gen_data()?;
        let mut rows = Vec::new();
        for size in &study.sizes {
            let ckpt = self.cfg.size_checkpoint(size);
            let opts = size.train.clone().unwrap_or_else(|| self.cfg.train.clone());
            let name = format!("size-{}-model", size.name);
            let key = json!({ "up": up, "model": size.model, "train": opts });
            let mh = self.stage(&name, key, vec![ckpt.clone()], || {
                self.train_and_save(&size.model, &opts, &ckpt)
            })?;
            let result = self.out(format!("sizes/{}.json", size.name));
            let name = format!("size-{}-eval", size.name);
            let key = json!({
                "up": mh, "task": task.name, "alpha": study.alpha, "scorer": self.cfg.scorer,
                "max_len": self.cfg.decode_max_len(), "nap": self.cfg.nap, "seeds": self.cfg.seeds,
                "beam": self.cfg.beams[0], "epsilon": self.cfg.epsilon,
            });
            self.stage(&name, key, vec![result.clone()], || {
                let row = self.eval_size(&size.name, &ckpt, &task.name, study.alpha)?;
                write_json(&result, &row)
            })?;
            rows.push(read_json::<SizeRow>(&result).map_err(|source| HarnessError::Stage {
                stage: name.clone(),
                path: result.clone(),
                source,
            })?);
        }
        let path = self.size_study_path();
        let fail = |source: BoxError| HarnessError::Stage {
            stage: "size-study".into(),
            path: path.clone(),
            source,
        };
        write_json(&path, &rows).map_err(fail)?;
        fs::write(path.with_extension("csv"), size_csv(&rows)).map_err(|e| fail(Box::new(e)))?;
        Ok(rows)
    }

    fn eval_size(&self, size: &str, ckpt: &Path, task: &str, alpha: f64) -> Result<SizeRow, BoxError> {
        let model = self.load_model(ckpt)?;
        let dir = self.out(format!("sizes/{size}"));
        self.score_splits(&model, task, |s| dir.join(format!("scores-{}.jsonl", s.name())))?;
        let scored = |s: Split| Self::read_rows::<ScoredSample>(&dir.join(format!("scores-{}.jsonl", s.name())));
        let (train, valid, test) = (scored(Split::Train)?, scored(Split::Valid)?, scored(Split::Test)?);
        let (test_encs, test_targets) = encode_scored(&model, &test)?;
        let mut naps = Vec::new();
        let mut test_r = Vec::new();
        let mut proxy_ms = Vec::new();
        for &seed in &self.cfg.seeds {
            let (nap, _) = train_nap(&model, &train, &valid, &self.nap_opts(seed))?;
            test_r.push(evaluate_nap(&nap, &test_encs, &test_targets)?);
            let t = Instant::now();
            for e in &test_encs {
                nap.score_and_grad(e)?;
            }
            proxy_ms.push(t.elapsed().as_secs_f64() * 1e3 / test_encs.len().max(1) as f64);
            naps.push(nap);
        }
        let pairs: Vec<(u64, &Nap)> = self.cfg.seeds.iter().copied().zip(&naps).collect();
        let rows: Vec<Sample> = Self::read_rows(&self.data_path(task, Split::Test))?;
        let alphas = [0.0, alpha];
        let spec = SweepSpec {
            task,
            split: "test",
            alphas: &alphas,
            beam: self.cfg.beams[0],
            max_len: self.cfg.decode_max_len(),
            epsilon: self.cfg.epsilon,
        };
        let scorer = self.cfg.scorer_impl()?;
        let sweep = alpha_sweep(&model, &pairs, &rows, &spec, scorer.as_ref())?;
        let at = |a: f64| -> (SeedStat, f64) {
            let rs: Vec<_> = sweep.rows.iter().filter(|r| r.alpha == a).collect();
            let ms: Vec<f64> = rs.iter().map(|r| r.mean_runtime_ms).collect();
            (SeedStat::of(rs.iter().map(|r| r.mean_score).collect()), mean(&ms))
        };
        let (baseline, baseline_ms) = at(0.0);
        let (perturbed, perturbed_ms) = at(alpha);
        let ids: Vec<u64> = rows.iter().map(|r| r.id).collect();
        Ok(SizeRow {
            size: size.to_string(),
            params: model.params().num_scalars(),
            alpha,
            n_test: rows.len(),
            test_ids_sha256: sha256_hex(serde_json::to_string(&ids)?.as_bytes()),
            nap_test_r: SeedStat::of(test_r),
            gain: perturbed.mean - baseline.mean,
            baseline,
            perturbed,
            baseline_ms,
            perturbed_ms,
            proxy_ms: mean(&proxy_ms),
        })
    }
}

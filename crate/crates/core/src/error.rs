use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match buffer length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("objective must be scalar, got shape {0:?}")]
    NonScalarObjective(Vec<usize>),
    #[error("function value is not finite when perturbing coordinate {coordinate}")]
    NonFinite { coordinate: usize },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} at index {index} is outside the vocabulary of size {vocab_size}")]
    OutOfVocab {
        index: usize,
        token: u32,
        vocab_size: usize,
    },
    #[error("input length {len} outside [1, {max}]")]
    BadLength { len: usize, max: usize },
    #[error("encoder output has d_model {got}, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("beam width must be at least 1")]
    InvalidBeam,
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: u64 },
    #[error("empty training set")]
    EmptyDataset,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes: not a checkpoint container")]
    BadMagic,
    #[error("unsupported {kind} format version {version}")]
    UnsupportedVersion { kind: String, version: u32 },
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind { expected: String, found: String },
    #[error("truncated or malformed container: {0}")]
    Malformed(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("total reference length is zero")]
    ZeroReferenceLength,
    #[error("{refs} references but {hyps} hypotheses")]
    CountMismatch { refs: usize, hyps: usize },
    #[error("n-gram order must be at least 1")]
    InvalidOrder,
    #[error("unknown scorer {0:?}")]
    UnknownScorer(String),
}

#[derive(Debug, Error)]
pub enum NapError {
    #[error("encoder output has d_model {got}, proxy expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("pearson correlation undefined: {0}")]
    Degenerate(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("validation pearson correlation is undefined: {0}")]
    UndefinedValidation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("non-finite proxy gradient at position {position}")]
    NonFiniteGradient { position: usize },
    #[error("invalid perturbation config: {0}")]
    InvalidConfig(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error(transparent)]
    Nap(#[from] NapError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("vocabulary of {content} content tokens is too small for a cipher bijection")]
    VocabTooSmall { content: usize },
    #[error("could not draw {wanted} distinct pairs after {attempts} attempts")]
    Exhausted { wanted: usize, attempts: usize },
    #[error("score variance {variance:e} is below 1e-6; proxy training would be degenerate")]
    DegenerateScores { variance: f64 },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} failed (artifact {}): {source}", path.display())]
    Stage {
        stage: String,
        path: PathBuf,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("stage {stage}: artifact {} was built with a different config; rerun with --force", path.display())]
    Stale { stage: String, path: PathBuf },
    #[error("missing proxy for task {task} seed {seed}: {} (run train-nap first)", path.display())]
    MissingNap { task: String, seed: u64, path: PathBuf },
    #[error("missing artifact {} (run {stage} first)", path.display())]
    MissingArtifact { stage: String, path: PathBuf },
    #[error("sizes {a} and {b} share the checkpoint path {}", path.display())]
    SharedCheckpoint { a: String, b: String, path: PathBuf },
}

impl HarnessError {
    /// Process exit code: 1 for configuration problems, 2 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::SharedCheckpoint { .. } => 1,
            _ => 2,
        }
    }
}

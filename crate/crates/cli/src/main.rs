//! `nap-steer`: runs the experiment pipeline stage by stage or end to end.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nap_steer::error::HarnessError;
use nap_steer::harness::{ExperimentConfig, Harness, Outcome};

#[derive(Parser)]
#[command(name = "nap-steer", version, about = "Proxy-guided encoder perturbation experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Rebuild requested stages even when their artifacts are current.
    #[arg(long, global = true)]
    force: bool,
    /// Run with the single seed N instead of the configured seed list.
    #[arg(long, global = true, value_name = "N")]
    seed_override: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepSplit {
    Valid,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate task datasets and model training corpora.
    GenData,
    /// Train the frozen encoder-decoder.
    TrainModel,
    /// Greedy-decode and score every split.
    DecodeScore,
    /// Train one proxy per seed per task.
    TrainNap,
    /// Pearson r of each proxy on each split.
    EvalNap,
    /// α sweep on the validation split, or on the test split after selection.
    Sweep {
        #[arg(long, value_enum, default_value = "valid")]
        split: SweepSplit,
    },
    /// Pick α from the validation sweep.
    SelectAlpha,
    /// Write report.json.
    Report,
    /// Every stage through the report.
    RunAll,
    /// Cross-task proxy correlation matrix from existing artifacts.
    TransferMatrix,
    /// Fixed-α comparison across model sizes.
    SizeStudy,
}

fn print_stages(h: &Harness) {
    for (name, outcome) in h.stage_log() {
        let what = match outcome {
            Outcome::Ran => "ran",
            Outcome::Reused => "up to date",
        };
        eprintln!("{name}: {what}");
    }
}

fn fmt_std(s: Option<f64>) -> String {
    s.map_or("n/a".into(), |v| format!("{v:.4}"))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let path = cli
        .config
        .ok_or_else(|| HarnessError::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(n) = cli.seed_override {
        cfg = cfg.with_seed_override(n);
    }
    let h = Harness::new(cfg, cli.force)?;
    let result = match cli.command {
        Command::GenData => h.gen_data().map(drop),
        Command::TrainModel => h.train_model().map(drop),
        Command::DecodeScore => h.decode_score().map(drop),
        Command::TrainNap => h.train_nap().map(drop),
        Command::EvalNap => h.eval_nap().map(|_| println!("{}", h.eval_path().display())),
        Command::Sweep {
            split: SweepSplit::Valid,
        } => h.sweep_valid().map(drop),
        Command::Sweep {
            split: SweepSplit::Test,
        } => h.sweep_test().map(drop),
        Command::SelectAlpha => h.selections().map(|sel| {
            for s in sel {
                println!("{}\t{}", s.task, s.alpha);
            }
        }),
        Command::Report | Command::RunAll => h.run_all().map(|report| {
            for t in &report.tasks {
                println!(
                    "{}: alpha* {} baseline {:.4} (std {}) perturbed {:.4} (std {}) gain {:+.4} test r {:.4}",
                    t.task,
                    t.selected_alpha,
                    t.baseline.mean,
                    fmt_std(t.baseline.std),
                    t.perturbed.mean,
                    fmt_std(t.perturbed.std),
                    t.gain,
                    t.nap_test_r.mean
                );
            }
            println!("{}", h.report_path().display());
        }),
        Command::TransferMatrix => h.transfer_matrix().map(|cells| {
            print!("{}", nap_steer::harness::transfer_csv(&cells));
        }),
        Command::SizeStudy => h.size_study().map(|rows| {
            print!("{}", nap_steer::harness::size_csv(&rows));
        }),
    };
    print_stages(&h);
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

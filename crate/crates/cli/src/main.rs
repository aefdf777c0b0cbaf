use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tlalign::mixing::MixStrategy;
use tlalign_cli::config::{Precision, RunConfig};
use tlalign_cli::experiment::{self, CHECKPOINT_FILE};
use tlalign_cli::{selftest, CliError};

#[derive(Parser, Debug)]
#[command(name = "tlalign", version, about = "Token-label alignment laboratory")]
struct Cli {
    /// Run configuration (`key = value` lines); defaults to the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    tl_align: Option<Switch>,
    #[arg(long, global = true, value_enum)]
    mix: Option<Mix>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Prec>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write metrics, checkpoint and diagnostics.
    Train,
    /// Presence and ratio trajectories for an existing checkpoint.
    Diagnose {
        /// Defaults to `checkpoint.tla` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Analytic against finite-difference gradients on a small model.
    Gradcheck,
    /// Runs the invariant suites; exits 0 iff all pass.
    Selftest,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mix {
    Cutmix,
    Mixup,
    Random,
    Block,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Prec {
    F32,
    F64,
}

const EXIT_ERROR: u8 = 1;
const EXIT_SUITE_FAILED: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;

fn config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(t) = cli.tl_align {
        cfg.train.tl_align = matches!(t, Switch::On);
    }
    if let Some(m) = cli.mix {
        cfg.train.mix.strategy = match m {
            Mix::Cutmix => MixStrategy::CutMix,
            Mix::Mixup => MixStrategy::MixUp,
            Mix::Random => MixStrategy::RandomPatch,
            Mix::Block => MixStrategy::BlockWise,
        };
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    if let Some(p) = cli.precision {
        cfg.precision = match p {
            Prec::F32 => Precision::F32,
            Prec::F64 => Precision::F64,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<u8, CliError> {
    if let Command::Selftest = cli.command {
        let seed = cli.seed.unwrap_or(0);
        let results = selftest::run_all(seed);
        let mut ok = true;
        for r in &results {
            ok &= r.passed;
            println!(
                "{} {:<18} n={:<5} worst={:.3e} {:.2}s  {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.instances,
                r.worst,
                r.seconds,
                r.detail
            );
        }
        return Ok(if ok { 0 } else { EXIT_SUITE_FAILED });
    }
    let cfg = config(cli)?;
    match &cli.command {
        Command::Train => {
            let out = experiment::train(&cfg, |m| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  train {:.4}  test {:.4}  rmse {:.4}  {:.1}s",
                    m.epoch,
                    m.train_loss,
                    m.train_accuracy,
                    m.test_accuracy,
                    m.target_rmse,
                    m.seconds
                );
            })?;
            println!(
                "wrote {} (config {})",
                out.out_dir.display(),
                &out.config_hash[..16]
            );
        }
        Command::Diagnose { checkpoint } => {
            let path = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.output.join(CHECKPOINT_FILE));
            let d = experiment::diagnose(&cfg, &path)?;
            println!(
                "mean rmse {:.6} over {} held-out samples; {} trajectories",
                d.mean_rmse,
                d.rmse_samples,
                d.trajectories.len()
            );
        }
        Command::Gradcheck => {
            let mut ok = true;
            for (s, _) in experiment::gradcheck(&cfg)? {
                ok &= s.max_relative_error < 1e-4;
                println!(
                    "tl_align={} checked={} max_rel={:.3e} recomputed={:.3e} sensitivity={:.3e}",
                    s.tl_align,
                    s.checked,
                    s.max_relative_error,
                    s.max_relative_error_recomputed,
                    s.target_sensitivity
                );
            }
            if !ok {
                return Ok(EXIT_SUITE_FAILED);
            }
        }
        Command::Selftest => unreachable!("handled above"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Core(tlalign::Error::NonFiniteLoss { .. }) => {
                    ExitCode::from(EXIT_NON_FINITE)
                }
                _ => ExitCode::from(EXIT_ERROR),
            }
        }
    }
}

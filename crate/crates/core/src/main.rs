use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use action_rnn::control::InterventionScript;
use action_rnn::harness::{self, Checkpoint, ExperimentConfig, RunStatus};
use action_rnn::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arnn", version, about = "Action-conditioned recurrent agents")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every grid point of a `[sweep]` table over several seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write hidden states produced by a checkpoint as CSV.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay an intervention script from a control checkpoint.
    Intervene {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn writer(out: &Option<PathBuf>) -> Result<Box<dyn io::Write>> {
    Ok(match out {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn exec(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = harness::run(&cfg, seed.unwrap_or(cfg.seed), &out)?;
            match s.status {
                RunStatus::Ok => println!("ok final={}", s.final_metric),
                RunStatus::Diverged { step, reason } => {
                    println!("diverged at step {step}: {reason}")
                }
            }
        }
        Cmd::Sweep {
            config,
            runs,
            out,
            jobs,
        } => {
            let points = harness::expand_sweep(&fs::read_to_string(&config)?)?;
            for r in harness::sweep(&points, runs, jobs, &out)? {
                println!(
                    "{} [{}] mean={:.6} ci=({:.6}, {:.6}) failed={}",
                    r.point, r.label, r.mean, r.ci_low, r.ci_high, r.failed
                );
            }
        }
        Cmd::Dump {
            checkpoint,
            steps,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            harness::dump_hidden_states(&ck, steps, seed, writer(&out)?)?;
        }
        Cmd::Intervene {
            checkpoint,
            script,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let script: InterventionScript = toml::from_str(&fs::read_to_string(&script)?)
                .map_err(|e| Error::Config(e.to_string()))?;
            harness::intervene(&ck, &script, seed, writer(&out)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match exec(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

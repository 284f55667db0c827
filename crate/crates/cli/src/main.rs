use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sere_core::config::load_config;
use sere_core::run::{eval_run, load_run, sample_run, train_run, Split};
use sere_core::verify::{self, Suite};
use sere_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "sere", version, about = "Self-reflective hierarchical VAEs: train, evaluate, sample, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Print ELBO and the importance-weighted bound as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "iw-samples", default_value_t = 1000)]
        iw_samples: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Valid)]
        split: SplitArg,
        /// Evaluate only the first N rows of the split.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write generated samples (PGM images or CSV).
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in numerical checks.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    All,
    Factorization,
    Gradients,
    Bijectors,
}

enum Failure {
    Usage(String),
    Core(Error),
    Violation,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var("SERE_SEED") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| Failure::Usage(format!("SERE_SEED must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn json_line(v: &impl serde::Serialize) -> Result<(), Failure> {
    println!("{}", serde_json::to_string(v).map_err(Error::from)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let seed = env_seed()?;
    match cli.command {
        Command::Train { config, resume, out, quiet } => {
            let resolved = load_config(&config, seed)?;
            let out = out.unwrap_or_else(|| resolved.config.output_dir.clone());
            let total = resolved.config.training.epochs;
            let summary = train_run(&resolved, &out, resume.as_deref(), |row| {
                if !quiet {
                    let kls: Vec<String> = row.valid_kls.iter().map(|k| format!("{k:.3}")).collect();
                    eprintln!(
                        "epoch {:>5}/{total}  beta {:.4}  train {:.4}  valid {:.4}  kl [{}]  {:.1}s",
                        row.epoch + 1,
                        row.beta,
                        row.train_elbo,
                        row.valid_elbo,
                        kls.join(", "),
                        row.wall_time
                    );
                }
            })?;
            json_line(&summary)
        }
        Command::Eval { ckpt, iw_samples, split, limit } => {
            if iw_samples == 0 {
                return Err(Failure::Usage("--iw-samples must be at least 1".into()));
            }
            let loaded = load_run(&ckpt)?;
            let seed = seed.unwrap_or(loaded.meta.config.effective_seed());
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Valid => Split::Valid,
            };
            json_line(&eval_run(&loaded, split, iw_samples, limit, seed)?)
        }
        Command::Sample { ckpt, count, out } => {
            let loaded = load_run(&ckpt)?;
            let seed = seed.unwrap_or(loaded.meta.config.effective_seed());
            let paths = sample_run(&loaded, count, &out, seed)?;
            json_line(&serde_json::json!({ "written": paths }))
        }
        Command::Verify { suite, json } => {
            let suite = match suite {
                SuiteArg::All => Suite::All,
                SuiteArg::Factorization => Suite::Factorization,
                SuiteArg::Gradients => Suite::Gradients,
                SuiteArg::Bijectors => Suite::Bijectors,
            };
            let report = verify::run(suite, seed.unwrap_or(0))?;
            if json {
                json_line(&report)?;
            } else {
                for c in &report.checks {
                    let op = if c.below { "<=" } else { ">" };
                    println!("{} {}: {:.3e} ({op} {:.0e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
                }
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Violation)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Violation) => {
            eprintln!("error: verification failed");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric { .. } => ExitCode::from(EXIT_NUMERIC),
                _ => ExitCode::from(EXIT_VALIDATION),
            }
        }
    }
}

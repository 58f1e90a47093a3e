use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dvmerge_cli::{commands, ConfigError, ExperimentConfig, Protocol};

#[derive(Parser)]
#[command(name = "dvmerge", version, about = "Iterative difference-vector model merging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the root `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate task data, initialize the pre-trained weights and fine-tune one model per task.
    Finetune(Common),
    /// Run a merge protocol on the fine-tuned checkpoints.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        protocol: Protocol,
    },
    /// Turn a JSON run report into a per-epoch CSV and a text summary.
    Report {
        path: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn threads() -> Result<usize, ConfigError> {
    match std::env::var("DV_MERGE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| ConfigError {
            source: "DV_MERGE_THREADS".into(),
            line: None,
            message: format!("expected a positive integer, got `{v}`"),
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = io::stdout().lock();
    let result = match &cli.command {
        Command::Finetune(c) => load(c)
            .map_err(anyhow::Error::from)
            .and_then(|cfg| commands::finetune(&cfg, &mut out)),
        Command::Run { common, protocol } => load(common)
            .and_then(|cfg| Ok((cfg, threads()?)))
            .map_err(anyhow::Error::from)
            .and_then(|(cfg, n)| commands::run(&cfg, *protocol, n, &mut out).map(drop)),
        Command::Report { path, out: dir } => commands::report(path, dir.as_deref(), &mut out).map(drop),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

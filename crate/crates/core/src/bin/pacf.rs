use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pacf::cli::{self, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "pacf",
    version,
    about = "Prototype-based domain adaptation lab on feature vectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dumps.
    Gen(Common),
    /// Warm up, adapt and write checkpoint, losses and metrics.
    Train(Common),
    /// Recompute metrics for a checkpoint (default: <out>/checkpoint.json).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare finished runs and draw plots.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load(common: &Common) -> pacf::Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    let out = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| pacf::PacfError::InvalidConfig("no output directory: pass --out".into()))?;
    Ok((config, out))
}

fn run(command: Command) -> pacf::Result<()> {
    if let Some(n) = cli::threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| pacf::PacfError::InvalidConfig(e.to_string()))?;
    }
    match command {
        Command::Gen(common) => {
            let (config, out) = load(&common)?;
            cli::cmd_gen(&config, &out)
        }
        Command::Train(common) => {
            let (config, out) = load(&common)?;
            let outcome = cli::cmd_train(&config, &out)?;
            println!("{}", outcome.report.summary_csv().trim_end());
            Ok(())
        }
        Command::Eval { common, checkpoint } => {
            let (config, out) = load(&common)?;
            let checkpoint = checkpoint.unwrap_or_else(|| out.join("checkpoint.json"));
            let report = cli::cmd_eval(&config, &checkpoint, &out)?;
            println!("{}", report.summary_csv().trim_end());
            Ok(())
        }
        Command::Report { out, runs } => {
            for f in cli::cmd_report(&runs, &out)? {
                println!("{}", out.join(f).display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use smm_lab::config::{ExperimentConfig, StreamSpec};
use smm_lab::runner;

#[derive(Parser)]
#[command(name = "smm-lab", about = "Continual few-shot learning experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonRunArgs {
    /// Experiment configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the seed list from the config, e.g. --seeds 0,1,2
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override the output directory from the config
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task stream described in the config and save it
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Destination file for the stream
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every configured (strategy, seed) pair and write the artifacts
    Run {
        #[command(flatten)]
        common: CommonRunArgs,
        /// Parallel worker count (0 = all cores)
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Summarize a finished run directory
    Report {
        /// The run's output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify the analytic displacement ceilings against a measured run
    CheckBounds,
}

fn load_config(path: &PathBuf, common: Option<&CommonRunArgs>) -> smm_lab::Result<(ExperimentConfig, Option<PathBuf>)> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(c) = common {
        if let Some(seeds) = &c.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(out) = &c.out {
            cfg.out_dir = out.clone();
        }
    }
    cfg.validate()?;
    let dir = path.parent().map(|p| p.to_path_buf());
    Ok((cfg, dir))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate { config, out } => (|| {
            let (cfg, dir) = load_config(&config, None)?;
            match &cfg.stream {
                StreamSpec::Blobs(_) => {}
                StreamSpec::Path { .. } => {
                    return Err(smm_lab::Error::InvalidConfig(
                        "generate needs a blob-generator stream section, not a path".into(),
                    ))
                }
            }
            let stream = cfg.stream.resolve(dir.as_deref())?;
            stream.save(&out)?;
            println!(
                "wrote stream with {} base classes and {} tasks to {}",
                stream.base_classes.len(),
                stream.tasks.len(),
                out.display()
            );
            Ok(())
        })(),
        Command::Run { common, jobs } => (|| {
            let (cfg, dir) = load_config(&common.config, Some(&common))?;
            let report = runner::run(&cfg, jobs, dir.as_deref())?;
            println!(
                "{} runs ok, {} failed; artifacts in {}",
                report.series.len(),
                report.failures.len(),
                cfg.out_dir.display()
            );
            for f in &report.failures {
                eprintln!("failed: {} seed {}: {}", f.strategy, f.seed, f.error);
            }
            if report.failures.is_empty() {
                Ok(())
            } else {
                Err(smm_lab::Error::InvalidInput("some runs failed".into()))
            }
        })(),
        Command::Report { out } => runner::report(&out).map(|_| ()),
        Command::CheckBounds => runner::check_bounds(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

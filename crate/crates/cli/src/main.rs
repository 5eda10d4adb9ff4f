use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hyperlearner::config::ExperimentConfig;
use hyperlearner_cli::{
    cmd_eval, cmd_generate, cmd_report, cmd_train, CliError, CliResult, DetectionSource, TrainFlags, EXIT_VALIDATION,
};

#[derive(Parser)]
#[command(name = "hyperlearner", version, about = "Synthetic pedestrian detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with train and test splits.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scene seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Train a detector and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
        /// Stop after this many iterations; continue later with --resume.
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Score a checkpoint or a directory of detection files.
    Eval {
        #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only this difficulty (easy, moderate or hard).
        #[arg(long)]
        difficulty: Option<String>,
    },
    /// Compare evaluated runs side by side.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Run directory name the deltas are taken against.
        #[arg(long)]
        baseline: Option<String>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf) -> CliResult<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn fmt_rate(v: Option<f64>) -> String {
    v.map(|r| format!("{:6.2}", 100.0 * r)).unwrap_or_else(|| "     -".into())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { config, out, seed, force } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.scene.seed = s;
            }
            let s = cmd_generate(&cfg, &out, force)?;
            println!(
                "wrote {} train and {} test images to {}",
                s.train.count,
                s.test.count,
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
            force,
            max_iterations,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let flags = TrainFlags {
                resume,
                force,
                max_iterations,
            };
            let s = cmd_train(&cfg, &data, &out, &flags)?;
            println!(
                "{} after {} iterations (stages: {}), parameters {}",
                if s.finished { "finished" } else { "paused" },
                s.iterations,
                s.stages.join(", "),
                &s.param_hash[..16]
            );
        }
        Command::Eval {
            checkpoint,
            detections,
            data,
            out,
            difficulty,
        } => {
            let source = match (checkpoint, detections) {
                (Some(c), _) => DetectionSource::Checkpoint(c),
                (None, Some(d)) => DetectionSource::Files(d),
                (None, None) => return Err(CliError::Validation("--checkpoint or --detections is required".into())),
            };
            let m = cmd_eval(&source, &data, &out, difficulty.as_deref())?;
            for (name, d) in &m.difficulties {
                println!(
                    "{:<9} AP {}  MR-2 {}  MR-4 {}  ({} objects)",
                    name,
                    fmt_rate((d.gt_count > 0).then_some(d.average_precision)),
                    fmt_rate(d.log_average_miss_rate_2),
                    fmt_rate(d.log_average_miss_rate_4),
                    d.gt_count
                );
            }
            if let Some(a) = m.pixel_accuracy {
                println!("pixel accuracy {:.4}", a);
            }
        }
        Command::Report { runs, baseline, out } => {
            let table = cmd_report(&runs, baseline.as_deref())?;
            print!("{}", table);
            if let Some(p) = out {
                std::fs::write(&p, &table).map_err(|e| CliError::Runtime(format!("{}: {}", p.display(), e)))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use squat::config::ExperimentConfig;
use squat::experiment::{self, SharpnessJob};
use squat::parallel::Execution;
use squat::Error;

#[derive(Parser)]
#[command(name = "squat", version, about = "Sharpness- and quantization-aware training runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (mode, seed) cell of a config and write a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `key.path=value`, repeatable. Values are parsed as JSON when possible.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run cells one at a time.
        #[arg(long)]
        sequential: bool,
    },
    /// Measure sharpness of a checkpoint on a CSV dataset.
    Sharpness {
        /// Checkpoint written by `run`.
        #[arg(long)]
        ckpt: PathBuf,
        /// CSV with feature columns and a trailing integer label.
        #[arg(long)]
        data: PathBuf,
        /// Ball radii; defaults to 0.01 and 0.05.
        #[arg(long, num_args = 1..)]
        rho: Vec<f64>,
        /// Ascent step size; defaults to rho / 10.
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value_t = squat::sharpness::DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = squat::sharpness::DEFAULT_SUBSET)]
        subset: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report file; defaults to `<ckpt>.sharpness.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate per-mode deltas against LSQ across run directories.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Directory for compare.csv, compare.txt and compare_plot.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Data(_) | Error::Checkpoint(_) => 3,
        _ => 1,
    }
}

fn execute(cli: Cli) -> squat::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            overrides,
            sequential,
        } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let out = out
                .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::default()
            };
            let summary = experiment::run(&cfg, &out, exec)?;
            for m in &summary.modes {
                let acc = m.eval_acc.mean.map_or("n/a".into(), |v| format!("{v:.4}"));
                println!(
                    "{} {}: acc {acc} over {} runs (ok {}, diverged {}, crashed {})",
                    summary.task, m.mode, m.runs, m.ok, m.diverged, m.crashed
                );
            }
            println!("summary: {}", out.join(experiment::SUMMARY_FILE).display());
        }
        Command::Sharpness {
            ckpt,
            data,
            rho,
            eta,
            steps,
            subset,
            seed,
            out,
        } => {
            let mut job = SharpnessJob {
                eta,
                steps,
                subset,
                seed,
                ..SharpnessJob::default()
            };
            if !rho.is_empty() {
                job.rhos = rho;
            }
            let reports = experiment::sharpness_of_checkpoint(&ckpt, &data, &job)?;
            for r in &reports {
                println!("{}", serde_json::to_string(r)?);
            }
            let out = out.unwrap_or_else(|| {
                let mut p = ckpt.into_os_string();
                p.push(".sharpness.json");
                PathBuf::from(p)
            });
            std::fs::write(out, serde_json::to_vec_pretty(&reports)?)?;
        }
        Command::Compare { dirs, out } => {
            let rows = experiment::compare_dirs(&dirs)?;
            experiment::write_compare(&rows, &out)?;
            print!("{}", experiment::rows_to_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

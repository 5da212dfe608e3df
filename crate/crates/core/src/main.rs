use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use softgem::epsilon_search::{self, SearchError};
use softgem::harness::{self, ExperimentConfig, HarnessError, RunRecord};
use softgem::metrics::MetricsReport;

#[derive(Parser)]
#[command(name = "softgem", version, about = "Continual-learning benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the config's seed list
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run every *.json config in a directory
    Suite {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace every config's seed list with this single seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Search the soft-constraint margin for a SOFTGEM config
    SearchEps {
        /// Experiment config; trains on its cross-validation tasks
        #[arg(long, required_unless_present = "parabola")]
        config: Option<PathBuf>,
        /// Score grid points with -(eps - PEAK)^2 instead of training
        #[arg(long, value_name = "PEAK")]
        parabola: Option<f64>,
        #[arg(long, default_value_t = 11)]
        grid_points: usize,
        #[arg(long, default_value_t = 5)]
        max_repeats: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Recompute metrics from a stored run record
    Metrics {
        #[arg(long)]
        record: PathBuf,
        /// Print a CSV row instead of JSON
        #[arg(long)]
        csv: bool,
    },
}

fn with_seed(mut cfg: ExperimentConfig, seed: Option<u64>) -> ExperimentConfig {
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg
}

fn print_summary(summary: &harness::SuiteSummary) {
    for row in &summary.rows {
        let fmt = |c: &str| match (row.mean(c), row.std(c)) {
            (Some(m), Some(s)) => format!("{:.4}±{:.4}", m, s),
            _ => "-".into(),
        };
        println!(
            "{:<24} runs={} A_T={} F_T={} LCA_10={}",
            row.label,
            row.runs,
            fmt("A_T"),
            fmt("F_T"),
            fmt("LCA_10")
        );
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            jobs,
        } => {
            let cfg = with_seed(ExperimentConfig::load(&config)?, seed);
            let summary = harness::run_suite(&[cfg], &out, jobs)?;
            print_summary(&summary);
        }
        Command::Suite {
            configs,
            out,
            seed,
            jobs,
        } => {
            let cfgs: Vec<_> = harness::load_config_dir(&configs)?
                .into_iter()
                .map(|c| with_seed(c, seed))
                .collect();
            let summary = harness::run_suite(&cfgs, &out, jobs)?;
            print_summary(&summary);
        }
        Command::SearchEps {
            config,
            parabola,
            grid_points,
            max_repeats,
            seed,
            out,
            jobs,
        } => {
            let outcome = match (parabola, config) {
                (Some(peak), _) => epsilon_search::run_search::<SearchError, _, _>(
                    grid_points,
                    max_repeats,
                    |e| Ok(-(e - peak) * (e - peak)),
                )?,
                (None, Some(path)) => {
                    let cfg = with_seed(ExperimentConfig::load(&path)?, seed);
                    harness::search_epsilon(&cfg, grid_points, max_repeats, jobs)?
                }
                (None, None) => unreachable!("clap requires one of --config / --parabola"),
            };
            harness::write_search_outputs(&out, &outcome)?;
            println!(
                "best epsilon {} (A_T {:.4}) after {} repeats",
                outcome.best_epsilon, outcome.best_score.mean, outcome.repeats
            );
        }
        Command::Metrics { record, csv } => {
            let record = RunRecord::load(&record)?;
            let report = record.metrics()?;
            if csv {
                let mut buf = Vec::new();
                harness::write_metrics_csv(&mut buf, std::slice::from_ref(&record))?;
                print!("{}", String::from_utf8_lossy(&buf));
            } else {
                let json: serde_json::Value = serde_json::to_value::<&MetricsReport>(&report)
                    .expect("report serializes");
                println!("{}", serde_json::to_string_pretty(&json).expect("json"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

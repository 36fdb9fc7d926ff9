use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use nugget::harness::{speedup_error, Pipeline, ToolchainConfig, ValidationReport};
use nugget::nugget::RoiAction;
use nugget::selection::{Method, DEFAULT_MAX_CLUSTERS};
use nugget::Error;

#[derive(Parser, Debug)]
#[command(
    name = "nugget",
    version,
    about = "Interval analysis and sampled validation on LLVM IR"
)]
struct Cli {
    /// Directory holding every artifact of one workload.
    #[arg(long, global = true, default_value = "nugget-out")]
    out_dir: PathBuf,
    /// JSON file with toolchain command templates.
    #[arg(long, global = true)]
    toolchain_config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Random,
    Kmeans,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ActionArg {
    Timer,
    Announce,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Build the optimized base IR (`base.ll`) from sources or IR files.
    Prepare {
        #[arg(required = true)]
        sources: Vec<PathBuf>,
        /// Workload name recorded in reports (default: first source's stem).
        #[arg(long)]
        name: Option<String>,
    },
    /// Instrument, run, and write `bbid.map` and `nugget.profile`.
    Analyze {
        /// IR instructions per interval.
        #[arg(long, default_value_t = 1_000_000)]
        interval_size: u64,
        /// Force the thread-safe runtime (automatic when the program spawns threads).
        #[arg(long)]
        thread_safe: bool,
        /// Program arguments.
        #[arg(last = true)]
        args: Vec<String>,
    },
    /// Choose representative intervals and write `selection.json`.
    Select {
        #[arg(long, value_enum, default_value_t = MethodArg::Kmeans)]
        method: MethodArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of intervals for random sampling.
        #[arg(long, default_value_t = 10)]
        samples: usize,
        /// Largest k tried by k-means.
        #[arg(long, default_value_t = DEFAULT_MAX_CLUSTERS)]
        max_clusters: usize,
    },
    /// Derive markers (`nuggets.json`) and build one binary per selected interval.
    Nugget {
        #[arg(long, default_value_t = 0)]
        warmup_intervals: u64,
        /// Allowed early distance in IR instructions for relaxed end markers.
        #[arg(long, default_value_t = 0)]
        search_distance: u64,
        #[arg(long, value_enum, default_value_t = ActionArg::Timer)]
        action: ActionArg,
    },
    /// Time the full run and every nugget; write `report.json` and `report.csv`.
    Validate {
        #[arg(long, default_value_t = nugget::harness::DEFAULT_REPS)]
        reps: usize,
    },
    /// Speedup-prediction error between two validation reports (A relative to B).
    Speedup {
        report_a: PathBuf,
        report_b: PathBuf,
    },
    /// Print a summary of `report.json`.
    Report {
        /// Report file (default: `<out-dir>/report.json`).
        report: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let toolchain = match &cli.toolchain_config {
        Some(p) => ToolchainConfig::load(p)?,
        None => ToolchainConfig::default(),
    };
    let pipeline = Pipeline::new(toolchain, &cli.out_dir);
    match cli.command {
        Cmd::Prepare { sources, name } => {
            let base = pipeline.prepare(&sources, name.as_deref())?;
            println!("{}", base.display());
        }
        Cmd::Analyze {
            interval_size,
            thread_safe,
            args,
        } => {
            let p = pipeline.analyze(interval_size, &args, thread_safe)?;
            println!(
                "{} intervals ({} full), {} blocks",
                p.len(),
                p.full_intervals().len(),
                p.block_count()
            );
        }
        Cmd::Select {
            method,
            seed,
            samples,
            max_clusters,
        } => {
            let sel = match method {
                MethodArg::Random => pipeline.select(Method::Random, samples, seed)?,
                MethodArg::Kmeans => pipeline.select(Method::KMeans, max_clusters, seed)?,
            };
            if let Some(k) = sel.k_used {
                println!("k = {k}");
            }
            for c in &sel.chosen {
                println!("interval {}\tweight {}", c.interval_id, c.weight);
            }
        }
        Cmd::Nugget {
            warmup_intervals,
            search_distance,
            action,
        } => {
            let action = match action {
                ActionArg::Timer => RoiAction::Timer,
                ActionArg::Announce => RoiAction::Announce,
            };
            for s in pipeline.nuggets(warmup_intervals, search_distance, action)? {
                println!("{}", pipeline.nugget_binary(s.interval_id).display());
            }
        }
        Cmd::Validate { reps } => {
            let report = pipeline.validate(reps)?;
            print_report(&report);
            if !report.complete {
                return Ok(ExitCode::from(3));
            }
        }
        Cmd::Speedup { report_a, report_b } => {
            let a = ValidationReport::read(&report_a)?;
            let b = ValidationReport::read(&report_b)?;
            println!("{}", speedup_error(&a, &b)?);
        }
        Cmd::Report { report } => {
            let path = report.unwrap_or_else(|| pipeline.path("report.json"));
            print_report(&ValidationReport::read(&path)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_report(r: &ValidationReport) {
    println!("workload       {}", r.workload);
    println!("ground truth   {} ns", r.ground_truth_ns);
    for n in &r.nuggets {
        println!(
            "  interval {:>6}  weight {:.6}  roi {} ns  {:?}",
            n.interval_id, n.weight, n.roi_ns, n.status
        );
    }
    match (r.predicted_total_ns, r.prediction_error) {
        (Some(p), Some(e)) => {
            println!("predicted      {p:.0} ns");
            println!("error          {:+.4}%", e * 100.0);
        }
        _ => println!("incomplete: at least one nugget missed its marker"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

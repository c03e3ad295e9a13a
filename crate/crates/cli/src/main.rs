use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use chop_core::harness::{
    grid_search, read_summary_json, run_assimilation, run_chop_experiment, write_cycles_csv,
    write_diagnostics_csv, write_grid_csv, write_records_jsonl, write_summary_json, AnalysisMethod, Experiment,
    ExperimentSummary, Method, Prepared, RunOptions, RunRecord, ScenarioConfig,
};
use chop_core::l96::cached_climatology;
use chop_core::HyperParams;

#[derive(Parser)]
#[command(name = "chop", version, about = "Lorenz-96 EnKF twin experiments with per-cycle hyper-parameter tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Base seed; repetition k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of repetitions.
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Compute (or load from cache) the long-run climatology.
    Climatology(Common),
    /// Fixed-(δ, λ) EnKF over the scenario grid.
    GridSearch(Common),
    /// CHOP runs over all repetitions.
    Chop {
        #[command(flatten)]
        common: Common,
        /// Override the scenario method (chop-sif or chop-mif).
        #[arg(long)]
        method: Option<String>,
        /// Keep full smoother diagnostics for these cycles (1-based).
        #[arg(long, value_delimiter = ',')]
        diagnostic_cycles: Vec<usize>,
    },
    /// One repetition with per-cycle output.
    SingleRun {
        #[command(flatten)]
        common: Common,
        /// Repetition index.
        #[arg(long, default_value_t = 0)]
        repetition: usize,
        /// Fixed inflation factor (grid method).
        #[arg(long)]
        delta: Option<f64>,
        /// Fixed length scale (grid method).
        #[arg(long)]
        length_scale: Option<f64>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long, value_delimiter = ',')]
        diagnostic_cycles: Vec<usize>,
    },
    /// Re-export run records (JSON lines) as CSV and print a summary file.
    Export {
        /// Records written by `chop` or `single-run`.
        #[arg(long)]
        records: PathBuf,
        /// Optional summary JSON to print.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

fn parse_method(s: &str) -> Result<Method> {
    Ok(match s {
        "grid" => Method::Grid,
        "chop-sif" => Method::ChopSif,
        "chop-mif" => Method::ChopMif,
        other => bail!("unknown method {other:?} (expected grid, chop-sif or chop-mif)"),
    })
}

fn load_scenario(common: &Common) -> Result<ScenarioConfig> {
    let mut sc = match &common.config {
        Some(path) => ScenarioConfig::from_file(path).with_context(|| format!("loading {}", path.display()))?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = common.seed {
        sc.base_seed = seed;
    }
    if let Some(reps) = common.reps {
        sc.repetitions = reps;
    }
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    std::fs::create_dir_all(&common.out_dir)
        .with_context(|| format!("creating {}", common.out_dir.display()))?;
    Ok(sc)
}

fn finish_experiment(sc: &ScenarioConfig, exp: &Experiment, out: &Path) -> Result<()> {
    write_cycles_csv(&exp.records, &out.join("cycles.csv"))?;
    write_diagnostics_csv(&exp.records, &out.join("diagnostics.csv"))?;
    write_records_jsonl(&exp.records, &out.join("records.jsonl"))?;
    let summary = ExperimentSummary::from_experiment(sc, exp);
    write_summary_json(std::slice::from_ref(&summary), &out.join("summary.json"))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Climatology(common) => {
            let sc = load_scenario(&common)?;
            let dir = sc.cache_dir.clone().unwrap_or_else(|| common.out_dir.clone());
            std::fs::create_dir_all(&dir)?;
            let t = Instant::now();
            let clim = cached_climatology(&sc.climatology_spec(), Some(&dir))?;
            let n = clim.dim() as f64;
            let mean = clim.mean.sum() / n;
            let var = clim.covariance.trace() / n;
            info!("climatology ready in {:.1?}", t.elapsed());
            println!(
                "{}",
                serde_json::json!({
                    "state_dim": clim.dim(),
                    "steps": sc.climatology_steps,
                    "average_mean": mean,
                    "average_variance": var,
                    "file": dir.join(sc.climatology_spec().cache_file_name()),
                })
            );
        }
        Command::GridSearch(common) => {
            let mut sc = load_scenario(&common)?;
            sc.method = Method::Grid;
            let prepared = Prepared::new(sc.clone())?;
            let t = Instant::now();
            let grid = grid_search(&prepared, None)?;
            info!("grid search of {} cells in {:.1?}", grid.cells.len(), t.elapsed());
            write_grid_csv(&grid, &common.out_dir.join("grid.csv"))?;
            let summary = ExperimentSummary::from_grid(&sc, &grid);
            write_summary_json(std::slice::from_ref(&summary), &common.out_dir.join("summary.json"))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Chop {
            common,
            method,
            diagnostic_cycles,
        } => {
            let mut sc = load_scenario(&common)?;
            if let Some(m) = method {
                sc.method = parse_method(&m)?;
            }
            if sc.method == Method::Grid {
                sc.method = Method::ChopSif;
            }
            if !diagnostic_cycles.is_empty() {
                sc.diagnostic_cycles = diagnostic_cycles;
            }
            let prepared = Prepared::new(sc.clone())?;
            let t = Instant::now();
            let exp = run_chop_experiment(&prepared, RunOptions { keep_cycles: true })?;
            info!("{} repetitions in {:.1?}", exp.records.len(), t.elapsed());
            finish_experiment(&sc, &exp, &common.out_dir)?;
        }
        Command::SingleRun {
            common,
            repetition,
            delta,
            length_scale,
            method,
            diagnostic_cycles,
        } => {
            let mut sc = load_scenario(&common)?;
            if let Some(m) = method {
                sc.method = parse_method(&m)?;
            }
            if let Some(d) = delta {
                sc.fixed_delta = d;
            }
            if let Some(l) = length_scale {
                sc.fixed_length_scale = l;
            }
            if !diagnostic_cycles.is_empty() {
                sc.diagnostic_cycles = diagnostic_cycles;
            }
            sc.repetitions = sc.repetitions.max(repetition + 1);
            let prepared = Prepared::new(sc.clone())?;
            let analysis = match sc.method.inflation_mode() {
                Some(mode) => AnalysisMethod::Chop(mode),
                None => AnalysisMethod::Fixed(HyperParams::sif(sc.fixed_delta, sc.fixed_length_scale)),
            };
            let record = run_assimilation(&prepared, &analysis, repetition, RunOptions { keep_cycles: true })?;
            let mut one = sc.clone();
            one.repetitions = 1;
            one.base_seed = record.seed;
            finish_experiment(&one, &Experiment::from_records(vec![record]), &common.out_dir)?;
        }
        Command::Export {
            records,
            summary,
            out_dir,
        } => {
            let text = std::fs::read_to_string(&records).with_context(|| format!("reading {}", records.display()))?;
            let recs: Vec<RunRecord> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("parsing {}", records.display()))?;
            std::fs::create_dir_all(&out_dir)?;
            write_cycles_csv(&recs, &out_dir.join("cycles.csv"))?;
            write_diagnostics_csv(&recs, &out_dir.join("diagnostics.csv"))?;
            let exp = Experiment::from_records(recs);
            println!(
                "{} records, mean RMSE {:.4}, std {:.4}, diverged {}",
                exp.records.len(),
                exp.mean_rmse,
                exp.std_rmse,
                exp.diverged_count
            );
            if let Some(path) = summary {
                let s = read_summary_json(&path)?;
                println!("{}", serde_json::to_string_pretty(&s)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

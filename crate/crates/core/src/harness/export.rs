//! CSV and JSON output of experiment results.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::run::{Experiment, GridResult, RunRecord};
use crate::error::{Error, Result};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// Writes an explicit header (so an empty table still has one) and then
/// one serialized row per item.
fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    ensure_parent(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const GRID_HEADER: [&str; 5] = ["delta", "length_scale", "mean_rmse", "std_rmse", "diverged_count"];

/// One row per `(δ, λ)` cell.
pub fn write_grid_csv(grid: &GridResult, path: &Path) -> Result<()> {
    write_rows(path, &GRID_HEADER, grid.cells.iter())
}

#[derive(Debug, Serialize)]
struct CycleRow<'a> {
    method: &'a str,
    repetition: usize,
    cycle: usize,
    time_index: usize,
    rmse: f64,
    mean_member_rmse: f64,
    spread: f64,
    data_mismatch: f64,
    iterations: usize,
}

pub const CYCLE_HEADER: [&str; 9] = [
    "method",
    "repetition",
    "cycle",
    "time_index",
    "rmse",
    "mean_member_rmse",
    "spread",
    "data_mismatch",
    "iterations",
];

/// One row per run and cycle.
pub fn write_cycles_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let rows = records.iter().flat_map(|r| {
        r.cycles.iter().enumerate().map(move |(k, c)| CycleRow {
            method: &r.method,
            repetition: r.repetition,
            cycle: k + 1,
            time_index: c.time_index,
            rmse: c.rmse_of_mean,
            mean_member_rmse: c.mean_rmse,
            spread: c.spread,
            data_mismatch: c.data_mismatch_mean,
            iterations: c.iterations,
        })
    });
    write_rows(path, &CYCLE_HEADER, rows)
}

#[derive(Debug, Serialize)]
struct DiagnosticRow {
    repetition: usize,
    cycle: usize,
    iteration: usize,
    alpha: f64,
    gamma: f64,
    trials: usize,
    accepted: bool,
    mean_mismatch: f64,
    p10_mismatch: f64,
    median_mismatch: f64,
    p90_mismatch: f64,
    mean_rmse: Option<f64>,
    spread: Option<f64>,
    tsvd_rank: usize,
    stop_reason: String,
}

pub const DIAGNOSTIC_HEADER: [&str; 15] = [
    "repetition",
    "cycle",
    "iteration",
    "alpha",
    "gamma",
    "trials",
    "accepted",
    "mean_mismatch",
    "p10_mismatch",
    "median_mismatch",
    "p90_mismatch",
    "mean_rmse",
    "spread",
    "tsvd_rank",
    "stop_reason",
];

/// Linear-interpolation percentile of `values` (`q` in `[0, 1]`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// One row per smoother iteration of every cycle with kept diagnostics.
pub fn write_diagnostics_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for r in records {
        for cd in &r.diagnostics {
            let stop = serde_json::to_value(cd.diagnostics.stop_reason)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            for rec in &cd.diagnostics.records {
                rows.push(DiagnosticRow {
                    repetition: r.repetition,
                    cycle: cd.cycle,
                    iteration: rec.iteration,
                    alpha: rec.alpha,
                    gamma: rec.gamma,
                    trials: rec.trials,
                    accepted: rec.accepted,
                    mean_mismatch: rec.mean_mismatch,
                    p10_mismatch: percentile(&rec.member_mismatch, 0.1),
                    median_mismatch: percentile(&rec.member_mismatch, 0.5),
                    p90_mismatch: percentile(&rec.member_mismatch, 0.9),
                    mean_rmse: rec.mean_rmse,
                    spread: rec.spread,
                    tsvd_rank: rec.tsvd_rank,
                    stop_reason: stop.clone(),
                });
            }
        }
    }
    write_rows(path, &DIAGNOSTIC_HEADER, rows)
}

/// Table-style summary of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub method: String,
    pub state_dim: usize,
    pub ensemble_size: usize,
    pub obs_increment: usize,
    pub obs_frequency: usize,
    pub window_units: f64,
    pub repetitions: usize,
    pub base_seed: u64,
    /// Window-average RMSE per repetition; `None` when diverged.
    pub average_rmse: Vec<Option<f64>>,
    /// `None` when any repetition diverged.
    pub mean_rmse: Option<f64>,
    pub std_rmse: Option<f64>,
    pub diverged_count: usize,
    /// Grid search only: best `(δ, λ)`.
    pub argmin: Option<(f64, f64)>,
    /// Mean outer iterations per cycle (CHOP only).
    pub mean_iterations: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl ExperimentSummary {
    fn base(scenario: &ScenarioConfig, method: &str) -> Self {
        Self {
            name: scenario.name.clone(),
            method: method.to_string(),
            state_dim: scenario.state_dim,
            ensemble_size: scenario.ensemble_size,
            obs_increment: scenario.obs_increment,
            obs_frequency: scenario.obs_frequency,
            window_units: scenario.window_units,
            repetitions: scenario.repetitions,
            base_seed: scenario.base_seed,
            average_rmse: Vec::new(),
            mean_rmse: None,
            std_rmse: None,
            diverged_count: 0,
            argmin: None,
            mean_iterations: None,
        }
    }

    pub fn from_experiment(scenario: &ScenarioConfig, exp: &Experiment) -> Self {
        let method = exp.records.first().map_or("", |r| r.method.as_str());
        let mut s = Self::base(scenario, method);
        s.average_rmse = exp.records.iter().map(|r| finite(r.average_rmse)).collect();
        s.mean_rmse = finite(exp.mean_rmse);
        s.std_rmse = finite(exp.std_rmse);
        s.diverged_count = exp.diverged_count;
        let (iters, cycles) = exp.records.iter().flat_map(|r| r.chop.iter()).fold((0usize, 0usize), |(i, n), c| {
            (i + c.iterations, n + 1)
        });
        if cycles > 0 {
            s.mean_iterations = Some(iters as f64 / cycles as f64);
        }
        s
    }

    pub fn from_grid(scenario: &ScenarioConfig, grid: &GridResult) -> Self {
        let mut s = Self::base(scenario, "grid");
        if let Some(best) = grid.best() {
            s.mean_rmse = finite(best.mean_rmse);
            s.std_rmse = finite(best.std_rmse);
            s.argmin = Some((best.delta, best.length_scale));
        }
        s.diverged_count = grid.cells.iter().filter(|c| c.diverged_count > 0).count();
        s
    }
}

pub fn write_summary_json(summaries: &[ExperimentSummary], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, summaries).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary_json(path: &Path) -> Result<Vec<ExperimentSummary>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_grid_csv(path: &Path) -> Result<Vec<super::run::GridCell>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })
}

/// Full run records (including per-cycle diagnostics) as JSON lines.
pub fn write_records_jsonl(records: &[RunRecord], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::GridCell;

    #[test]
    fn empty_grid_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        write_grid_csv(&GridResult { cells: vec![], argmin: None }, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "delta,length_scale,mean_rmse,std_rmse,diverged_count\n");
        let path = dir.path().join("cycles.csv");
        write_cycles_csv(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
    }

    #[test]
    fn one_cell_is_one_row_of_five_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let cells = vec![GridCell {
            delta: 0.1,
            length_scale: 0.2,
            mean_rmse: f64::NAN,
            std_rmse: f64::NAN,
            diverged_count: 3,
        }];
        write_grid_csv(&GridResult { cells: cells.clone(), argmin: None }, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].split(',').count(), 5);
        let back = read_grid_csv(&path).unwrap();
        assert_eq!(back[0].delta, 0.1);
        assert!(back[0].mean_rmse.is_nan());
        assert_eq!(back[0].diverged_count, 3);
    }

    #[test]
    fn percentiles() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(percentile(&[0.0, 10.0], 0.1), 1.0);
        assert!(percentile(&[], 0.5).is_nan());
    }
}

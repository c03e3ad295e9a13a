//! Twin-experiment orchestration: scenarios, runs, grid search and export.

pub mod config;
pub mod export;
pub mod run;

pub use config::{GridAxis, Method, ScenarioConfig};
pub use export::{
    read_grid_csv, read_summary_json, write_cycles_csv, write_diagnostics_csv, write_grid_csv,
    write_records_jsonl, write_summary_json, ExperimentSummary, CYCLE_HEADER, DIAGNOSTIC_HEADER, GRID_HEADER,
};
pub use run::{
    grid_search, mean_std, run_assimilation, run_chop_experiment, run_repetitions, run_with_twin,
    AnalysisMethod, ChopCycleSummary, Experiment, GridCell, GridResult, Prepared, RunOptions, RunRecord,
};

//! Forecast/analysis loop, grid search and CHOP experiments.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Method, ScenarioConfig};
use crate::enkf::{AnalysisContext, HyperParams, InflationMode};
use crate::ensemble::GaussianSampler;
use crate::error::{Error, Result};
use crate::ies::{run_chop_cycle, ChopConfig, IesDiagnostics, StopReason};
use crate::l96::{cached_climatology, generate_truth_and_background, Lorenz96, TwinSetup};
use crate::metrics::{rmse, CycleMetrics};
use crate::observation::{observe, ObservationBatch, ObservationError, ObservationOperator};
use crate::rng::{cycle_seed, Stream};

/// A scenario with its climatology and observation system resolved.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: ScenarioConfig,
    pub sampler: GaussianSampler,
    pub operator: ObservationOperator,
    pub error: ObservationError,
    /// Truth step indices of the assimilation cycles.
    pub steps: Vec<usize>,
}

impl Prepared {
    pub fn new(scenario: ScenarioConfig) -> Result<Self> {
        scenario.validate()?;
        if let Some(dir) = &scenario.cache_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let clim = cached_climatology(&scenario.climatology_spec(), scenario.cache_dir.as_deref())?;
        let sampler = clim.sampler()?;
        let operator = ObservationOperator::new(scenario.state_dim, scenario.obs_increment)?;
        let variance = scenario.obs_noise_std * scenario.obs_noise_std;
        let error = ObservationError::diagonal(DVector::from_element(operator.obs_dim(), variance))?;
        let steps = scenario.assimilation_steps()?;
        Ok(Self {
            scenario,
            sampler,
            operator,
            error,
            steps,
        })
    }

    fn model(&self) -> Result<Lorenz96> {
        Lorenz96::new(self.scenario.state_dim, self.scenario.forcing, self.scenario.dt)
    }

    /// Truth trajectory and initial background of the run with `seed`.
    pub fn twin(&self, seed: u64) -> Result<TwinSetup> {
        generate_truth_and_background(
            &self.sampler,
            &mut self.model()?,
            self.scenario.transition_steps()?,
            self.scenario.window_steps()?,
            self.scenario.ensemble_size,
            seed,
        )
    }

    /// Real and perturbed observations of cycle `cycle` (1-based).
    pub fn observations(&self, truth: &DMatrix<f64>, cycle: usize, seed: u64) -> Result<ObservationBatch> {
        let step = self.steps[cycle - 1];
        let observed = observe(
            &self.operator,
            &truth.column(step).into_owned(),
            self.scenario.obs_noise_std,
            cycle_seed(seed, Stream::ObservationNoise, cycle),
        )?;
        ObservationBatch::with_perturbations(
            observed,
            self.error.clone(),
            self.scenario.ensemble_size,
            cycle_seed(seed, Stream::Perturbation, cycle),
        )
    }

    fn chop_config(&self, mode: InflationMode) -> ChopConfig {
        ChopConfig {
            mode,
            ies: self.scenario.ies.clone(),
            bounds: self.scenario.lhs_ranges,
        }
    }
}

/// How each cycle's analysis is formed.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisMethod {
    Fixed(HyperParams),
    Chop(InflationMode),
}

impl AnalysisMethod {
    pub fn label(&self) -> &'static str {
        match self {
            AnalysisMethod::Fixed(_) => Method::Grid.label(),
            AnalysisMethod::Chop(InflationMode::Sif) => Method::ChopSif.label(),
            AnalysisMethod::Chop(InflationMode::Mif) => Method::ChopMif.label(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Keep the per-cycle metrics (otherwise only the window average).
    pub keep_cycles: bool,
}

/// Per-cycle summary of a CHOP analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChopCycleSummary {
    pub cycle: usize,
    pub iterations: usize,
    pub stop_reason: StopReason,
    #[serde(with = "crate::serde_nan")]
    pub initial_mismatch: f64,
    #[serde(with = "crate::serde_nan")]
    pub final_mismatch: f64,
    /// Mean of the final inflation factors (over members and components).
    pub delta_mean: f64,
    pub length_scale_mean: f64,
    /// Smallest per-parameter standard deviation of the final ensemble.
    #[serde(with = "crate::serde_nan")]
    pub min_theta_std: f64,
    /// Whether every accepted iteration lowered the average mismatch.
    pub monotone: bool,
    #[serde(with = "crate::serde_nan")]
    pub taper_min: f64,
    #[serde(with = "crate::serde_nan")]
    pub taper_max: f64,
    /// Whether every truncation obeyed the kept-energy rule.
    pub tsvd_rule_ok: bool,
}

impl ChopCycleSummary {
    fn new(cycle: usize, diag: &IesDiagnostics, theta: &DMatrix<f64>, energy_fraction: f64) -> Self {
        let h = theta.nrows();
        let n_e = theta.ncols() as f64;
        let deltas = theta.rows(0, h - 1);
        let delta_mean = deltas.sum() / (deltas.len() as f64);
        let length_scale_mean = theta.row(h - 1).sum() / n_e;
        let records = &diag.records;
        let monotone = records
            .windows(2)
            .all(|w| !w[1].accepted || w[1].mean_mismatch < w[0].mean_mismatch);
        let (mut taper_min, mut taper_max) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut tsvd_rule_ok = true;
        for r in &records[1..] {
            taper_min = taper_min.min(r.taper_min);
            taper_max = taper_max.max(r.taper_max);
            tsvd_rule_ok &= (r.tsvd_rank == 1 || r.tsvd_energy_kept <= energy_fraction)
                && (r.tsvd_energy_next > energy_fraction || r.tsvd_energy_next >= 1.0);
        }
        if records.len() == 1 {
            taper_min = 1.0;
            taper_max = 1.0;
        }
        Self {
            cycle,
            iterations: diag.iterations(),
            stop_reason: diag.stop_reason,
            initial_mismatch: records[0].mean_mismatch,
            final_mismatch: records.last().map_or(f64::NAN, |r| r.mean_mismatch),
            delta_mean,
            length_scale_mean,
            min_theta_std: diag.final_theta_std.iter().copied().fold(f64::INFINITY, f64::min),
            monotone,
            taper_min,
            taper_max,
            tsvd_rule_ok,
        }
    }
}

/// Full smoother log of one requested cycle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleDiagnostics {
    pub cycle: usize,
    pub diagnostics: IesDiagnostics,
    /// Final hyper-parameter ensemble, one vector per member.
    pub final_theta: Vec<Vec<f64>>,
}

/// Outcome of one assimilation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    pub method: String,
    pub repetition: usize,
    pub seed: u64,
    /// `(δ, λ)` of a fixed-parameter run.
    pub cell: Option<(f64, f64)>,
    pub cycles: Vec<CycleMetrics>,
    /// Window average of the analysis-mean RMSE; NaN when diverged.
    #[serde(with = "crate::serde_nan")]
    pub average_rmse: f64,
    pub diverged: bool,
    /// Cycle (1-based) at which divergence was detected.
    pub diverged_at: Option<usize>,
    pub chop: Vec<ChopCycleSummary>,
    pub diagnostics: Vec<CycleDiagnostics>,
}

/// One repetition of `method`, with a freshly generated twin.
pub fn run_assimilation(
    prepared: &Prepared,
    method: &AnalysisMethod,
    repetition: usize,
    options: RunOptions,
) -> Result<RunRecord> {
    let seed = prepared.scenario.repetition_seed(repetition);
    let twin = prepared.twin(seed)?;
    run_with_twin(prepared, &twin, method, repetition, options)
}

/// One repetition of `method` on a given twin.
pub fn run_with_twin(
    prepared: &Prepared,
    twin: &TwinSetup,
    method: &AnalysisMethod,
    repetition: usize,
    options: RunOptions,
) -> Result<RunRecord> {
    let sc = &prepared.scenario;
    let seed = sc.repetition_seed(repetition);
    let mut model = prepared.model()?;
    let mut ensemble = twin.background.clone();
    let mut record = RunRecord {
        scenario: sc.name.clone(),
        method: method.label().to_string(),
        repetition,
        seed,
        cell: match method {
            AnalysisMethod::Fixed(p) => match p.inflation {
                crate::enkf::InflationSpec::Single(d) => Some((d, p.length_scale)),
                crate::enkf::InflationSpec::Multiple(_) => None,
            },
            AnalysisMethod::Chop(_) => None,
        },
        cycles: Vec::new(),
        average_rmse: f64::NAN,
        diverged: false,
        diverged_at: None,
        chop: Vec::new(),
        diagnostics: Vec::new(),
    };
    let chop_config = match method {
        AnalysisMethod::Chop(mode) => {
            let mut c = prepared.chop_config(*mode);
            c.ies.keep_history = false;
            Some(c)
        }
        AnalysisMethod::Fixed(_) => None,
    };

    let mut last_step = 0;
    let mut rmse_sum = 0.0;
    for (k, &step) in prepared.steps.iter().enumerate() {
        let cycle = k + 1;
        if model.forecast_ensemble(&mut ensemble, step - last_step).is_err() {
            return Ok(diverge(record, cycle));
        }
        last_step = step;
        let obs = prepared.observations(&twin.truth, cycle, seed)?;
        let truth = twin.truth.column(step).into_owned();

        let (analysis, iterations) = match method {
            AnalysisMethod::Fixed(theta) => {
                let ctx = AnalysisContext::new(&ensemble, &obs, &prepared.operator)?;
                (ctx.analyze_shared(theta)?, 0)
            }
            AnalysisMethod::Chop(_) => {
                let mut config = chop_config.clone().expect("chop config");
                let wanted = sc.diagnostic_cycles.contains(&cycle);
                config.ies.keep_history = wanted;
                let outcome = match run_chop_cycle(
                    &ensemble,
                    &obs,
                    &prepared.operator,
                    &config,
                    cycle_seed(seed, Stream::HyperParameters, cycle),
                    if wanted { Some(&truth) } else { None },
                ) {
                    Ok(o) => o,
                    Err(Error::CycleFailure(msg)) => {
                        log::warn!("{} rep {repetition} cycle {cycle}: {msg}", sc.name);
                        return Ok(diverge(record, cycle));
                    }
                    Err(e) => return Err(e),
                };
                let iterations = outcome.diagnostics.iterations();
                record.chop.push(ChopCycleSummary::new(
                    cycle,
                    &outcome.diagnostics,
                    &outcome.theta.members,
                    config.ies.energy_fraction,
                ));
                if wanted {
                    record.diagnostics.push(CycleDiagnostics {
                        cycle,
                        final_theta: (0..outcome.theta.len()).map(|j| outcome.theta.member(j)).collect(),
                        diagnostics: outcome.diagnostics,
                    });
                }
                (outcome.analysis, iterations)
            }
        };

        if analysis.iter().any(|x| !x.is_finite()) {
            return Ok(diverge(record, cycle));
        }
        let mean = analysis.column_sum() / analysis.ncols() as f64;
        let cycle_rmse = rmse(mean.as_slice(), truth.as_slice())?;
        if !(cycle_rmse <= sc.divergence_threshold) {
            return Ok(diverge(record, cycle));
        }
        rmse_sum += cycle_rmse;
        if options.keep_cycles {
            let predicted = prepared.operator.apply_ensemble(&analysis);
            record.cycles.push(CycleMetrics::compute(
                step,
                &analysis,
                &truth,
                &predicted,
                &obs.perturbed,
                &obs.error,
                iterations,
            )?);
        }
        ensemble = analysis;
    }
    record.average_rmse = rmse_sum / prepared.steps.len() as f64;
    Ok(record)
}

fn diverge(mut record: RunRecord, cycle: usize) -> RunRecord {
    log::debug!(
        "{} {} rep {} diverged at cycle {cycle}",
        record.scenario,
        record.method,
        record.repetition
    );
    record.diverged = true;
    record.diverged_at = Some(cycle);
    record.average_rmse = f64::NAN;
    record
}

/// Mean and sample standard deviation (`n - 1`; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Statistics of one `(δ, λ)` cell over the repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub delta: f64,
    pub length_scale: f64,
    /// NaN when any repetition diverged.
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub diverged_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    /// Cell with the smallest finite mean RMSE.
    pub argmin: Option<usize>,
}

impl GridResult {
    pub fn best(&self) -> Option<&GridCell> {
        self.argmin.map(|i| &self.cells[i])
    }

    pub fn cell(&self, delta: f64, length_scale: f64) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| (c.delta - delta).abs() < 1e-9 && (c.length_scale - length_scale).abs() < 1e-9)
    }
}

/// Runs every cell for every repetition. `cells = None` uses the scenario
/// grid. Twins are generated once per repetition and shared across cells.
pub fn grid_search(prepared: &Prepared, cells: Option<&[(f64, f64)]>) -> Result<GridResult> {
    let cells: Vec<(f64, f64)> = match cells {
        Some(c) => c.to_vec(),
        None => prepared.scenario.grid_cells()?,
    };
    let reps = prepared.scenario.repetitions;
    let twins: Vec<TwinSetup> = (0..reps)
        .into_par_iter()
        .map(|k| prepared.twin(prepared.scenario.repetition_seed(k)))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..reps).map(move |k| (c, k)))
        .collect();
    let averages: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, k)| {
            let (d, l) = cells[c];
            let method = AnalysisMethod::Fixed(HyperParams::sif(d, l));
            run_with_twin(prepared, &twins[k], &method, k, RunOptions::default()).map(|r| r.average_rmse)
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(cells.len());
    for (c, &(delta, length_scale)) in cells.iter().enumerate() {
        let values = &averages[c * reps..(c + 1) * reps];
        let diverged_count = values.iter().filter(|v| !v.is_finite()).count();
        let (mean_rmse, std_rmse) = if diverged_count > 0 {
            (f64::NAN, f64::NAN)
        } else {
            mean_std(values)
        };
        out.push(GridCell {
            delta,
            length_scale,
            mean_rmse,
            std_rmse,
            diverged_count,
        });
    }
    let argmin = out
        .iter()
        .enumerate()
        .filter(|(_, c)| c.mean_rmse.is_finite())
        .min_by(|a, b| a.1.mean_rmse.total_cmp(&b.1.mean_rmse))
        .map(|(i, _)| i);
    Ok(GridResult { cells: out, argmin })
}

/// Aggregate of repeated runs of one method.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub records: Vec<RunRecord>,
    /// NaN when any repetition diverged.
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub diverged_count: usize,
}

impl Experiment {
    pub fn from_records(records: Vec<RunRecord>) -> Self {
        let values: Vec<f64> = records.iter().map(|r| r.average_rmse).collect();
        let diverged_count = records.iter().filter(|r| r.diverged).count();
        let (mean_rmse, std_rmse) = if diverged_count > 0 {
            (f64::NAN, f64::NAN)
        } else {
            mean_std(&values)
        };
        Self {
            records,
            mean_rmse,
            std_rmse,
            diverged_count,
        }
    }
}

/// Every repetition of `method`, concurrently.
pub fn run_repetitions(prepared: &Prepared, method: &AnalysisMethod, options: RunOptions) -> Result<Experiment> {
    let records: Vec<RunRecord> = (0..prepared.scenario.repetitions)
        .into_par_iter()
        .map(|k| run_assimilation(prepared, method, k, options))
        .collect::<Result<_>>()?;
    Ok(Experiment::from_records(records))
}

/// CHOP runs of the scenario's method over all repetitions.
pub fn run_chop_experiment(prepared: &Prepared, options: RunOptions) -> Result<Experiment> {
    let mode = prepared.scenario.method.inflation_mode().ok_or_else(|| {
        Error::InvalidConfig("CHOP experiment needs method chop-sif or chop-mif".into())
    })?;
    let exp = run_repetitions(prepared, &AnalysisMethod::Chop(mode), options)?;
    if exp.diverged_count > 0 {
        log::warn!(
            "{}: {} of {} CHOP repetitions diverged",
            prepared.scenario.name,
            exp.diverged_count,
            exp.records.len()
        );
    }
    Ok(exp)
}

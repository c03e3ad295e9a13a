//! Iterative ensemble smoother for hyper-parameter estimation.
//!
//! Every outer iteration regresses the hyper-parameter anomalies onto the
//! whitened predicted-observation anomalies through a truncated SVD,
//! regularised by `γ = α · mean(σ²)` over the kept singular values, and
//! localises the resulting gain by the sample correlation between each
//! hyper-parameter and each innovation component. A step is accepted when
//! it lowers the member-averaged data mismatch; otherwise `α` is doubled up
//! to `max_trials` times.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enkf::{AnalysisContext, HyperParamBounds, HyperParams, InflationMode};
use crate::ensemble::{
    ensemble_mean_and_anomalies, gaspari_cohn_unchecked, latin_hypercube, truncated_svd, TruncatedSvd,
};
use crate::error::{ensure_len, Error, Result};
use crate::metrics::{ensemble_spread, rmse};
use crate::observation::{ObservationBatch, ObservationOperator};

/// A hyper-parameter-to-predicted-observation mapping, one per ensemble
/// member.
pub trait ForwardMap: Sync {
    /// `g_j(θ)`: predicted observations of member `j` under `θ`.
    fn predict_member(&self, member: usize, theta: &[f64]) -> Result<DVector<f64>>;

    /// `g(θ̄)`: predicted observations at the ensemble-mean hyper-parameter.
    fn predict_at_mean(&self, theta: &[f64]) -> Result<DVector<f64>>;
}

/// Ensemble of hyper-parameter vectors (`h x N_e`) with per-row bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParamEnsemble {
    pub members: DMatrix<f64>,
    pub bounds: Vec<(f64, f64)>,
}

impl HyperParamEnsemble {
    pub fn new(members: DMatrix<f64>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        ensure_len(bounds.len(), members.nrows(), "hyper-parameter bounds")?;
        Ok(Self { members, bounds })
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn len(&self) -> usize {
        self.members.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.members.ncols() == 0
    }

    pub fn member(&self, j: usize) -> Vec<f64> {
        self.members.column(j).iter().copied().collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        (self.members.column_sum() / self.len() as f64).iter().copied().collect()
    }

    /// Clamps every entry into its row's bounds; returns how many moved.
    pub fn clamp(&mut self) -> usize {
        let mut moved = 0;
        for (s, &(lo, hi)) in self.bounds.iter().enumerate() {
            for x in self.members.row_mut(s).iter_mut() {
                let c = if x.is_nan() { lo } else { x.clamp(lo, hi) };
                if c != *x {
                    *x = c;
                    moved += 1;
                }
            }
        }
        moved
    }

    /// Per-row sample standard deviation.
    pub fn std_dev(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.members
            .row_iter()
            .map(|row| {
                let m = row.sum() / n;
                (row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
            })
            .collect()
    }
}

/// Gain taper `L_{s,t} = f_GC((1 - |ρ_{s,t}|) / (1 - 3/sqrt(N_e)))`.
#[derive(Debug, Clone)]
pub struct CorrelationTaper {
    /// `h x d`.
    pub taper: DMatrix<f64>,
    /// `h x d` sample correlations.
    pub correlation: DMatrix<f64>,
}

/// Correlation-based taper between hyper-parameters (`h x N_e`) and
/// whitened innovations (`d x N_e`). Rows or columns without variance get
/// `ρ = 0`.
pub fn correlation_taper(theta: &DMatrix<f64>, innovations: &DMatrix<f64>) -> Result<CorrelationTaper> {
    let n_e = theta.ncols();
    ensure_len(innovations.ncols(), n_e, "innovation members")?;
    if n_e <= 9 {
        return Err(Error::UnsupportedEnsembleSize(n_e));
    }
    let theta_std = standardize_rows(theta);
    let innov_std = standardize_rows(innovations);
    let mut correlation = theta_std * innov_std.transpose();
    correlation.apply(|r| *r = r.clamp(-1.0, 1.0));
    let denom = 1.0 - 3.0 / (n_e as f64).sqrt();
    let taper = correlation.map(|r| gaspari_cohn_unchecked((1.0 - r.abs()) / denom));
    Ok(CorrelationTaper { taper, correlation })
}

/// Rows scaled to zero mean and unit norm (zero rows when constant), so that
/// the product of two such matrices holds Pearson correlations.
fn standardize_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.ncols() as f64;
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / n;
        row.add_scalar_mut(-mean);
        let norm = row.norm();
        if norm > 0.0 && norm.is_finite() {
            row /= norm;
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// `γ = α Σ σ_ℓ² / r` over the kept singular values.
pub fn gamma_from_alpha(alpha: f64, svd: &TruncatedSvd) -> f64 {
    let r = svd.rank() as f64;
    alpha * svd.singular_values.iter().map(|s| s * s).sum::<f64>() / r
}

/// Everything of one outer iteration that does not depend on `γ`.
pub struct StepPlan {
    theta: DMatrix<f64>,
    /// `S_θ`, `h x N_e`.
    theta_anomalies: DMatrix<f64>,
    pub svd: TruncatedSvd,
    /// `C_d^{-1/2}(d°_j - g(θ_j))`, `d x N_e`.
    residuals: DMatrix<f64>,
    pub taper: Option<CorrelationTaper>,
}

impl StepPlan {
    pub fn new(
        theta: &DMatrix<f64>,
        predicted: &DMatrix<f64>,
        predicted_at_mean: &DVector<f64>,
        obs: &ObservationBatch,
        localize: bool,
        energy_fraction: f64,
    ) -> Result<Self> {
        let n_e = theta.ncols();
        ensure_len(predicted.ncols(), n_e, "predicted members")?;
        ensure_len(predicted.nrows(), obs.obs_dim(), "predicted observation length")?;
        ensure_len(predicted_at_mean.len(), obs.obs_dim(), "mean prediction length")?;
        ensure_len(obs.ensemble_size(), n_e, "perturbed observation members")?;

        let (_, theta_anomalies) = ensemble_mean_and_anomalies(theta)?;
        let theta_anomalies = theta_anomalies.into_inner();
        if theta_anomalies.iter().all(|&x| x == 0.0) {
            return Err(Error::CollapsedEnsemble);
        }
        let scale = 1.0 / ((n_e - 1) as f64).sqrt();
        let mut sg = predicted.clone();
        for mut col in sg.column_iter_mut() {
            col -= predicted_at_mean;
            col *= scale;
        }
        let sg = obs.error.whiten(&sg)?;
        let svd = truncated_svd(&sg, energy_fraction)?;
        let residuals = obs.error.whiten(&(&obs.perturbed - predicted))?;
        let taper = if localize {
            Some(correlation_taper(theta, &residuals)?)
        } else {
            None
        };
        Ok(Self {
            theta: theta.clone(),
            theta_anomalies,
            svd,
            residuals,
            taper,
        })
    }

    pub fn gamma(&self, alpha: f64) -> f64 {
        gamma_from_alpha(alpha, &self.svd)
    }

    /// `θ_j + (L ∘ K̃) Δd̃_j` with
    /// `K̃ = S_θ V̂ Σ̂ (Σ̂² + γ I)^{-1} Ûᵀ`; not clamped.
    pub fn step(&self, gamma: f64) -> DMatrix<f64> {
        let sigma = &self.svd.singular_values;
        let weights = sigma.map(|s| s / (s * s + gamma));
        let mut left = &self.theta_anomalies * &self.svd.v; // h x r
        for (mut col, w) in left.column_iter_mut().zip(weights.iter()) {
            col *= *w;
        }
        let mut gain = left * self.svd.u.transpose(); // h x d
        if let Some(t) = &self.taper {
            gain.component_mul_assign(&t.taper);
        }
        &self.theta + gain * &self.residuals
    }
}

/// One regularised update of a hyper-parameter ensemble with a given `γ`.
/// `taper = None` disables localization.
pub fn ies_step(
    theta: &HyperParamEnsemble,
    predicted: &DMatrix<f64>,
    predicted_at_mean: &DVector<f64>,
    obs: &ObservationBatch,
    gamma: f64,
    localize: bool,
) -> Result<HyperParamEnsemble> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidConfig(format!("γ must be > 0, got {gamma}")));
    }
    let plan = StepPlan::new(
        &theta.members,
        predicted,
        predicted_at_mean,
        obs,
        localize,
        crate::ensemble::TSVD_ENERGY_FRACTION,
    )?;
    let mut next = HyperParamEnsemble {
        members: plan.step(gamma),
        bounds: theta.bounds.clone(),
    };
    next.clamp();
    Ok(next)
}

/// Member-averaged `(d°_j - g_j)ᵀ C_d^{-1} (d°_j - g_j)`, and the per-member
/// values.
pub fn average_data_mismatch(predicted: &DMatrix<f64>, obs: &ObservationBatch) -> Result<(f64, Vec<f64>)> {
    ensure_len(predicted.nrows(), obs.obs_dim(), "predicted observation length")?;
    ensure_len(predicted.ncols(), obs.ensemble_size(), "predicted members")?;
    let residual = obs.error.whiten(&(&obs.perturbed - predicted))?;
    let per_member: Vec<f64> = residual.column_iter().map(|c| c.norm_squared()).collect();
    let mean = per_member.iter().sum::<f64>() / per_member.len() as f64;
    Ok((mean, per_member))
}

/// Settings of the smoother.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IesConfig {
    pub initial_alpha: f64,
    /// Factor applied to `α` after an accepted step.
    pub alpha_shrink: f64,
    /// Factor applied to `α` at every trial.
    pub alpha_grow: f64,
    pub max_iterations: usize,
    pub max_trials: usize,
    /// Stop when `|E^i - E^{i-1}| / E^{i-1}` falls below this.
    pub rel_change_tol: f64,
    /// Stop when the average mismatch falls below this times `d`.
    pub abs_threshold_factor: f64,
    pub energy_fraction: f64,
    /// Correlation-based localization of the gain.
    pub localize: bool,
    /// Keep every iterate of the hyper-parameter ensemble.
    pub keep_history: bool,
}

impl Default for IesConfig {
    fn default() -> Self {
        Self {
            initial_alpha: 1.0,
            alpha_shrink: 0.9,
            alpha_grow: 2.0,
            max_iterations: 10,
            max_trials: 5,
            rel_change_tol: 1e-4,
            abs_threshold_factor: 4.0,
            energy_fraction: crate::ensemble::TSVD_ENERGY_FRACTION,
            localize: true,
            keep_history: false,
        }
    }
}

impl IesConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_alpha > 0.0
            && self.alpha_shrink > 0.0
            && self.alpha_grow > 1.0
            && self.rel_change_tol >= 0.0
            && self.abs_threshold_factor >= 0.0
            && self.energy_fraction > 0.0
            && self.energy_fraction <= 1.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid IES settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIter,
    RelChange,
    AbsThreshold,
    /// The hyper-parameter ensemble lost all spread.
    Collapsed,
    /// Predicted observations no longer depend on the hyper-parameters.
    Insensitive,
    /// The last trial produced non-finite predictions; previous iterate kept.
    NonFinite,
}

/// One row of the iteration log. Iteration 0 is the initial ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `α` that produced this iterate (after trial doubling).
    #[serde(with = "crate::serde_nan")]
    pub alpha: f64,
    #[serde(with = "crate::serde_nan")]
    pub gamma: f64,
    /// Trial evaluations spent on this iterate; 1 when the first proposal
    /// was accepted.
    pub trials: usize,
    /// Whether the iterate lowered the average mismatch.
    pub accepted: bool,
    #[serde(with = "crate::serde_nan")]
    pub mean_mismatch: f64,
    pub member_mismatch: Vec<f64>,
    pub tsvd_rank: usize,
    #[serde(with = "crate::serde_nan")]
    pub tsvd_energy_kept: f64,
    #[serde(with = "crate::serde_nan")]
    pub tsvd_energy_next: f64,
    #[serde(with = "crate::serde_nan")]
    pub taper_min: f64,
    #[serde(with = "crate::serde_nan")]
    pub taper_max: f64,
    /// Mean member RMSE of the mapped states, when a reference is known.
    pub mean_rmse: Option<f64>,
    /// Spread of the mapped states, when computed.
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IesDiagnostics {
    pub records: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    #[serde(with = "crate::serde_nan")]
    pub final_alpha: f64,
    /// Per-parameter standard deviation of the final ensemble.
    pub final_theta_std: Vec<f64>,
    #[serde(skip)]
    pub history: Vec<DMatrix<f64>>,
}

impl IesDiagnostics {
    /// Number of outer iterations performed (iterates after the initial one).
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }
}

/// Result of a smoother run.
#[derive(Debug, Clone)]
pub struct IesOutcome {
    pub theta: HyperParamEnsemble,
    /// Predictions `g_j(θ_j)` at the final ensemble.
    pub predicted: DMatrix<f64>,
    pub diagnostics: IesDiagnostics,
}

fn predict_all<M: ForwardMap + ?Sized>(map: &M, theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cols: Vec<DVector<f64>> = (0..theta.ncols())
        .into_par_iter()
        .map(|j| {
            let t: Vec<f64> = theta.column(j).iter().copied().collect();
            map.predict_member(j, &t)
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_columns(&cols))
}

fn mean_of(theta: &DMatrix<f64>) -> Vec<f64> {
    (theta.column_sum() / theta.ncols() as f64).iter().copied().collect()
}

struct Evaluated {
    theta: DMatrix<f64>,
    predicted: DMatrix<f64>,
    mean: f64,
    per_member: Vec<f64>,
}

fn evaluate<M: ForwardMap + ?Sized>(map: &M, theta: DMatrix<f64>, obs: &ObservationBatch) -> Result<Evaluated> {
    let predicted = predict_all(map, &theta)?;
    let (mean, per_member) = if predicted.iter().all(|x| x.is_finite()) {
        average_data_mismatch(&predicted, obs)?
    } else {
        (f64::INFINITY, vec![f64::INFINITY; theta.ncols()])
    };
    Ok(Evaluated {
        theta,
        predicted,
        mean,
        per_member,
    })
}

/// Runs the smoother from `initial` until one of the stopping rules fires.
pub fn run_ies<M: ForwardMap + ?Sized>(
    map: &M,
    obs: &ObservationBatch,
    initial: HyperParamEnsemble,
    config: &IesConfig,
) -> Result<IesOutcome> {
    config.validate()?;
    let bounds = initial.bounds.clone();
    let d = obs.obs_dim() as f64;
    let abs_threshold = config.abs_threshold_factor * d;

    let mut current = evaluate(map, initial.members, obs)?;
    if !current.mean.is_finite() {
        return Err(Error::CycleFailure(
            "initial hyper-parameter ensemble produced non-finite predictions".into(),
        ));
    }
    let mut alpha = config.initial_alpha;
    let mut history = Vec::new();
    if config.keep_history {
        history.push(current.theta.clone());
    }
    let mut records = vec![IterationRecord {
        iteration: 0,
        alpha: f64::NAN,
        gamma: f64::NAN,
        trials: 0,
        accepted: true,
        mean_mismatch: current.mean,
        member_mismatch: current.per_member.clone(),
        tsvd_rank: 0,
        tsvd_energy_kept: f64::NAN,
        tsvd_energy_next: f64::NAN,
        taper_min: f64::NAN,
        taper_max: f64::NAN,
        mean_rmse: None,
        spread: None,
    }];

    let mut stop = if current.mean < abs_threshold {
        Some(StopReason::AbsThreshold)
    } else {
        None
    };

    let mut iteration = 0;
    while stop.is_none() {
        if iteration >= config.max_iterations {
            stop = Some(StopReason::MaxIter);
            break;
        }
        iteration += 1;

        let g_mean = map.predict_at_mean(&mean_of(&current.theta))?;
        let plan = match StepPlan::new(
            &current.theta,
            &current.predicted,
            &g_mean,
            obs,
            config.localize,
            config.energy_fraction,
        ) {
            Ok(p) => p,
            Err(Error::CollapsedEnsemble) => {
                stop = Some(StopReason::Collapsed);
                break;
            }
            Err(Error::DegenerateMatrix(_)) => {
                stop = Some(StopReason::Insensitive);
                break;
            }
            Err(e) => return Err(e),
        };

        let mut trial_alpha = alpha;
        let mut trials = 0;
        let mut proposal;
        let mut gamma;
        loop {
            gamma = plan.gamma(trial_alpha);
            let mut next = HyperParamEnsemble {
                members: plan.step(gamma),
                bounds: bounds.clone(),
            };
            next.clamp();
            proposal = evaluate(map, next.members, obs)?;
            trials += 1;
            if proposal.mean < current.mean || trials > config.max_trials {
                break;
            }
            trial_alpha *= config.alpha_grow;
        }
        let accepted = proposal.mean < current.mean;
        let (taper_min, taper_max) = plan
            .taper
            .as_ref()
            .map(|t| (t.taper.min(), t.taper.max()))
            .unwrap_or((1.0, 1.0));

        if !proposal.mean.is_finite() {
            // keep the previous iterate
            stop = Some(StopReason::NonFinite);
            break;
        }

        let previous = current.mean;
        alpha = if accepted {
            trial_alpha * config.alpha_shrink
        } else {
            trial_alpha
        };
        current = proposal;
        if config.keep_history {
            history.push(current.theta.clone());
        }
        records.push(IterationRecord {
            iteration,
            alpha: trial_alpha,
            gamma,
            trials,
            accepted,
            mean_mismatch: current.mean,
            member_mismatch: current.per_member.clone(),
            tsvd_rank: plan.svd.rank(),
            tsvd_energy_kept: plan.svd.energy_kept,
            tsvd_energy_next: plan.svd.energy_next,
            taper_min,
            taper_max,
            mean_rmse: None,
            spread: None,
        });

        if current.mean < abs_threshold {
            stop = Some(StopReason::AbsThreshold);
        } else if (current.mean - previous).abs() / previous < config.rel_change_tol {
            stop = Some(StopReason::RelChange);
        } else if iteration >= config.max_iterations {
            stop = Some(StopReason::MaxIter);
        }
    }

    let theta = HyperParamEnsemble {
        members: current.theta,
        bounds,
    };
    let diagnostics = IesDiagnostics {
        records,
        stop_reason: stop.expect("loop exits with a reason"),
        final_alpha: alpha,
        final_theta_std: theta.std_dev(),
        history,
    };
    Ok(IesOutcome {
        theta,
        predicted: current.predicted,
        diagnostics,
    })
}

/// The EnKF analysis of one cycle seen as a map from hyper-parameters to
/// predicted observations.
pub struct EnkfMap<'c, 'a> {
    pub context: &'c AnalysisContext<'a>,
    pub mode: InflationMode,
}

impl ForwardMap for EnkfMap<'_, '_> {
    fn predict_member(&self, member: usize, theta: &[f64]) -> Result<DVector<f64>> {
        self.context
            .predict_member(member, &HyperParams::from_slice(theta, self.mode)?)
    }

    fn predict_at_mean(&self, theta: &[f64]) -> Result<DVector<f64>> {
        self.context
            .predict_mean(&HyperParams::from_slice(theta, self.mode)?)
    }
}

/// Settings of one CHOP analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct ChopConfig {
    pub mode: InflationMode,
    pub ies: IesConfig,
    /// Latin-hypercube ranges for the initial ensemble, also the clamping
    /// bounds.
    pub bounds: HyperParamBounds,
}

/// Result of one CHOP analysis cycle.
#[derive(Debug, Clone)]
pub struct ChopCycleOutcome {
    pub analysis: DMatrix<f64>,
    pub theta: HyperParamEnsemble,
    pub diagnostics: IesDiagnostics,
}

/// Tunes the hyper-parameters of one analysis by the smoother, starting
/// from a Latin-hypercube ensemble drawn with `lhs_seed`, and returns the
/// memberwise analysis at the final ensemble. With `truth`, every recorded
/// iterate also gets the mean member RMSE and spread of its analysis
/// (requires `config.ies.keep_history`).
pub fn run_chop_cycle(
    background: &DMatrix<f64>,
    obs: &ObservationBatch,
    op: &ObservationOperator,
    config: &ChopConfig,
    lhs_seed: u64,
    truth: Option<&DVector<f64>>,
) -> Result<ChopCycleOutcome> {
    config.bounds.validate()?;
    let context = AnalysisContext::new(background, obs, op)?.with_bounds(config.bounds.clone());
    let ranges = config.bounds.ranges(config.mode, op.state_dim());
    let theta0 = latin_hypercube(&ranges, background.ncols(), lhs_seed)?;
    let initial = HyperParamEnsemble::new(theta0, ranges)?;
    let map = EnkfMap {
        context: &context,
        mode: config.mode,
    };
    let mut outcome = run_ies(&map, obs, initial, &config.ies)?;

    let thetas = member_params(&outcome.theta.members, config.mode)?;
    let analysis = analyze_parallel(&context, &thetas)?;

    if let Some(truth) = truth {
        for (record, theta) in outcome
            .diagnostics
            .records
            .iter_mut()
            .zip(outcome.diagnostics.history.iter())
        {
            let states = analyze_parallel(&context, &member_params(theta, config.mode)?)?;
            let mut total = 0.0;
            for col in states.column_iter() {
                total += rmse(col.as_slice(), truth.as_slice())?;
            }
            record.mean_rmse = Some(total / states.ncols() as f64);
            record.spread = Some(ensemble_spread(&states)?);
        }
    }

    Ok(ChopCycleOutcome {
        analysis,
        theta: outcome.theta,
        diagnostics: outcome.diagnostics,
    })
}

fn member_params(theta: &DMatrix<f64>, mode: InflationMode) -> Result<Vec<HyperParams>> {
    theta
        .column_iter()
        .map(|c| HyperParams::from_slice(c.as_slice(), mode))
        .collect()
}

fn analyze_parallel(context: &AnalysisContext<'_>, thetas: &[HyperParams]) -> Result<DMatrix<f64>> {
    let cols: Vec<DVector<f64>> = thetas
        .par_iter()
        .enumerate()
        .map(|(j, t)| context.analyze_member(j, t))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_columns(&cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::ObservationError;
    use approx::assert_relative_eq;

    fn scalar_obs(targets: &[f64]) -> ObservationBatch {
        ObservationBatch::new(
            DVector::from_vec(vec![targets[0]]),
            DMatrix::from_row_slice(1, targets.len(), targets),
            ObservationError::identity(1),
        )
        .unwrap()
    }

    #[test]
    fn gamma_examples() {
        let svd = |v: &[f64]| TruncatedSvd {
            u: DMatrix::identity(v.len(), v.len()),
            singular_values: DVector::from_row_slice(v),
            v: DMatrix::identity(v.len(), v.len()),
            energy_kept: 1.0,
            energy_next: 1.0,
            full_rank: v.len(),
        };
        assert_eq!(gamma_from_alpha(1.0, &svd(&[2.0])), 4.0);
        assert_eq!(gamma_from_alpha(1.0, &svd(&[3.0, 1.0])), 5.0);
        assert_relative_eq!(gamma_from_alpha(0.9, &svd(&[3.0, 1.0])), 4.5, epsilon = 1e-15);
    }

    #[test]
    fn mismatch_examples() {
        let obs = scalar_obs(&[1.0, -1.0]);
        let (m, per) = average_data_mismatch(&obs.perturbed.clone(), &obs).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(per, vec![0.0, 0.0]);
        let (m, _) = average_data_mismatch(&DMatrix::zeros(1, 2), &obs).unwrap();
        assert_eq!(m, 1.0);
    }

    #[test]
    fn scalar_step_moves_halfway() {
        let theta = HyperParamEnsemble::new(
            DMatrix::from_row_slice(1, 2, &[0.0, 2.0]),
            vec![(-10.0, 10.0)],
        )
        .unwrap();
        let predicted = theta.members.clone();
        let obs = scalar_obs(&[1.0, 1.0]);
        let g_mean = DVector::from_vec(vec![1.0]);
        let plan = StepPlan::new(&theta.members, &predicted, &g_mean, &obs, false, 0.99).unwrap();
        assert_relative_eq!(plan.svd.singular_values[0], 2f64.sqrt(), epsilon = 1e-14);
        let gamma = plan.gamma(1.0);
        assert_relative_eq!(gamma, 2.0, epsilon = 1e-14);
        let next = ies_step(&theta, &predicted, &g_mean, &obs, gamma, false).unwrap();
        assert_relative_eq!(next.members[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(next.members[(0, 1)], 1.5, epsilon = 1e-14);
    }

    #[test]
    fn zero_residuals_leave_ensemble_unchanged() {
        let theta = HyperParamEnsemble::new(
            DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 3.0]),
            vec![(-10.0, 10.0)],
        )
        .unwrap();
        let predicted = theta.members.clone();
        let obs = ObservationBatch::new(
            DVector::from_vec(vec![0.0]),
            predicted.clone(),
            ObservationError::identity(1),
        )
        .unwrap();
        let next = ies_step(&theta, &predicted, &DVector::from_vec(vec![4.0 / 3.0]), &obs, 1.0, false).unwrap();
        assert_eq!(next.members, theta.members);
    }

    #[test]
    fn collapsed_ensemble_is_an_error() {
        let theta = HyperParamEnsemble::new(DMatrix::from_element(1, 3, 0.5), vec![(0.0, 1.0)]).unwrap();
        let obs = scalar_obs(&[1.0, 1.0, 1.0]);
        let r = ies_step(&theta, &DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]), &DVector::zeros(1), &obs, 1.0, false);
        assert!(matches!(r, Err(Error::CollapsedEnsemble)));
    }

    #[test]
    fn correlation_taper_examples() {
        assert!(matches!(
            correlation_taper(&DMatrix::zeros(1, 9), &DMatrix::zeros(1, 9)),
            Err(Error::UnsupportedEnsembleSize(9))
        ));
        // perfectly correlated row and a constant row
        let theta = DMatrix::from_fn(2, 12, |s, j| if s == 0 { j as f64 } else { 1.0 });
        let innov = DMatrix::from_fn(1, 12, |_, j| -3.0 * j as f64 + 1.0);
        let t = correlation_taper(&theta, &innov).unwrap();
        assert_relative_eq!(t.taper[(0, 0)], 1.0, epsilon = 1e-12);
        assert_eq!(t.correlation[(1, 0)], 0.0);
        let z = 1.0 / (1.0 - 3.0 / 12f64.sqrt());
        assert_relative_eq!(t.taper[(1, 0)], gaspari_cohn_unchecked(z), epsilon = 1e-15);
    }

    struct Identity;
    impl ForwardMap for Identity {
        fn predict_member(&self, _member: usize, theta: &[f64]) -> Result<DVector<f64>> {
            Ok(DVector::from_column_slice(theta))
        }
        fn predict_at_mean(&self, theta: &[f64]) -> Result<DVector<f64>> {
            Ok(DVector::from_column_slice(theta))
        }
    }

    #[test]
    fn scalar_toy_converges() {
        let obs = scalar_obs(&[1.0, 1.0]);
        let initial = HyperParamEnsemble::new(
            DMatrix::from_row_slice(1, 2, &[0.0, 2.0]),
            vec![(-10.0, 10.0)],
        )
        .unwrap();
        let before = (initial.mean()[0] - 1.0).abs();
        let config = IesConfig {
            localize: false,
            abs_threshold_factor: 0.0,
            ..IesConfig::default()
        };
        let out = run_ies(&Identity, &obs, initial, &config).unwrap();
        // Θ⁰ = {0, 2} already has mean 1; the spread shrinks towards 1
        assert!((out.theta.mean()[0] - 1.0).abs() <= before + 1e-12);
        assert!(out.diagnostics.iterations() <= 10);
        let r = &out.diagnostics.records;
        for w in r.windows(2) {
            if w[1].accepted {
                assert!(w[1].mean_mismatch < w[0].mean_mismatch);
            }
        }
        assert!(r.last().unwrap().mean_mismatch < r[0].mean_mismatch);
    }

    #[test]
    fn abs_threshold_at_start_stops_immediately() {
        let obs = scalar_obs(&[1.0, 1.0]);
        let initial = HyperParamEnsemble::new(
            DMatrix::from_row_slice(1, 2, &[0.9, 1.1]),
            vec![(-10.0, 10.0)],
        )
        .unwrap();
        let config = IesConfig {
            localize: false,
            ..IesConfig::default()
        };
        let out = run_ies(&Identity, &obs, initial.clone(), &config).unwrap();
        assert_eq!(out.diagnostics.stop_reason, StopReason::AbsThreshold);
        assert_eq!(out.diagnostics.iterations(), 0);
        assert_eq!(out.theta, initial);
    }
}

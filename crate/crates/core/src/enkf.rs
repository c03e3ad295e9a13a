//! Stochastic (perturbed-observation) EnKF analysis with covariance inflation
//! and distance-based Gaspari-Cohn localization of the Kalman gain.
//!
//! The analysis is treated as a mapping from hyper-parameters (inflation
//! factor(s) and localization length scale) to an updated ensemble.
//! [`AnalysisContext`] holds everything that does not depend on the
//! hyper-parameters, so that many members can be mapped with their own
//! hyper-parameters against the same background.
//!
//! Gains are evaluated in ensemble space. With `C_m = A Aᵀ`, `Y = H A` and
//! `Ŷ = C_d^{-1/2} Y`, the single-factor gain
//! `C_m Hᵀ (H C_m Hᵀ + C_d/(1+δ)²)^{-1}` equals
//! `A V diag(σ/(σ² + (1+δ)^{-2})) Uᵀ C_d^{-1/2}` for the SVD `Ŷ = U Σ Vᵀ`,
//! and the multi-factor gain `C̃_m Hᵀ (H C̃_m Hᵀ + C_d)^{-1}` equals
//! `Ã (ŶᵀŶ + I)^{-1} Ŷᵀ C_d^{-1/2}` with `Ã = diag(1+δ) A`. `H` is never
//! formed; it is a row selection.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::{ensemble_mean_and_anomalies, gaspari_cohn_unchecked};
use crate::error::{ensure_len, Error, Result};
use crate::observation::{ObservationBatch, ObservationOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InflationMode {
    /// One factor for all state variables.
    Sif,
    /// One factor per state variable.
    Mif,
}

/// Inflation factors `δ`; anomalies are scaled by `1 + δ`.
#[derive(Debug, Clone, PartialEq)]
pub enum InflationSpec {
    Single(f64),
    Multiple(DVector<f64>),
}

impl InflationSpec {
    pub fn mode(&self) -> InflationMode {
        match self {
            InflationSpec::Single(_) => InflationMode::Sif,
            InflationSpec::Multiple(_) => InflationMode::Mif,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = match self {
            InflationSpec::Single(d) => !(*d >= 0.0) || !d.is_finite(),
            InflationSpec::Multiple(v) => v.iter().any(|d| !(*d >= 0.0) || !d.is_finite()),
        };
        if bad {
            return Err(Error::InvalidHyperParameter(
                "inflation factors must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Hyper-parameters of one analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub inflation: InflationSpec,
    pub length_scale: f64,
}

impl HyperParams {
    pub fn sif(delta: f64, length_scale: f64) -> Self {
        Self {
            inflation: InflationSpec::Single(delta),
            length_scale,
        }
    }

    pub fn mif(deltas: DVector<f64>, length_scale: f64) -> Self {
        Self {
            inflation: InflationSpec::Multiple(deltas),
            length_scale,
        }
    }

    /// Unpacks `[δ, λ]` (SIF) or `[δ_1..δ_N, λ]` (MIF).
    pub fn from_slice(theta: &[f64], mode: InflationMode) -> Result<Self> {
        let h = theta.len();
        match mode {
            InflationMode::Sif if h == 2 => Ok(Self::sif(theta[0], theta[1])),
            InflationMode::Mif if h >= 2 => Ok(Self::mif(
                DVector::from_column_slice(&theta[..h - 1]),
                theta[h - 1],
            )),
            _ => Err(Error::InvalidHyperParameter(format!(
                "hyper-parameter vector of length {h} does not fit {mode:?}"
            ))),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = match &self.inflation {
            InflationSpec::Single(d) => vec![*d],
            InflationSpec::Multiple(v) => v.iter().copied().collect(),
        };
        out.push(self.length_scale);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.inflation.validate()?;
        if !(self.length_scale > 0.0) || !self.length_scale.is_finite() {
            return Err(Error::InvalidHyperParameter(format!(
                "length scale must be > 0, got {}",
                self.length_scale
            )));
        }
        Ok(())
    }

    /// Clamps into `bounds`; returns whether anything moved.
    pub fn clamp_to(&mut self, bounds: &HyperParamBounds) -> bool {
        let mut moved = false;
        let mut clamp = |x: &mut f64, (lo, hi): (f64, f64)| {
            let c = if x.is_nan() { lo } else { x.clamp(lo, hi) };
            if c != *x {
                *x = c;
                moved = true;
            }
        };
        match &mut self.inflation {
            InflationSpec::Single(d) => clamp(d, bounds.delta),
            InflationSpec::Multiple(v) => v.iter_mut().for_each(|d| clamp(d, bounds.delta)),
        }
        clamp(&mut self.length_scale, bounds.length_scale);
        moved
    }
}

/// Admissible hyper-parameter box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParamBounds {
    pub delta: (f64, f64),
    pub length_scale: (f64, f64),
}

impl Default for HyperParamBounds {
    fn default() -> Self {
        Self {
            delta: (0.0, 2.0),
            length_scale: (0.05, 1.0),
        }
    }
}

impl HyperParamBounds {
    pub fn validate(&self) -> Result<()> {
        let (dl, dh) = self.delta;
        let (ll, lh) = self.length_scale;
        if !(dl >= 0.0 && dl < dh && ll > 0.0 && ll < lh) {
            return Err(Error::InvalidConfig(format!(
                "invalid hyper-parameter bounds {self:?}"
            )));
        }
        Ok(())
    }

    /// Per-component ranges of the packed hyper-parameter vector.
    pub fn ranges(&self, mode: InflationMode, state_dim: usize) -> Vec<(f64, f64)> {
        let n_delta = match mode {
            InflationMode::Sif => 1,
            InflationMode::Mif => state_dim,
        };
        let mut r = vec![self.delta; n_delta];
        r.push(self.length_scale);
        r
    }
}

/// Normalized ring distance between 1-based model indices `s` and `o`.
pub fn ring_distance(s: usize, o: usize, state_dim: usize) -> f64 {
    let frac = s.abs_diff(o) as f64 / state_dim as f64;
    frac.min(1.0 - frac)
}

/// Distance table `dist[s, t]` (row-major, `N_L x d`) between state variable
/// `s` and the model location of observation `t`.
#[derive(Debug, Clone)]
pub struct DistanceTable {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DistanceTable {
    pub fn new(op: &ObservationOperator) -> Self {
        let n = op.state_dim();
        let d = op.obs_dim();
        let mut values = Vec::with_capacity(n * d);
        for s in 0..n {
            for &o in op.indices() {
                values.push(ring_distance(s + 1, o + 1, n));
            }
        }
        Self {
            rows: n,
            cols: d,
            values,
        }
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.cols..(s + 1) * self.cols]
    }

    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.values[s * self.cols + t]
    }

    /// `(N_L, d)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Localization taper for a given length scale.
#[derive(Debug, Clone)]
pub struct LocalizationField {
    pub length_scale: f64,
    /// `N_L x d`, entries `f_GC(dist_{s,t} / λ)`.
    pub taper: DMatrix<f64>,
}

pub fn taper_matrix(length_scale: f64, op: &ObservationOperator) -> Result<LocalizationField> {
    if !(length_scale > 0.0) {
        return Err(Error::InvalidHyperParameter(format!(
            "length scale must be > 0, got {length_scale}"
        )));
    }
    let dist = DistanceTable::new(op);
    let taper = DMatrix::from_fn(op.state_dim(), op.obs_dim(), |s, t| {
        gaspari_cohn_unchecked(dist.get(s, t) / length_scale)
    });
    Ok(LocalizationField {
        length_scale,
        taper,
    })
}

/// Scales anomalies about the (preserved) ensemble mean by `1 + δ`.
pub fn inflate(ensemble: &DMatrix<f64>, spec: &InflationSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = ensemble.nrows();
    let factors = match spec {
        InflationSpec::Single(d) => DVector::from_element(n, 1.0 + d),
        InflationSpec::Multiple(v) => {
            ensure_len(v.len(), n, "inflation factors")?;
            v.map(|d| 1.0 + d)
        }
    };
    let mean = ensemble.column_sum() / ensemble.ncols() as f64;
    let mut out = ensemble.clone();
    for mut col in out.column_iter_mut() {
        for s in 0..n {
            col[s] = mean[s] + factors[s] * (col[s] - mean[s]);
        }
    }
    Ok(out)
}

/// Which state rows an analysis evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rows {
    All,
    Observed,
}

struct SifFactors {
    /// `A V`, row-major `N_L x k`.
    p: Vec<f64>,
    /// `C_d^{-1/2} U`, row-major `d x k`.
    q: Vec<f64>,
    sigma: Vec<f64>,
}

/// Hyper-parameter-independent pieces of one analysis.
pub struct AnalysisContext<'a> {
    op: &'a ObservationOperator,
    obs: &'a ObservationBatch,
    background: &'a DMatrix<f64>,
    mean: DVector<f64>,
    /// `(m_j - m̄)/sqrt(N_e - 1)`, `N_L x N_e`.
    anomalies: DMatrix<f64>,
    /// `C_d^{-1/2} H A`, `d x N_e`.
    obs_anomalies: DMatrix<f64>,
    sif: SifFactors,
    dist: DistanceTable,
    bounds: Option<HyperParamBounds>,
    clamp_events: AtomicUsize,
}

impl<'a> AnalysisContext<'a> {
    pub fn new(background: &'a DMatrix<f64>, obs: &'a ObservationBatch, op: &'a ObservationOperator) -> Result<Self> {
        ensure_len(background.nrows(), op.state_dim(), "background state dimension")?;
        ensure_len(obs.obs_dim(), op.obs_dim(), "observation dimension")?;
        ensure_len(obs.ensemble_size(), background.ncols(), "perturbed observation count")?;
        let (mean, anomalies) = ensemble_mean_and_anomalies(background)?;
        let anomalies = anomalies.into_inner();
        let obs_anomalies = obs
            .error
            .whiten(&op.apply_ensemble(&anomalies))
            .map_err(|e| Error::LinearSolve(e.to_string()))?;

        let svd = obs_anomalies.clone().svd(true, true);
        let u = svd.u.expect("requested U");
        let v = svd.v_t.expect("requested Vt").transpose();
        let k = svd.singular_values.len();
        let av = &anomalies * &v;
        let wu = obs
            .error
            .whiten(&u)
            .map_err(|e| Error::LinearSolve(e.to_string()))?;
        let sif = SifFactors {
            p: row_major(&av),
            q: row_major(&wu),
            sigma: svd.singular_values.iter().copied().collect(),
        };
        debug_assert_eq!(sif.sigma.len(), k);

        Ok(Self {
            op,
            obs,
            background,
            mean,
            anomalies,
            obs_anomalies,
            sif,
            dist: DistanceTable::new(op),
            bounds: None,
            clamp_events: AtomicUsize::new(0),
        })
    }

    /// Out-of-range hyper-parameters are clamped into `bounds` (and counted)
    /// instead of rejected.
    pub fn with_bounds(mut self, bounds: HyperParamBounds) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn clamp_events(&self) -> usize {
        self.clamp_events.load(Ordering::Relaxed)
    }

    pub fn ensemble_size(&self) -> usize {
        self.background.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.background.nrows()
    }

    pub fn operator(&self) -> &ObservationOperator {
        self.op
    }

    pub fn observations(&self) -> &ObservationBatch {
        self.obs
    }

    pub fn background(&self) -> &DMatrix<f64> {
        self.background
    }

    fn admit<'t>(&self, theta: &'t HyperParams) -> Result<std::borrow::Cow<'t, HyperParams>> {
        let mut theta = std::borrow::Cow::Borrowed(theta);
        if let Some(bounds) = &self.bounds {
            let mut owned = theta.clone().into_owned();
            if owned.clamp_to(bounds) {
                self.clamp_events.fetch_add(1, Ordering::Relaxed);
                log::debug!("clamped hyper-parameters into {bounds:?}");
                theta = std::borrow::Cow::Owned(owned);
            }
        }
        theta.validate()?;
        if let InflationSpec::Multiple(v) = &theta.inflation {
            ensure_len(v.len(), self.state_dim(), "inflation factors")?;
        }
        Ok(theta)
    }

    fn inflation_factors(&self, spec: &InflationSpec) -> DVector<f64> {
        match spec {
            InflationSpec::Single(d) => DVector::from_element(self.state_dim(), 1.0 + d),
            InflationSpec::Multiple(v) => v.map(|d| 1.0 + d),
        }
    }

    /// Inflated background member `m̄ + (1+δ)∘(m_j - m̄)`.
    fn inflated_member(&self, j: usize, factors: &DVector<f64>) -> DVector<f64> {
        let scale = ((self.ensemble_size() - 1) as f64).sqrt();
        let a = self.anomalies.column(j);
        DVector::from_fn(self.state_dim(), |s, _| {
            self.mean[s] + factors[s] * scale * a[s]
        })
    }

    /// Analysis of member `j` under its own hyper-parameters.
    pub fn analyze_member(&self, j: usize, theta: &HyperParams) -> Result<DVector<f64>> {
        self.member_update(j, theta, Rows::All)
    }

    /// `H` applied to the analysis of member `j`.
    pub fn predict_member(&self, j: usize, theta: &HyperParams) -> Result<DVector<f64>> {
        self.member_update(j, theta, Rows::Observed)
    }

    fn member_update(&self, j: usize, theta: &HyperParams, rows: Rows) -> Result<DVector<f64>> {
        if j >= self.ensemble_size() {
            return Err(Error::InvalidDimension(format!("member {j} out of range")));
        }
        let theta = self.admit(theta)?;
        let factors = self.inflation_factors(&theta.inflation);
        let inflated = self.inflated_member(j, &factors);
        let predicted = self.op.apply(&inflated);
        let innovation = self.obs.perturbed.column(j) - predicted;
        self.update_from(&inflated, &innovation, &theta, &factors, rows)
    }

    /// `H` applied to the update of the background mean with the mean
    /// perturbed observation. The update is affine in the member and its
    /// observation, so this equals the member average of
    /// [`Self::predict_member`] under a shared `theta`.
    pub fn predict_mean(&self, theta: &HyperParams) -> Result<DVector<f64>> {
        let theta = self.admit(theta)?;
        let factors = self.inflation_factors(&theta.inflation);
        let mean_obs = self.obs.perturbed.column_sum() / self.ensemble_size() as f64;
        let innovation = mean_obs - self.op.apply(&self.mean);
        self.update_from(&self.mean, &innovation, &theta, &factors, Rows::Observed)
    }

    fn update_from(
        &self,
        inflated: &DVector<f64>,
        innovation: &DVector<f64>,
        theta: &HyperParams,
        factors: &DVector<f64>,
        rows: Rows,
    ) -> Result<DVector<f64>> {
        let row_ids: Vec<usize> = match rows {
            Rows::All => (0..self.state_dim()).collect(),
            Rows::Observed => self.op.indices().to_vec(),
        };
        let increment = match &theta.inflation {
            InflationSpec::Single(delta) => {
                self.sif_increment(*delta, theta.length_scale, innovation, &row_ids)
            }
            InflationSpec::Multiple(_) => {
                self.mif_increment(factors, theta.length_scale, innovation, &row_ids)?
            }
        };
        Ok(DVector::from_iterator(
            row_ids.len(),
            row_ids
                .iter()
                .zip(increment.iter())
                .map(|(&s, inc)| inflated[s] + inc),
        ))
    }

    /// `[(L ∘ G) v]_s` for the single-factor gain.
    fn sif_increment(&self, delta: f64, length_scale: f64, v: &DVector<f64>, rows: &[usize]) -> Vec<f64> {
        let k = self.sif.sigma.len();
        let inv_s = 1.0 / ((1.0 + delta) * (1.0 + delta));
        let f: Vec<f64> = self
            .sif
            .sigma
            .iter()
            .map(|&s| s / (s * s + inv_s))
            .collect();
        let support = 2.0 * length_scale;
        let mut acc = vec![0.0; k];
        rows.iter()
            .map(|&s| {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (t, &dist) in self.dist.row(s).iter().enumerate() {
                    if dist >= support {
                        continue;
                    }
                    let c = gaspari_cohn_unchecked(dist / length_scale) * v[t];
                    let q = &self.sif.q[t * k..(t + 1) * k];
                    for (a, qv) in acc.iter_mut().zip(q) {
                        *a += c * qv;
                    }
                }
                let p = &self.sif.p[s * k..(s + 1) * k];
                p.iter()
                    .zip(&f)
                    .zip(&acc)
                    .map(|((p, f), a)| p * f * a)
                    .sum()
            })
            .collect()
    }

    /// `Z = (ŶᵀŶ + I)^{-1} Ŷᵀ C_d^{-1/2}` for inflation factors `factors`,
    /// returned row-major by observation (`d x N_e`).
    fn mif_z(&self, factors: &DVector<f64>) -> Result<DMatrix<f64>> {
        let idx = self.op.indices();
        let scaled = DMatrix::from_fn(self.op.obs_dim(), self.ensemble_size(), |t, k| {
            factors[idx[t]] * self.unwhitened_obs_anomaly(t, k)
        });
        let yhat = self
            .obs
            .error
            .whiten(&scaled)
            .map_err(|e| Error::LinearSolve(e.to_string()))?;
        let mut m = yhat.transpose() * &yhat;
        for i in 0..m.nrows() {
            m[(i, i)] += 1.0;
        }
        // Ŷᵀ C_d^{-1/2} = (C_d^{-1/2} Ŷ)ᵀ for symmetric C_d^{-1/2}
        let rhs = self
            .obs
            .error
            .whiten(&yhat)
            .map_err(|e| Error::LinearSolve(e.to_string()))?
            .transpose();
        let z = solve_spd(m, rhs)?;
        Ok(z.transpose())
    }

    fn unwhitened_obs_anomaly(&self, t: usize, k: usize) -> f64 {
        self.anomalies[(self.op.indices()[t], k)]
    }

    /// `[(L ∘ G) v]_s` for the multi-factor gain `Ã Z`.
    fn mif_increment(&self, factors: &DVector<f64>, length_scale: f64, v: &DVector<f64>, rows: &[usize]) -> Result<Vec<f64>> {
        let zt = self.mif_z(factors)?; // d x N_e
        let n_e = self.ensemble_size();
        let zt = row_major(&zt);
        let support = 2.0 * length_scale;
        let mut acc = vec![0.0; n_e];
        Ok(rows
            .iter()
            .map(|&s| {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (t, &dist) in self.dist.row(s).iter().enumerate() {
                    if dist >= support {
                        continue;
                    }
                    let c = gaspari_cohn_unchecked(dist / length_scale) * v[t];
                    let z = &zt[t * n_e..(t + 1) * n_e];
                    for (a, zv) in acc.iter_mut().zip(z) {
                        *a += c * zv;
                    }
                }
                let a_row = self.anomalies.row(s);
                factors[s] * a_row.iter().zip(&acc).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect())
    }

    /// Localized gain `L(λ) ∘ G(δ)` (`N_L x d`).
    pub fn localized_gain(&self, theta: &HyperParams) -> Result<DMatrix<f64>> {
        let theta = self.admit(theta)?;
        let n = self.state_dim();
        let d = self.op.obs_dim();
        let mut gain = match &theta.inflation {
            InflationSpec::Single(delta) => {
                let k = self.sif.sigma.len();
                let inv_s = 1.0 / ((1.0 + delta) * (1.0 + delta));
                let p = DMatrix::from_row_slice(n, k, &self.sif.p);
                let q = DMatrix::from_row_slice(d, k, &self.sif.q);
                let f = DVector::from_iterator(k, self.sif.sigma.iter().map(|&s| s / (s * s + inv_s)));
                p * DMatrix::from_diagonal(&f) * q.transpose()
            }
            InflationSpec::Multiple(_) => {
                let factors = self.inflation_factors(&theta.inflation);
                let mut a = self.anomalies.clone();
                for (s, mut row) in a.row_iter_mut().enumerate() {
                    row *= factors[s];
                }
                a * self.mif_z(&factors)?.transpose()
            }
        };
        for s in 0..n {
            for t in 0..d {
                gain[(s, t)] *= gaspari_cohn_unchecked(self.dist.get(s, t) / theta.length_scale);
            }
        }
        Ok(gain)
    }

    /// Analysis of every member under shared hyper-parameters.
    pub fn analyze_shared(&self, theta: &HyperParams) -> Result<DMatrix<f64>> {
        let theta = self.admit(theta)?;
        let gain = self.localized_gain(&theta)?;
        let inflated = inflate(self.background, &theta.inflation)?;
        let innovations = &self.obs.perturbed - self.op.apply_ensemble(&inflated);
        Ok(inflated + gain * innovations)
    }

    /// Analysis of every member, member `j` under `thetas[j]`.
    pub fn analyze_members(&self, thetas: &[HyperParams]) -> Result<DMatrix<f64>> {
        ensure_len(thetas.len(), self.ensemble_size(), "hyper-parameter members")?;
        let mut out = DMatrix::zeros(self.state_dim(), self.ensemble_size());
        for (j, theta) in thetas.iter().enumerate() {
            out.set_column(j, &self.analyze_member(j, theta)?);
        }
        Ok(out)
    }

    /// Whitened observation anomalies `C_d^{-1/2} H A`.
    pub fn whitened_obs_anomalies(&self) -> &DMatrix<f64> {
        &self.obs_anomalies
    }
}

/// EnKF analysis of the whole ensemble under one set of hyper-parameters.
/// Non-finite output is returned as-is; callers decide about divergence.
pub fn enkf_analysis(
    background: &DMatrix<f64>,
    obs: &ObservationBatch,
    op: &ObservationOperator,
    theta: &HyperParams,
) -> Result<DMatrix<f64>> {
    theta.validate()?;
    AnalysisContext::new(background, obs, op)?.analyze_shared(theta)
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Solves `m x = rhs` for symmetric positive-definite `m`, falling back to an
/// SVD pseudo-inverse when Cholesky fails.
fn solve_spd(m: DMatrix<f64>, rhs: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.solve(&rhs));
    }
    log::debug!("Cholesky failed; using pseudo-inverse");
    let svd = m.svd(true, true);
    let eps = 1e-12 * svd.singular_values.amax();
    svd.solve(&rhs, eps)
        .map_err(|e| Error::LinearSolve(e.to_string()))
}

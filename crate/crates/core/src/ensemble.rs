//! Numerical kernels shared by the filter and the smoother: ensemble
//! statistics, anomaly square roots, the truncated SVD, the Gaspari-Cohn
//! taper, Latin hypercube sampling and Gaussian sampling through a symmetric
//! square root.
//!
//! Ensembles are stored column-wise: an `n x N_e` matrix holds one member per
//! column.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Fraction of the singular-value sum retained by [`truncated_svd_99`].
pub const TSVD_ENERGY_FRACTION: f64 = 0.99;

/// Ensemble anomalies `(member - mean) / sqrt(N_e - 1)`, one member per column.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMatrix(pub DMatrix<f64>);

impl AnomalyMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// `A Aᵀ`, the sample covariance of the underlying ensemble.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.0 * self.0.transpose()
    }
}

/// Leading singular triplets kept under the 99% cumulative rule.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// `d x r`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Length `r`, strictly positive, non-increasing.
    pub singular_values: DVector<f64>,
    /// `N_e x r`, orthonormal columns.
    pub v: DMatrix<f64>,
    /// Cumulative fraction `sum_{l<=r} s_l / sum_l s_l`.
    pub energy_kept: f64,
    /// Cumulative fraction with one more value kept (1 when none is left).
    pub energy_next: f64,
    /// Number of numerically nonzero singular values before truncation (`R`).
    pub full_rank: usize,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.singular_values) * self.v.transpose()
    }
}

/// Row-wise mean and scaled anomalies of a column ensemble.
pub fn ensemble_mean_and_anomalies(ensemble: &DMatrix<f64>) -> Result<(DVector<f64>, AnomalyMatrix)> {
    let n_e = ensemble.ncols();
    if n_e < 2 {
        return Err(Error::DegenerateEnsemble(format!(
            "need at least 2 members, got {n_e}"
        )));
    }
    let mean = ensemble_mean(ensemble);
    let scale = 1.0 / ((n_e - 1) as f64).sqrt();
    let mut anomalies = ensemble.clone();
    for mut col in anomalies.column_iter_mut() {
        col -= &mean;
        col *= scale;
    }
    Ok((mean, AnomalyMatrix(anomalies)))
}

pub fn ensemble_mean(ensemble: &DMatrix<f64>) -> DVector<f64> {
    let n_e = ensemble.ncols().max(1) as f64;
    ensemble.column_sum() / n_e
}

/// Truncated SVD keeping the leading `r` singular values, where `r` is the
/// largest count whose cumulative fraction of the singular-value sum stays at
/// or below 99% (never less than one).
pub fn truncated_svd_99(matrix: &DMatrix<f64>) -> Result<TruncatedSvd> {
    truncated_svd(matrix, TSVD_ENERGY_FRACTION)
}

pub fn truncated_svd(matrix: &DMatrix<f64>, fraction: f64) -> Result<TruncatedSvd> {
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateMatrix("matrix has non-finite entries".into()));
    }
    if matrix.iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateMatrix("matrix is all zeros".into()));
    }
    let svd = matrix.clone().svd(true, true);
    let u_full = svd.u.expect("requested U");
    let vt_full = svd.v_t.expect("requested Vt");
    let values = svd.singular_values;

    // numerical rank: values below the usual SVD round-off level count as zero
    let tol = values.max() * matrix.nrows().max(matrix.ncols()) as f64 * f64::EPSILON;
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| values[i] > tol).collect();
    // stable: ties keep input order
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));

    let total: f64 = values.iter().sum();
    let mut cumulative = 0.0;
    let mut r = 0;
    for (k, &idx) in order.iter().enumerate() {
        cumulative += values[idx];
        if cumulative / total <= fraction {
            r = k + 1;
        } else {
            break;
        }
    }
    let r = r.max(1);
    let kept: f64 = order[..r].iter().map(|&i| values[i]).sum();
    let next = order.get(r).map_or(total, |&i| kept + values[i]);

    let d = matrix.nrows();
    let n = matrix.ncols();
    let mut u = DMatrix::zeros(d, r);
    let mut v = DMatrix::zeros(n, r);
    let mut s = DVector::zeros(r);
    for (k, &idx) in order[..r].iter().enumerate() {
        u.set_column(k, &u_full.column(idx));
        v.set_column(k, &vt_full.row(idx).transpose());
        s[k] = values[idx];
    }
    Ok(TruncatedSvd {
        u,
        singular_values: s,
        v,
        energy_kept: kept / total,
        energy_next: next / total,
        full_rank: order.len(),
    })
}

/// Compactly supported fifth-order correlation function of Gaspari and Cohn.
pub fn gaspari_cohn(z: f64) -> Result<f64> {
    if !(z >= 0.0) {
        return Err(Error::Domain(format!("Gaspari-Cohn argument must be >= 0, got {z}")));
    }
    Ok(gaspari_cohn_unchecked(z))
}

#[inline]
pub(crate) fn gaspari_cohn_unchecked(z: f64) -> f64 {
    if z <= 1.0 {
        let z2 = z * z;
        let z3 = z2 * z;
        -0.25 * z3 * z2 + 0.5 * z2 * z2 + 0.625 * z3 - (5.0 / 3.0) * z2 + 1.0
    } else if z <= 2.0 {
        let z2 = z * z;
        let z3 = z2 * z;
        // non-negative in exact arithmetic; rounding near z = 2 is not
        ((1.0 / 12.0) * z3 * z2 - 0.5 * z2 * z2 + 0.625 * z3 + (5.0 / 3.0) * z2 - 5.0 * z + 4.0
            - (2.0 / 3.0) / z)
            .max(0.0)
    } else {
        0.0
    }
}

/// Latin hypercube sample: returns `ranges.len() x n` with one draw per
/// equal-width stratum in every dimension, strata permuted independently.
pub fn latin_hypercube(ranges: &[(f64, f64)], n: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    latin_hypercube_with(ranges, n, &mut rng)
}

pub fn latin_hypercube_with<R: Rng + ?Sized>(
    ranges: &[(f64, f64)],
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if ranges.is_empty() {
        return Err(Error::InvalidConfig("latin hypercube needs at least one range".into()));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("latin hypercube needs at least one sample".into()));
    }
    if let Some((lo, hi)) = ranges.iter().find(|(lo, hi)| !(lo < hi)) {
        return Err(Error::InvalidConfig(format!("empty range [{lo}, {hi}]")));
    }
    let mut out = DMatrix::zeros(ranges.len(), n);
    let mut strata: Vec<usize> = (0..n).collect();
    for (dim, &(lo, hi)) in ranges.iter().enumerate() {
        strata.shuffle(rng);
        let width = (hi - lo) / n as f64;
        for (j, &k) in strata.iter().enumerate() {
            let u: f64 = rng.gen();
            out[(dim, j)] = (lo + (k as f64 + u) * width).min(hi);
        }
    }
    Ok(out)
}

/// Draws from `N(mean, cov)` through `Q sqrt(max(Λ, 0))` of the symmetric
/// eigendecomposition `cov = Q Λ Qᵀ`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    sqrt: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: cov.nrows(),
                context: "covariance size",
            });
        }
        Ok(Self {
            mean,
            sqrt: symmetric_sqrt_factor(cov)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = standard_normal_vector(self.sqrt.ncols(), rng);
        &self.mean + &self.sqrt * z
    }

    /// `dim x n` matrix of independent draws.
    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let z = DMatrix::from_fn(self.sqrt.ncols(), n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut out = &self.sqrt * z;
        for mut col in out.column_iter_mut() {
            col += &self.mean;
        }
        out
    }
}

/// `F` with `F Fᵀ = cov`, negative eigenvalues clamped to zero.
pub fn symmetric_sqrt_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(Error::Factorization("covariance has non-finite entries".into()));
    }
    let eig = SymmetricEigen::new(cov.clone());
    let mut factor = eig.eigenvectors;
    for (k, mut col) in factor.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[k].max(0.0).sqrt();
    }
    Ok(factor)
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Pearson correlation of two equally long samples; zero when either has no
/// variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

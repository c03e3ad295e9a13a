//! Index-extraction observation operator on the Lorenz-96 ring, observation
//! noise and per-member perturbed observations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_len, Error, Result};

/// Observes `x_1, x_{1+Δn}, x_{1+2Δn}, ...` (1-based model indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationOperator {
    state_dim: usize,
    increment: usize,
    /// 0-based model indices.
    indices: Vec<usize>,
}

impl ObservationOperator {
    pub fn new(state_dim: usize, increment: usize) -> Result<Self> {
        if increment < 1 || increment > state_dim {
            return Err(Error::InvalidConfig(format!(
                "observation increment must lie in [1, {state_dim}], got {increment}"
            )));
        }
        let indices = (0..state_dim).step_by(increment).collect();
        Ok(Self {
            state_dim,
            increment,
            indices,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn increment(&self) -> usize {
        self.increment
    }

    /// Number of observations `d`.
    pub fn obs_dim(&self) -> usize {
        self.indices.len()
    }

    /// 0-based model index observed by each observation component.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// 1-based model location `o = 1 + (t - 1) Δn` of 1-based observation `t`.
    pub fn location(&self, t: usize) -> usize {
        1 + (t - 1) * self.increment
    }

    pub fn apply(&self, state: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.obs_dim(), self.indices.iter().map(|&i| state[i]))
    }

    pub fn apply_slice(&self, state: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.obs_dim(), self.indices.iter().map(|&i| state[i]))
    }

    /// `H X` for a column ensemble, by row selection.
    pub fn apply_ensemble(&self, ensemble: &DMatrix<f64>) -> DMatrix<f64> {
        ensemble.select_rows(self.indices.iter())
    }
}

pub fn build_operator(state_dim: usize, increment: usize) -> Result<ObservationOperator> {
    ObservationOperator::new(state_dim, increment)
}

/// Observation-error covariance with its square-root factors.
#[derive(Debug, Clone)]
pub struct ObservationError {
    cov: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    inv_sqrt: Option<DMatrix<f64>>,
    /// Diagonal of `C_d^{-1/2}` when `C_d` is diagonal.
    inv_sqrt_diag: Option<DVector<f64>>,
}

impl ObservationError {
    pub fn identity(d: usize) -> Self {
        Self::diagonal(DVector::from_element(d, 1.0)).expect("unit variances")
    }

    pub fn diagonal(variances: DVector<f64>) -> Result<Self> {
        if variances.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Factorization(
                "observation variances must be finite and >= 0".into(),
            ));
        }
        let sqrt = DMatrix::from_diagonal(&variances.map(f64::sqrt));
        let (inv_sqrt, inv_sqrt_diag) = if variances.iter().all(|&v| v > 0.0) {
            let diag = variances.map(|v| 1.0 / v.sqrt());
            (Some(DMatrix::from_diagonal(&diag)), Some(diag))
        } else {
            (None, None)
        };
        Ok(Self {
            cov: DMatrix::from_diagonal(&variances),
            sqrt,
            inv_sqrt,
            inv_sqrt_diag,
        })
    }

    /// General symmetric covariance through its eigendecomposition.
    pub fn general(cov: DMatrix<f64>) -> Result<Self> {
        let d = cov.nrows();
        if cov.ncols() != d {
            return Err(Error::Factorization("observation covariance must be square".into()));
        }
        if cov.iter().any(|x| !x.is_finite()) {
            return Err(Error::Factorization("observation covariance is not finite".into()));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::Factorization("observation covariance is not symmetric".into()));
        }
        let is_diag = (0..d).all(|r| (0..d).all(|c| r == c || cov[(r, c)] == 0.0));
        if is_diag {
            return Self::diagonal(cov.diagonal());
        }
        let eig = SymmetricEigen::new(cov.clone());
        let top = eig.eigenvalues.amax();
        if eig.eigenvalues.iter().any(|&l| l < -1e-10 * top.max(1e-300)) {
            return Err(Error::Factorization(
                "observation covariance is not positive semi-definite".into(),
            ));
        }
        let q = &eig.eigenvectors;
        let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let sqrt = q * DMatrix::from_diagonal(&s) * q.transpose();
        let inv_sqrt = if eig.eigenvalues.iter().all(|&l| l > 0.0) {
            let inv = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
            Some(q * DMatrix::from_diagonal(&inv) * q.transpose())
        } else {
            None
        };
        Ok(Self {
            cov,
            sqrt,
            inv_sqrt,
            inv_sqrt_diag: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Symmetric `C_d^{1/2}`.
    pub fn sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    /// Symmetric `C_d^{-1/2}`; fails for a singular covariance.
    pub fn inv_sqrt(&self) -> Result<&DMatrix<f64>> {
        self.inv_sqrt
            .as_ref()
            .ok_or_else(|| Error::Factorization("observation covariance is singular".into()))
    }

    /// `C_d^{-1/2} x` for a column ensemble or vector.
    pub fn whiten(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if let Some(diag) = &self.inv_sqrt_diag {
            let mut out = x.clone();
            for mut col in out.column_iter_mut() {
                col.component_mul_assign(diag);
            }
            return Ok(out);
        }
        Ok(self.inv_sqrt()? * x)
    }

    pub fn whiten_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if let Some(diag) = &self.inv_sqrt_diag {
            return Ok(x.component_mul(diag));
        }
        Ok(self.inv_sqrt()? * x)
    }

    /// `rᵀ C_d^{-1} r`.
    pub fn weighted_norm_sq(&self, residual: &DVector<f64>) -> Result<f64> {
        Ok(self.whiten_vec(residual)?.norm_squared())
    }

    /// One draw of `N(0, C_d)`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.sqrt * z
    }
}

/// Real observation, its perturbed copies, and the error model.
#[derive(Debug, Clone)]
pub struct ObservationBatch {
    pub observed: DVector<f64>,
    /// `d x N_e`; column `j` is `d°_j`.
    pub perturbed: DMatrix<f64>,
    pub error: ObservationError,
}

impl ObservationBatch {
    pub fn new(observed: DVector<f64>, perturbed: DMatrix<f64>, error: ObservationError) -> Result<Self> {
        ensure_len(perturbed.nrows(), observed.len(), "perturbed observation rows")?;
        ensure_len(error.dim(), observed.len(), "observation error dimension")?;
        Ok(Self {
            observed,
            perturbed,
            error,
        })
    }

    /// Draws `N_e` perturbed copies of `observed` from `N(0, C_d)`.
    pub fn with_perturbations(observed: DVector<f64>, error: ObservationError, n_e: usize, seed: u64) -> Result<Self> {
        let perturbed = perturb_observations(&observed, &error, n_e, seed)?;
        Self::new(observed, perturbed, error)
    }

    pub fn obs_dim(&self) -> usize {
        self.observed.len()
    }

    pub fn ensemble_size(&self) -> usize {
        self.perturbed.ncols()
    }
}

/// `op(state)` plus `N(0, σ² I)` noise drawn from `noise_seed`.
pub fn observe(op: &ObservationOperator, state: &DVector<f64>, noise_std: f64, noise_seed: u64) -> Result<DVector<f64>> {
    ensure_len(state.len(), op.state_dim(), "observed state")?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut y = op.apply(state);
    if noise_std != 0.0 {
        for v in y.iter_mut() {
            *v += noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(y)
}

/// `d°_j = d° + η_j`, `η_j ~ N(0, C_d)` independent over members.
pub fn perturb_observations(
    observed: &DVector<f64>,
    error: &ObservationError,
    n_e: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    ensure_len(error.dim(), observed.len(), "observation error dimension")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(observed.len(), n_e);
    for mut col in out.column_iter_mut() {
        let eta = error.sample_noise(&mut rng);
        col.copy_from(&(observed + eta));
    }
    Ok(out)
}

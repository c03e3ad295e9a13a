//! RMSE, data mismatch and ensemble spread.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::observation::ObservationError;

/// `‖estimate - reference‖₂ / sqrt(m)`.
pub fn rmse(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    ensure_len(estimate.len(), reference.len(), "rmse operands")?;
    if estimate.is_empty() {
        return Err(Error::InvalidDimension("rmse of empty vectors".into()));
    }
    let ss: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / estimate.len() as f64).sqrt())
}

/// `(d° - d_pred)ᵀ C_d^{-1} (d° - d_pred)`.
pub fn data_mismatch(predicted: &DVector<f64>, observed: &DVector<f64>, error: &ObservationError) -> Result<f64> {
    ensure_len(predicted.len(), observed.len(), "data mismatch operands")?;
    ensure_len(error.dim(), observed.len(), "observation error dimension")?;
    error.weighted_norm_sq(&(observed - predicted))
}

/// Root-mean-square of the per-component sample standard deviations
/// (divisor `N_e - 1`).
pub fn ensemble_spread(ensemble: &DMatrix<f64>) -> Result<f64> {
    let n_e = ensemble.ncols();
    if n_e < 2 {
        return Err(Error::DegenerateEnsemble(format!(
            "spread needs at least 2 members, got {n_e}"
        )));
    }
    let m = ensemble.nrows();
    let mut total_var = 0.0;
    for row in ensemble.row_iter() {
        let mean = row.sum() / n_e as f64;
        total_var += row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n_e - 1) as f64;
    }
    Ok((total_var / m as f64).sqrt())
}

/// Statistics of one assimilation cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub time_index: usize,
    /// RMSE of the analysis ensemble mean.
    pub rmse_of_mean: f64,
    /// Average over members of the per-member RMSE.
    pub mean_rmse: f64,
    /// Average over members of the data mismatch against the member's own
    /// perturbed observation.
    pub data_mismatch_mean: f64,
    pub spread: f64,
    /// Outer IES iterations used; zero for fixed hyper-parameters.
    pub iterations: usize,
}

impl CycleMetrics {
    pub fn compute(
        time_index: usize,
        analysis: &DMatrix<f64>,
        truth: &DVector<f64>,
        predicted: &DMatrix<f64>,
        perturbed: &DMatrix<f64>,
        error: &ObservationError,
        iterations: usize,
    ) -> Result<Self> {
        let n_e = analysis.ncols();
        let mean = analysis.column_sum() / n_e as f64;
        let rmse_of_mean = rmse(mean.as_slice(), truth.as_slice())?;
        let mut member_rmse = 0.0;
        for col in analysis.column_iter() {
            member_rmse += rmse(col.as_slice(), truth.as_slice())?;
        }
        let mut mismatch = 0.0;
        for j in 0..n_e {
            mismatch += error.weighted_norm_sq(&(perturbed.column(j) - predicted.column(j)))?;
        }
        Ok(Self {
            time_index,
            rmse_of_mean,
            mean_rmse: member_rmse / n_e as f64,
            data_mismatch_mean: mismatch / n_e as f64,
            spread: ensemble_spread(analysis)?,
            iterations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0; 4], &[0.0; 4]).unwrap(), 1.0);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mismatch_examples() {
        let id = ObservationError::identity(2);
        let d = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(data_mismatch(&d, &d, &id).unwrap(), 0.0);
        assert_eq!(data_mismatch(&DVector::zeros(2), &d, &id).unwrap(), 25.0);
        let diag = ObservationError::diagonal(DVector::from_vec(vec![4.0, 1.0])).unwrap();
        let r = DVector::from_vec(vec![2.0, 1.0]);
        assert_relative_eq!(data_mismatch(&DVector::zeros(2), &r, &diag).unwrap(), 2.0, epsilon = 1e-15);
        let singular = ObservationError::diagonal(DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert!(data_mismatch(&DVector::zeros(2), &r, &singular).is_err());
    }

    #[test]
    fn spread_examples() {
        let same = DMatrix::from_element(3, 4, 2.5);
        assert_eq!(ensemble_spread(&same).unwrap(), 0.0);
        let two = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        assert_relative_eq!(ensemble_spread(&two).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        assert!(ensemble_spread(&DMatrix::zeros(3, 1)).is_err());
    }
}

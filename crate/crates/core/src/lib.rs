//! Ensemble Kalman filtering on the Lorenz-96 model with inflation and
//! localization hyper-parameters tuned every cycle by an iterative ensemble
//! smoother.

pub mod enkf;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod ies;
pub mod l96;
pub mod metrics;
pub mod observation;
pub mod rng;
mod serde_nan;

pub use enkf::{enkf_analysis, AnalysisContext, HyperParamBounds, HyperParams, InflationMode, InflationSpec};
pub use ensemble::{gaspari_cohn, latin_hypercube, truncated_svd_99, GaussianSampler, TruncatedSvd};
pub use error::{Error, Result};
pub use ies::{run_ies, ForwardMap, HyperParamEnsemble, IesConfig, IesDiagnostics, StopReason};
pub use l96::{Climatology, Lorenz96};
pub use metrics::{data_mismatch, ensemble_spread, rmse, CycleMetrics};
pub use observation::{build_operator, ObservationBatch, ObservationError, ObservationOperator};

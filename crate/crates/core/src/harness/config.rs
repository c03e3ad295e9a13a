//! Twin-experiment scenario description, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::enkf::{HyperParamBounds, HyperParams, InflationMode};
use crate::error::{Error, Result};
use crate::ies::IesConfig;
use crate::l96::{ClimatologySpec, DEFAULT_DT, DEFAULT_FORCING};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Fixed `(δ, λ)` EnKF over a grid of cells.
    Grid,
    ChopSif,
    ChopMif,
}

impl Method {
    pub fn inflation_mode(self) -> Option<InflationMode> {
        match self {
            Method::Grid => None,
            Method::ChopSif => Some(InflationMode::Sif),
            Method::ChopMif => Some(InflationMode::Mif),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Grid => "grid",
            Method::ChopSif => "chop-sif",
            Method::ChopMif => "chop-mif",
        }
    }
}

/// Inclusive arithmetic range `start:step:stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridAxis {
    pub fn new(start: f64, stop: f64, step: f64) -> Self {
        Self { start, stop, step }
    }

    /// Grid values, rounded to 1e-10 so that `0.1 + 0.05` prints as `0.15`.
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.stop >= self.start) {
            return Err(Error::InvalidConfig(format!("invalid grid axis {self:?}")));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n)
            .map(|k| ((self.start + k as f64 * self.step) * 1e10).round() / 1e10)
            .collect())
    }
}

/// Full description of a twin experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// `N_L`.
    pub state_dim: usize,
    /// `N_e`.
    pub ensemble_size: usize,
    /// `Δn`.
    pub obs_increment: usize,
    /// `N^freq`: integration steps between observations.
    pub obs_frequency: usize,
    pub window_units: f64,
    pub transition_units: f64,
    pub dt: f64,
    pub forcing: f64,
    pub obs_noise_std: f64,
    pub repetitions: usize,
    pub base_seed: u64,
    pub method: Method,
    pub delta_grid: GridAxis,
    pub length_scale_grid: GridAxis,
    /// Fixed hyper-parameters for a single grid-method run.
    pub fixed_delta: f64,
    pub fixed_length_scale: f64,
    /// Latin-hypercube ranges of the initial hyper-parameter ensemble, also
    /// used as clamping bounds.
    pub lhs_ranges: HyperParamBounds,
    pub ies: IesConfig,
    /// A run diverges when a cycle RMSE exceeds this.
    pub divergence_threshold: f64,
    pub climatology_steps: usize,
    pub climatology_seed: u64,
    pub cache_dir: Option<PathBuf>,
    /// Assimilate at the first instant of the window as well.
    pub assimilate_at_t0: bool,
    /// Cycles (1-based) whose full smoother diagnostics are kept.
    pub diagnostic_cycles: Vec<usize>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "l96-40".into(),
            state_dim: 40,
            ensemble_size: 30,
            obs_increment: 1,
            obs_frequency: 4,
            window_units: 250.0,
            transition_units: 250.0,
            dt: DEFAULT_DT,
            forcing: DEFAULT_FORCING,
            obs_noise_std: 1.0,
            repetitions: 20,
            base_seed: 0,
            method: Method::ChopSif,
            delta_grid: GridAxis::new(0.0, 2.0, 0.05),
            length_scale_grid: GridAxis::new(0.05, 1.0, 0.05),
            fixed_delta: 0.1,
            fixed_length_scale: 0.2,
            lhs_ranges: HyperParamBounds::default(),
            ies: IesConfig::default(),
            divergence_threshold: 1e3,
            climatology_steps: 100_000,
            climatology_seed: 0,
            cache_dir: None,
            assimilate_at_t0: false,
            diagnostic_cycles: Vec::new(),
        }
    }
}

fn steps_of(units: f64, dt: f64, what: &str) -> Result<usize> {
    let steps = units / dt;
    let rounded = steps.round();
    if !(units > 0.0) || (steps - rounded).abs() > 1e-6 * rounded.max(1.0) {
        return Err(Error::InvalidConfig(format!(
            "{what} of {units} time units is not a whole number of steps of {dt}"
        )));
    }
    Ok(rounded as usize)
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim < crate::l96::MIN_DIM {
            return Err(Error::InvalidConfig(format!(
                "state_dim must be >= {}, got {}",
                crate::l96::MIN_DIM,
                self.state_dim
            )));
        }
        if self.ensemble_size < 2 {
            return Err(Error::InvalidConfig("ensemble_size must be >= 2".into()));
        }
        if self.method != Method::Grid && self.ensemble_size <= 9 {
            return Err(Error::UnsupportedEnsembleSize(self.ensemble_size));
        }
        if self.obs_increment < 1 || self.obs_increment > self.state_dim {
            return Err(Error::InvalidConfig(format!(
                "obs_increment must lie in [1, {}]",
                self.state_dim
            )));
        }
        if self.obs_frequency < 1 {
            return Err(Error::InvalidConfig("obs_frequency must be >= 1".into()));
        }
        if self.repetitions < 1 {
            return Err(Error::InvalidConfig("repetitions must be >= 1".into()));
        }
        if !(self.obs_noise_std > 0.0) {
            return Err(Error::InvalidConfig("obs_noise_std must be > 0".into()));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::InvalidConfig("divergence_threshold must be > 0".into()));
        }
        if self.climatology_steps < 10 * self.state_dim {
            return Err(Error::InvalidConfig(format!(
                "climatology_steps must be >= 10 * state_dim = {}",
                10 * self.state_dim
            )));
        }
        let window = self.window_steps()?;
        self.transition_steps()?;
        if window < self.obs_frequency {
            return Err(Error::InvalidConfig(
                "assimilation window shorter than one observation interval".into(),
            ));
        }
        self.delta_grid.values()?;
        self.length_scale_grid.values()?;
        self.lhs_ranges.validate()?;
        self.ies.validate()?;
        self.fixed_params().validate()?;
        Ok(())
    }

    pub fn window_steps(&self) -> Result<usize> {
        steps_of(self.window_units, self.dt, "assimilation window")
    }

    pub fn transition_steps(&self) -> Result<usize> {
        steps_of(self.transition_units, self.dt, "transition window")
    }

    /// Truth-trajectory step indices at which observations are assimilated.
    pub fn assimilation_steps(&self) -> Result<Vec<usize>> {
        let first = if self.assimilate_at_t0 { 0 } else { self.obs_frequency };
        Ok((first..=self.window_steps()?)
            .step_by(self.obs_frequency)
            .collect())
    }

    pub fn obs_dim(&self) -> usize {
        self.state_dim.div_ceil(self.obs_increment)
    }

    pub fn fixed_params(&self) -> HyperParams {
        HyperParams::sif(self.fixed_delta, self.fixed_length_scale)
    }

    pub fn climatology_spec(&self) -> ClimatologySpec {
        ClimatologySpec {
            dim: self.state_dim,
            forcing: self.forcing,
            dt: self.dt,
            n_steps: self.climatology_steps,
            seed: self.climatology_seed,
            burn_in: 0,
        }
    }

    /// Seed of repetition `k`.
    pub fn repetition_seed(&self, k: usize) -> u64 {
        self.base_seed.wrapping_add(k as u64)
    }

    /// `(δ, λ)` cells of the grid search, `δ` outermost.
    pub fn grid_cells(&self) -> Result<Vec<(f64, f64)>> {
        let deltas = self.delta_grid.values()?;
        let lambdas = self.length_scale_grid.values()?;
        Ok(deltas
            .iter()
            .flat_map(|&d| lambdas.iter().map(move |&l| (d, l)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.window_steps().unwrap(), 5000);
        assert_eq!(cfg.transition_steps().unwrap(), 5000);
        let steps = cfg.assimilation_steps().unwrap();
        assert_eq!(steps.len(), 1250);
        assert_eq!(steps[0], 4);
        assert_eq!(*steps.last().unwrap(), 5000);
    }

    #[test]
    fn grid_axes() {
        let d = GridAxis::new(0.0, 2.0, 0.1).values().unwrap();
        assert_eq!(d.len(), 21);
        assert_eq!(d[1], 0.1);
        assert_eq!(d[20], 2.0);
        let fine = GridAxis::new(0.0, 2.0, 0.05).values().unwrap();
        assert!(fine.contains(&0.15));
        assert_eq!(GridAxis::new(0.05, 1.0, 0.05).values().unwrap().len(), 20);
        assert!(GridAxis::new(0.0, 1.0, 0.0).values().is_err());
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = ScenarioConfig {
            method: Method::Grid,
            cache_dir: Some("cache".into()),
            ..ScenarioConfig::default()
        };
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);

        let partial = "name = \"x\"\nobs_increment = 2\nmethod = \"chop-mif\"\n[ies]\nmax_iterations = 3\n";
        let cfg = ScenarioConfig::from_toml_str(partial).unwrap();
        assert_eq!(cfg.obs_increment, 2);
        assert_eq!(cfg.obs_dim(), 20);
        assert_eq!(cfg.method, Method::ChopMif);
        assert_eq!(cfg.ies.max_iterations, 3);
        assert_eq!(cfg.ies.max_trials, 5);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        assert!(ScenarioConfig::from_toml_str("bogus_key = 1").is_err());
        assert!(ScenarioConfig::from_toml_str("window_units = 0.025").is_err());
        assert!(ScenarioConfig::from_toml_str("ensemble_size = 9").is_err());
        assert!(ScenarioConfig::from_toml_str("ensemble_size = 9\nmethod = \"grid\"").is_ok());
        assert!(ScenarioConfig::from_toml_str("repetitions = 0").is_err());
    }
}

//! Lorenz-96 dynamics, fixed-step RK4 integration, long-run climatology and
//! twin-experiment initial conditions.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::GaussianSampler;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_FORCING: f64 = 8.0;
pub const DEFAULT_DT: f64 = 0.05;
pub const MIN_DIM: usize = 4;

/// Model state vector `x_1..x_N`.
pub type ModelState = DVector<f64>;

/// `dx_e/dt = (x_{e+1} - x_{e-2}) x_{e-1} - x_e + F` on a ring.
pub fn l96_tendency(state: &[f64], forcing: f64) -> Result<Vec<f64>> {
    check_dim(state.len())?;
    let mut out = vec![0.0; state.len()];
    tendency_into(state, forcing, &mut out);
    Ok(out)
}

fn check_dim(n: usize) -> Result<()> {
    if n < MIN_DIM {
        return Err(Error::InvalidDimension(format!(
            "Lorenz-96 needs at least {MIN_DIM} variables, got {n}"
        )));
    }
    Ok(())
}

#[inline]
fn tendency_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let n = x.len();
    // wrap-around entries, then the branch-free interior
    for e in [0, 1, n - 1] {
        let xp1 = x[(e + 1) % n];
        let xm1 = x[(e + n - 1) % n];
        let xm2 = x[(e + n - 2) % n];
        out[e] = (xp1 - xm2) * xm1 - x[e] + forcing;
    }
    for e in 2..n - 1 {
        out[e] = (x[e + 1] - x[e - 2]) * x[e - 1] - x[e] + forcing;
    }
}

/// Fixed-step RK4 integrator with reusable stage buffers.
#[derive(Debug, Clone)]
pub struct Lorenz96 {
    dim: usize,
    forcing: f64,
    dt: f64,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Lorenz96 {
    pub fn new(dim: usize, forcing: f64, dt: f64) -> Result<Self> {
        check_dim(dim)?;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidConfig(format!("time step must be > 0, got {dt}")));
        }
        Ok(Self {
            dim,
            forcing,
            dt,
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forcing(&self) -> f64 {
        self.forcing
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// One classical RK4 step in place. Does not check finiteness.
    pub fn step_in_place(&mut self, x: &mut [f64]) {
        let (h, f) = (self.dt, self.forcing);
        tendency_into(x, f, &mut self.k1);
        for i in 0..self.dim {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        tendency_into(&self.tmp, f, &mut self.k2);
        for i in 0..self.dim {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        tendency_into(&self.tmp, f, &mut self.k3);
        for i in 0..self.dim {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        tendency_into(&self.tmp, f, &mut self.k4);
        for i in 0..self.dim {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }

    /// Advances `steps` RK4 steps; errors when the state leaves the finite range.
    pub fn integrate(&mut self, x: &mut [f64], steps: usize) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
                context: "model state",
            });
        }
        for s in 0..steps {
            self.step_in_place(x);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationOverflow { step: s + 1 });
            }
        }
        Ok(())
    }

    /// Integrates every column of an ensemble.
    pub fn forecast_ensemble(&mut self, ensemble: &mut DMatrix<f64>, steps: usize) -> Result<()> {
        for mut col in ensemble.column_iter_mut() {
            let slice = col.as_mut_slice();
            self.integrate(slice, steps)?;
        }
        Ok(())
    }
}

/// One RK4 step returning a new state.
pub fn rk4_step(state: &ModelState, dt: f64, forcing: f64) -> Result<ModelState> {
    let mut model = Lorenz96::new(state.len(), forcing, dt)?;
    let mut x = state.clone();
    model.integrate(x.as_mut_slice(), 1)?;
    Ok(x)
}

/// Long-run temporal mean and covariance of the attractor.
#[derive(Debug, Clone)]
pub struct Climatology {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Settings of a climatology run; also the cache key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClimatologySpec {
    pub dim: usize,
    pub forcing: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub seed: u64,
    pub burn_in: usize,
}

impl ClimatologySpec {
    pub fn new(dim: usize, n_steps: usize) -> Self {
        Self {
            dim,
            forcing: DEFAULT_FORCING,
            dt: DEFAULT_DT,
            n_steps,
            seed: 0,
            burn_in: 0,
        }
    }

    pub fn cache_file_name(&self) -> String {
        format!(
            "l96_clim_n{}_f{}_dt{}_steps{}_seed{}_burn{}.bin",
            self.dim, self.forcing, self.dt, self.n_steps, self.seed, self.burn_in
        )
    }

    /// Start state: `F` everywhere with `+0.01` on the first component. A
    /// nonzero seed adds an independent `N(0, 0.01²)` jitter to every component.
    pub fn initial_state(&self) -> Vec<f64> {
        let mut x = vec![self.forcing; self.dim];
        x[0] += 0.01;
        if self.seed != 0 {
            let mut rng = stream_rng(self.seed, Stream::Climatology);
            for v in x.iter_mut() {
                *v += 0.01 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        x
    }
}

const BLOCK: usize = 256;

pub fn simulate_climatology(n_steps: usize, dt: f64, forcing: f64, dim: usize, seed: u64) -> Result<Climatology> {
    let spec = ClimatologySpec {
        dim,
        forcing,
        dt,
        n_steps,
        seed,
        burn_in: 0,
    };
    simulate_climatology_spec(&spec)
}

/// Integrates from [`ClimatologySpec::initial_state`] and accumulates the
/// state after every one of `n_steps` steps (after an optional burn-in).
pub fn simulate_climatology_spec(spec: &ClimatologySpec) -> Result<Climatology> {
    let n = spec.dim;
    if spec.n_steps < 2 {
        return Err(Error::InvalidConfig("climatology needs at least 2 steps".into()));
    }
    let mut model = Lorenz96::new(n, spec.forcing, spec.dt)?;
    let mut x = spec.initial_state();
    model.integrate(&mut x, spec.burn_in)?;

    // shifted accumulation, shift = first collected state
    let mut shift: Option<DVector<f64>> = None;
    let mut sum = DVector::<f64>::zeros(n);
    let mut outer = DMatrix::<f64>::zeros(n, n);
    let mut block = DMatrix::<f64>::zeros(n, BLOCK);
    let mut filled = 0;

    let flush = |block: &DMatrix<f64>, filled: usize, outer: &mut DMatrix<f64>| {
        let b = block.columns(0, filled);
        outer.gemm(1.0, &b, &b.transpose(), 1.0);
    };

    for step in 0..spec.n_steps {
        model.step_in_place(&mut x);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationOverflow {
                step: spec.burn_in + step + 1,
            });
        }
        let xv = DVector::from_column_slice(&x);
        let s = shift.get_or_insert_with(|| xv.clone());
        let centered = &xv - &*s;
        sum += &centered;
        block.set_column(filled, &centered);
        filled += 1;
        if filled == BLOCK {
            flush(&block, filled, &mut outer);
            filled = 0;
        }
    }
    if filled > 0 {
        flush(&block, filled, &mut outer);
    }

    let count = spec.n_steps as f64;
    let shift = shift.expect("at least one step");
    let centered_mean = &sum / count;
    let mean = &shift + &centered_mean;
    let cov = (outer - &centered_mean * centered_mean.transpose() * count) / (count - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(Climatology {
        mean,
        covariance: cov,
    })
}

impl Climatology {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sampler(&self) -> Result<GaussianSampler> {
        GaussianSampler::new(self.mean.clone(), &self.covariance)
    }

    /// Binary layout: `b"L96CLIM1"`, `u64` LE dimension, mean (`n` LE `f64`),
    /// covariance row-major (`n*n` LE `f64`).
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let n = self.dim();
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(MAGIC)?;
        write(&(n as u64).to_le_bytes())?;
        for v in self.mean.iter() {
            write(&v.to_le_bytes())?;
        }
        for r in 0..n {
            for c in 0..n {
                write(&self.covariance[(r, c)].to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(Error::ConfigParse(format!(
                "{} is not a climatology file",
                path.display()
            )));
        }
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        let n = u64::from_le_bytes(buf) as usize;
        let mut next = || -> Result<f64> {
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            Ok(f64::from_le_bytes(buf))
        };
        let mut mean = DVector::zeros(n);
        for i in 0..n {
            mean[i] = next()?;
        }
        let mut covariance = DMatrix::zeros(n, n);
        for row in 0..n {
            for col in 0..n {
                covariance[(row, col)] = next()?;
            }
        }
        Ok(Self { mean, covariance })
    }
}

const MAGIC: &[u8; 8] = b"L96CLIM1";

/// Loads the climatology for `spec` from `cache_dir`, computing and storing it
/// on a miss. Without a cache directory it is always recomputed.
pub fn cached_climatology(spec: &ClimatologySpec, cache_dir: Option<&Path>) -> Result<Climatology> {
    let Some(dir) = cache_dir else {
        return simulate_climatology_spec(spec);
    };
    let path: PathBuf = dir.join(spec.cache_file_name());
    if path.exists() {
        if let Ok(c) = Climatology::read(&path) {
            if c.dim() == spec.dim {
                return Ok(c);
            }
        }
        log::warn!("ignoring unreadable climatology cache {}", path.display());
    }
    let clim = simulate_climatology_spec(spec)?;
    // write to a temp name first so concurrent runs never read a partial file
    let tmp = dir.join(format!("{}.{}.tmp", spec.cache_file_name(), std::process::id()));
    clim.write(&tmp)?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(clim)
}

/// Reference trajectory (`dim x (window_steps + 1)`, column 0 = start of the
/// assimilation window) and the initial background ensemble (`dim x n_e`).
#[derive(Debug, Clone)]
pub struct TwinSetup {
    pub truth: DMatrix<f64>,
    pub background: DMatrix<f64>,
}

pub fn generate_truth_and_background(
    sampler: &GaussianSampler,
    model: &mut Lorenz96,
    transition_steps: usize,
    window_steps: usize,
    n_e: usize,
    seed: u64,
) -> Result<TwinSetup> {
    if transition_steps == 0 || window_steps == 0 {
        return Err(Error::InvalidConfig(
            "transition and window lengths must be positive".into(),
        ));
    }
    if sampler.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: sampler.dim(),
            context: "climatology dimension",
        });
    }
    let mut truth_rng = stream_rng(seed, Stream::Truth);
    let mut x0 = sampler.sample(&mut truth_rng);
    model.integrate(x0.as_mut_slice(), transition_steps)?;

    let n = model.dim();
    let mut truth = DMatrix::zeros(n, window_steps + 1);
    truth.set_column(0, &x0);
    let mut x = x0;
    for step in 1..=window_steps {
        model.integrate(x.as_mut_slice(), 1)?;
        truth.set_column(step, &x);
    }

    let mut bg_rng = stream_rng(seed, Stream::Background);
    let background = sampler.sample_n(n_e, &mut bg_rng);
    Ok(TwinSetup { truth, background })
}

//! Acceptance suite for the Lorenz-96 twin experiments.
//!
//! Every criterion prints one `PASS`/`FAIL` line and then asserts it. Runs
//! shared between criteria are computed once per test binary.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chop_core::enkf::{enkf_analysis, HyperParams, InflationSpec};
use chop_core::ensemble::{gaspari_cohn, pearson};
use chop_core::harness::{
    grid_search, read_summary_json, run_chop_experiment, run_repetitions, write_summary_json, AnalysisMethod,
    Experiment, ExperimentSummary, GridResult, Method, Prepared, RunOptions, ScenarioConfig,
};
use chop_core::l96::rk4_step;
use chop_core::metrics::{data_mismatch, ensemble_spread, rmse};
use chop_core::observation::{ObservationBatch, ObservationError, ObservationOperator};

const REPS: usize = 5;

fn report(id: &str, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("{tag} criterion {id} ({name}): {detail}");
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("climatology")
}

fn scenario(obs_increment: usize, obs_frequency: usize, method: Method) -> ScenarioConfig {
    ScenarioConfig {
        name: format!("l96-40-dn{obs_increment}-nf{obs_frequency}"),
        obs_increment,
        obs_frequency,
        repetitions: REPS,
        method,
        cache_dir: Some(cache_dir()),
        ..ScenarioConfig::default()
    }
}

fn chop_runs() -> &'static Mutex<HashMap<String, Experiment>> {
    static CELL: OnceLock<Mutex<HashMap<String, Experiment>>> = OnceLock::new();
    CELL.get_or_init(Default::default)
}

fn grid_runs() -> &'static Mutex<HashMap<String, GridResult>> {
    static CELL: OnceLock<Mutex<HashMap<String, GridResult>>> = OnceLock::new();
    CELL.get_or_init(Default::default)
}

/// CHOP-SIF average RMSE over `REPS` repetitions (memoized).
fn chop_sif(obs_increment: usize, obs_frequency: usize) -> (f64, f64, usize) {
    let key = format!("{obs_increment}/{obs_frequency}");
    let mut map = chop_runs().lock().unwrap();
    let exp = map.entry(key).or_insert_with(|| {
        let prepared = Prepared::new(scenario(obs_increment, obs_frequency, Method::ChopSif)).unwrap();
        run_chop_experiment(&prepared, RunOptions::default()).unwrap()
    });
    (exp.mean_rmse, exp.std_rmse, exp.diverged_count)
}

fn with_chop<T>(obs_increment: usize, obs_frequency: usize, f: impl FnOnce(&Experiment) -> T) -> T {
    chop_sif(obs_increment, obs_frequency);
    let map = chop_runs().lock().unwrap();
    f(&map[&format!("{obs_increment}/{obs_frequency}")])
}

/// Fixed-parameter runs on the 3x3 neighbourhood (steps of 0.05) of a cell.
fn grid_neighbourhood(obs_increment: usize, obs_frequency: usize, centre: (f64, f64)) -> GridResult {
    let key = format!("{obs_increment}/{obs_frequency}/{centre:?}");
    let mut map = grid_runs().lock().unwrap();
    map.entry(key)
        .or_insert_with(|| {
            let mut cells = Vec::new();
            for dd in [-0.05, 0.0, 0.05] {
                for dl in [-0.05, 0.0, 0.05] {
                    let d: f64 = ((centre.0 + dd) * 1e10_f64).round() / 1e10;
                    let l: f64 = ((centre.1 + dl) * 1e10_f64).round() / 1e10;
                    if (0.0..=2.0).contains(&d) && (0.05..=1.0).contains(&l) {
                        cells.push((d, l));
                    }
                }
            }
            let prepared = Prepared::new(scenario(obs_increment, obs_frequency, Method::Grid)).unwrap();
            grid_search(&prepared, Some(&cells)).unwrap()
        })
        .clone()
}

fn within_rel(value: f64, target: f64, rel: f64) -> bool {
    value.is_finite() && (value - target).abs() <= rel * target
}

#[test]
fn criterion_1_full_observation_table() {
    let grid = grid_neighbourhood(1, 4, (0.10, 0.20));
    let fixed = grid.cell(0.10, 0.20).unwrap().mean_rmse;
    let best = grid.best().unwrap().mean_rmse;
    let (chop, chop_std, diverged) = chop_sif(1, 4);
    let fixed_ok = (fixed - 0.456).abs() <= 0.06;
    let chop_ok = (chop - 0.477).abs() <= 0.08;
    let order_ok = chop >= best;
    let pass = fixed_ok && chop_ok && order_ok && diverged == 0;
    report(
        "1",
        "full observation, N_e = 30",
        pass,
        &format!(
            "fixed (0.10, 0.20) RMSE {fixed:.4} (target 0.456 +- 0.06); CHOP-SIF {chop:.4} +- {chop_std:.4} (target 0.477 +- 0.08); grid optimum {best:.4} <= CHOP: {order_ok}; CHOP divergences {diverged}"
        ),
    );
    assert!(pass);
}

/// Argmin cells of the published grid searches at `N_e = 30`, `N^freq = 4`.
const INCREMENT_CASES: [(usize, (f64, f64), f64, f64); 4] = [
    (1, (0.10, 0.20), 0.456, 0.477),
    (2, (0.10, 0.20), 0.798, 0.876),
    (4, (0.10, 0.25), 2.010, 2.360),
    (8, (0.05, 0.10), 2.913, 3.244),
];

#[test]
fn criterion_2_observation_density_trend() {
    let mut grid_vals = Vec::new();
    let mut chop_vals = Vec::new();
    let mut all_within = true;
    let mut lines = Vec::new();
    for (dn, centre, grid_target, chop_target) in INCREMENT_CASES {
        let g = grid_neighbourhood(dn, 4, centre).best().map_or(f64::NAN, |c| c.mean_rmse);
        let (c, _, _) = chop_sif(dn, 4);
        let ok = within_rel(g, grid_target, 0.15) && within_rel(c, chop_target, 0.15);
        all_within &= ok;
        lines.push(format!(
            "dn={dn}: grid {g:.3} (target {grid_target}), CHOP {c:.3} (target {chop_target}){}",
            if ok { "" } else { " out of band" }
        ));
        grid_vals.push(g);
        chop_vals.push(c);
    }
    let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
    let trend = increasing(&grid_vals) && increasing(&chop_vals);
    let pass = trend && all_within;
    report(
        "2",
        "RMSE rises as observations thin out",
        pass,
        &format!("strictly increasing: {trend}; {}", lines.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_3_observation_frequency_trend() {
    let targets = [(1, 0.541), (2, 0.547), (4, 0.876), (8, 2.102)];
    let mut vals = Vec::new();
    let mut all_within = true;
    let mut lines = Vec::new();
    for (nf, target) in targets {
        let (c, _, _) = chop_sif(2, nf);
        let ok = within_rel(c, target, 0.15);
        all_within &= ok;
        lines.push(format!("N^freq={nf}: CHOP {c:.3} (target {target}){}", if ok { "" } else { " out of band" }));
        vals.push(c);
    }
    let trend = vals.windows(2).all(|w| w[1] > w[0]);
    let pass = trend && all_within;
    report(
        "3",
        "CHOP RMSE rises with sparser observation times",
        pass,
        &format!("strictly increasing: {trend}; {}", lines.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_4_divergence_map() {
    let deltas = [0.0, 0.1, 0.5, 1.0, 2.0];
    let lambdas = [0.05, 0.1, 0.2, 0.5, 1.0];
    let cells: Vec<(f64, f64)> = deltas
        .iter()
        .flat_map(|&d| lambdas.iter().map(move |&l| (d, l)))
        .collect();
    let mut sc = scenario(1, 4, Method::Grid);
    sc.repetitions = 2;
    let prepared = Prepared::new(sc).unwrap();
    let grid = grid_search(&prepared, Some(&cells)).unwrap();
    let nan = |d: f64, l: f64| grid.cell(d, l).unwrap().mean_rmse.is_nan();
    let corner_diverged = nan(2.0, 0.05);
    let near = [(0.1, 0.1), (0.1, 0.2), (0.1, 0.5), (0.5, 0.2)];
    let near_finite = near.iter().all(|&(d, l)| !nan(d, l));
    let map: Vec<String> = deltas
        .iter()
        .map(|&d| {
            let row: Vec<String> = lambdas
                .iter()
                .map(|&l| {
                    let v = grid.cell(d, l).unwrap().mean_rmse;
                    if v.is_nan() {
                        "NaN".into()
                    } else {
                        format!("{v:.2}")
                    }
                })
                .collect();
            format!("d={d}: [{}]", row.join(" "))
        })
        .collect();
    let pass = corner_diverged && near_finite;
    report(
        "4",
        "divergence map on a 5x5 sub-grid",
        pass,
        &format!(
            "(2.0, 0.05) diverged: {corner_diverged}; (0.1, 0.2) neighbourhood finite: {near_finite}; {}",
            map.join("; ")
        ),
    );
    assert!(pass);
}

/// Slow: about tens of minutes on one core. Run with
/// `cargo test -p chop-core --test acceptance -- --ignored criterion_5`.
#[test]
#[ignore]
fn criterion_5_high_dimensional_multiple_inflation() {
    let base = ScenarioConfig {
        name: "l96-1000".into(),
        state_dim: 1000,
        ensemble_size: 100,
        obs_increment: 4,
        obs_frequency: 4,
        window_units: 50.0,
        repetitions: 2,
        cache_dir: Some(cache_dir()),
        ..ScenarioConfig::default()
    };
    let mif = Prepared::new(ScenarioConfig {
        method: Method::ChopMif,
        ..base.clone()
    })
    .unwrap();
    let mif = run_chop_experiment(&mif, RunOptions::default()).unwrap();
    let sif = Prepared::new(ScenarioConfig {
        method: Method::ChopSif,
        ..base
    })
    .unwrap();
    let sif = run_chop_experiment(&sif, RunOptions::default()).unwrap();
    let in_band = (2.7..=3.4).contains(&mif.mean_rmse);
    let ordered = mif.mean_rmse <= sif.mean_rmse;
    let pass = in_band && ordered;
    report(
        "5",
        "1000-variable multiple inflation factors",
        pass,
        &format!(
            "CHOP-MIF {:.4} (band [2.7, 3.4]); CHOP-SIF {:.4}; MIF <= SIF: {ordered}",
            mif.mean_rmse, sif.mean_rmse
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_smoother_behaviour() {
    // every cycle of the table runs, plus runs where the smoother is forced
    // to iterate (absolute threshold off), for both inflation modes
    let mut summaries = Vec::new();
    for (dn, ..) in INCREMENT_CASES {
        with_chop(dn, 4, |e| summaries.extend(e.records.iter().flat_map(|r| r.chop.clone())));
    }
    let literal_cycles = summaries.len();
    for method in [Method::ChopSif, Method::ChopMif] {
        let mut sc = scenario(2, 4, method);
        sc.window_units = 25.0;
        sc.repetitions = 2;
        sc.ies.abs_threshold_factor = 0.0;
        let exp = run_chop_experiment(&Prepared::new(sc).unwrap(), RunOptions::default()).unwrap();
        summaries.extend(exp.records.iter().flat_map(|r| r.chop.clone()));
    }
    let iterating = summaries.iter().filter(|s| s.iterations > 0).count();
    let monotone = summaries.iter().all(|s| s.monotone);
    let bounded = summaries.iter().all(|s| s.iterations <= 10);
    let spread = summaries.iter().all(|s| s.min_theta_std > 0.0);
    let taper = summaries.iter().all(|s| s.taper_min >= 0.0 && s.taper_max <= 1.0);
    let tsvd = summaries.iter().all(|s| s.tsvd_rule_ok);
    let pass = monotone && bounded && spread && taper && tsvd && iterating > 0;
    report(
        "6",
        "smoother behaviour in every cycle",
        pass,
        &format!(
            "{} cycles ({literal_cycles} from the table runs, {iterating} with iterations): monotone {monotone}, <= 10 iterations {bounded}, spread > 0 {spread}, taper in [0, 1] {taper}, truncation rule {tsvd}",
            summaries.len()
        ),
    );
    assert!(pass);
}

/// Dense Kalman mean update `m̄ + C Hᵀ (H C Hᵀ + R)^{-1} (d̄ - H m̄)`.
fn dense_kalman_mean(bg: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>, d_mean: &DVector<f64>) -> DVector<f64> {
    let n_e = bg.ncols() as f64;
    let mean = bg.column_sum() / n_e;
    let mut a = bg.clone();
    for mut c in a.column_iter_mut() {
        c -= &mean;
    }
    let c = &a * a.transpose() / (n_e - 1.0);
    let s = h * &c * h.transpose() + r;
    let k = &c * h.transpose() * s.try_inverse().unwrap();
    &mean + k * (d_mean - h * &mean)
}

#[test]
fn criterion_7_oracle_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_kalman: f64 = 0.0;
    for &(n, inc, n_e) in &[(4usize, 1usize, 6usize), (5, 1, 8), (5, 2, 7), (4, 2, 10)] {
        let op = ObservationOperator::new(n, inc).unwrap();
        let d = op.obs_dim();
        let bg = DMatrix::from_fn(n, n_e, |_, _| rng.gen_range(-2.0..2.0));
        let perturbed = DMatrix::from_fn(d, n_e, |_, _| rng.gen_range(-1.0..1.0));
        let var = DVector::from_fn(d, |_, _| rng.gen_range(0.5..2.0));
        let err = ObservationError::diagonal(var.clone()).unwrap();
        let obs = ObservationBatch::new(perturbed.column(0).into_owned(), perturbed.clone(), err).unwrap();
        // distances on a ring of <= 5 are <= 0.5, so a length scale of 1e6
        // makes the taper 1 to rounding
        let an = enkf_analysis(&bg, &obs, &op, &HyperParams::sif(0.0, 1e6)).unwrap();
        let h = DMatrix::from_fn(d, n, |t, s| if op.indices()[t] == s { 1.0 } else { 0.0 });
        let expected = dense_kalman_mean(&bg, &h, &DMatrix::from_diagonal(&var), &(perturbed.column_sum() / n_e as f64));
        let got = an.column_sum() / n_e as f64;
        worst_kalman = worst_kalman.max((got - expected).amax());
    }
    let kalman_ok = worst_kalman <= 1e-8;

    let gc_jump = |z: f64| (gaspari_cohn(z - 1e-13).unwrap() - gaspari_cohn(z + 1e-13).unwrap()).abs();
    let gc_at_one = (gaspari_cohn(1.0).unwrap() - 5.0 / 24.0).abs();
    let gc_err = gc_jump(1.0).max(gc_jump(2.0)).max(gc_at_one).max(gaspari_cohn(2.0).unwrap().abs());
    let gc_ok = gc_err <= 1e-12;

    // order from errors at dt and dt/2 against a dt/100 reference over t = 0.1
    let x0 = DVector::from_fn(40, |i, _| 8.0 + if i == 0 { 0.01 } else { 0.0 } + (i as f64 * 0.7).sin());
    let integrate = |dt: f64, steps: usize| {
        let mut x = x0.clone();
        for _ in 0..steps {
            x = rk4_step(&x, dt, 8.0).unwrap();
        }
        x
    };
    let reference = integrate(0.001, 100);
    let e1 = (integrate(0.05, 2) - &reference).norm();
    let e2 = (integrate(0.025, 4) - &reference).norm();
    let order = (e1 / e2).log2();
    let order_ok = (3.5..=4.5).contains(&order);

    let mut worst_sif_mif: f64 = 0.0;
    for trial in 0..4 {
        let n = 12;
        let op = ObservationOperator::new(n, 1 + trial % 3).unwrap();
        let d = op.obs_dim();
        let n_e = 9 + trial;
        let bg = DMatrix::from_fn(n, n_e, |_, _| rng.gen_range(-3.0..3.0));
        let perturbed = DMatrix::from_fn(d, n_e, |_, _| rng.gen_range(-2.0..2.0));
        let obs = ObservationBatch::new(perturbed.column(0).into_owned(), perturbed, ObservationError::identity(d)).unwrap();
        let delta = rng.gen_range(0.0..2.0);
        let lambda = rng.gen_range(0.05..1.0);
        let sif = enkf_analysis(&bg, &obs, &op, &HyperParams::sif(delta, lambda)).unwrap();
        let mif = enkf_analysis(
            &bg,
            &obs,
            &op,
            &HyperParams {
                inflation: InflationSpec::Multiple(DVector::from_element(n, delta)),
                length_scale: lambda,
            },
        )
        .unwrap();
        worst_sif_mif = worst_sif_mif.max((sif - mif).amax());
    }
    let sif_mif_ok = worst_sif_mif <= 1e-10;

    let mut worst_metric: f64 = 0.0;
    for _ in 0..10 {
        let m = rng.gen_range(2..30);
        let a: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut ss = 0.0;
        for i in 0..m {
            ss += (a[i] - b[i]) * (a[i] - b[i]);
        }
        worst_metric = worst_metric.max((rmse(&a, &b).unwrap() - (ss / m as f64).sqrt()).abs());

        let var = DVector::from_fn(m, |_, _| rng.gen_range(0.5..2.0));
        let err = ObservationError::diagonal(var.clone()).unwrap();
        let mut loop_dm = 0.0;
        for i in 0..m {
            loop_dm += (b[i] - a[i]) * (b[i] - a[i]) / var[i];
        }
        let dm = data_mismatch(&DVector::from_vec(a.clone()), &DVector::from_vec(b.clone()), &err).unwrap();
        worst_metric = worst_metric.max((dm - loop_dm).abs() / loop_dm.max(1.0));

        let n_e = rng.gen_range(2..8);
        let ens = DMatrix::from_fn(m, n_e, |_, _| rng.gen_range(-3.0..3.0));
        let mut total = 0.0;
        for i in 0..m {
            let row: Vec<f64> = ens.row(i).iter().copied().collect();
            let mean = row.iter().sum::<f64>() / n_e as f64;
            total += row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n_e - 1) as f64;
        }
        worst_metric = worst_metric.max((ensemble_spread(&ens).unwrap() - (total / m as f64).sqrt()).abs());
        let _ = pearson(&a, &b);
    }
    let metric_ok = worst_metric <= 1e-12;

    let pass = kalman_ok && gc_ok && order_ok && sif_mif_ok && metric_ok;
    report(
        "7",
        "oracle equivalences",
        pass,
        &format!(
            "Kalman mean max err {worst_kalman:.2e} (<= 1e-8); GC continuity {gc_err:.2e} (<= 1e-12); RK4 order {order:.3} (in [3.5, 4.5]); SIF vs MIF {worst_sif_mif:.2e} (<= 1e-10); metrics {worst_metric:.2e} (<= 1e-12)"
        ),
    );
    assert!(pass);
    assert_relative_eq!(gaspari_cohn(0.0).unwrap(), 1.0);
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut summaries = Vec::new();
    for run in 0..2 {
        let mut out = Vec::new();
        for method in [Method::Grid, Method::ChopSif] {
            let mut sc = scenario(2, 4, method);
            sc.window_units = 25.0;
            sc.repetitions = 2;
            sc.base_seed = 11;
            sc.diagnostic_cycles = vec![3];
            let prepared = Prepared::new(sc.clone()).unwrap();
            let exp = match method {
                Method::Grid => run_repetitions(
                    &prepared,
                    &AnalysisMethod::Fixed(sc.fixed_params()),
                    RunOptions { keep_cycles: true },
                )
                .unwrap(),
                _ => run_chop_experiment(&prepared, RunOptions { keep_cycles: true }).unwrap(),
            };
            out.push(ExperimentSummary::from_experiment(&sc, &exp));
        }
        let path = dir.path().join(format!("summary{run}.json"));
        write_summary_json(&out, &path).unwrap();
        assert_eq!(read_summary_json(&path).unwrap(), out);
        summaries.push(std::fs::read(&path).unwrap());
    }
    let pass = summaries[0] == summaries[1];
    report(
        "8",
        "determinism",
        pass,
        &format!("two executions with base seed 11 give byte-identical summary JSON: {pass}"),
    );
    assert!(pass);
}

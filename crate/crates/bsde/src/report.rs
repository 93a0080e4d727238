//! Post-training evaluation and serialization: path-wise relative-error
//! curves, spatial generalization sweeps at perturbed start points, timing
//! comparison rows, and plain CSV writers for all of them.
//!
//! Evaluation re-simulates fresh paths and propagates the value component
//! with the same Euler step the trainer uses, reading the spatial gradient
//! from the trained network at every step. Errors are measured against the
//! problem's reference solution at the simulated states.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::graph::{grad, Graph, Node, Tensor};
use crate::nets::NetworkParams;
use crate::problems::{ClosedForm, FbsdeProblem, ProblemError};
use crate::sampler::{euler_step, sample_increments, PathBatch, SamplerError, TimeGrid};
use crate::trainer::{derive_seed, TrainReport};

/// Errors from evaluation and CSV serialization.
#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    /// A coefficient blew up while re-simulating paths.
    #[error("evaluation step {step} failed: {source}")]
    Step { step: usize, source: SamplerError },
    /// The propagated state or value left the finite range.
    #[error("non-finite evaluation state at step {step}, path {path}")]
    NonFinite { step: usize, path: usize },
    /// Bad sweep request (empty distance list, distance outside [0, 1], …).
    #[error("invalid generalization sweep: {0}")]
    InvalidSweep(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The value function u(t, ·) that drives an evaluation: either a trained
/// network or a closed-form reference. The reference variant measures the
/// pure time-discretization floor, which is what a trained network's error
/// should be compared against.
pub enum ValueOracle<'a> {
    Network(&'a NetworkParams),
    Reference(&'a ClosedForm),
}

impl ValueOracle<'_> {
    /// Value (length M) and spatial gradient (d×M) nodes at time `t`.
    fn eval_nodes<'g>(&self, g: &'g Graph, t: f64, x: Node<'g>) -> (Node<'g>, Node<'g>) {
        match self {
            ValueOracle::Network(params) => params.bind(g).gradient_x_cols(t, x),
            ValueOracle::Reference(cf) => {
                let y = (cf.graph)(t, x);
                let z = grad(y.sum(), &[x])[0];
                (y, z)
            }
        }
    }
}

/// Relative-error summary along the time grid, together with the raw
/// per-path errors the summary columns were computed from.
#[derive(Clone, Debug)]
pub struct ErrorCurve {
    pub times: Vec<f64>,
    /// Per-time mean over paths of |Y_pred − u(t, X_t)| / |u(t, X_t)|.
    pub mean_rel_err: Vec<f64>,
    /// mean + 2 · (population standard deviation over paths).
    pub mean_plus_2std: Vec<f64>,
    /// `raw_rel_err[n][m]`: relative error of path m at grid point n.
    pub raw_rel_err: Vec<Vec<f64>>,
    /// Mean standard error reported by the reference oracle (0 for closed
    /// forms; nonzero when the reference is itself a Monte Carlo estimate).
    pub mean_oracle_se: f64,
}

/// A single simulated trajectory: predicted vs reference values.
#[derive(Clone, Debug)]
pub struct SamplePath {
    pub path_id: usize,
    pub y_pred: Vec<f64>,
    pub y_exact: Vec<f64>,
}

/// A handful of individual trajectories on a shared time grid.
#[derive(Clone, Debug)]
pub struct SamplePaths {
    pub times: Vec<f64>,
    pub paths: Vec<SamplePath>,
}

/// Mean and population standard deviation. When every value is bitwise
/// identical the mean is returned bit-for-bit and the deviation is exactly
/// zero, so degenerate inputs (all paths at the same start point) do not
/// pick up rounding noise.
fn mean_and_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty());
    let first = values[0];
    if values.iter().all(|v| v.to_bits() == first.to_bits()) {
        return (first, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Simulates fresh paths under `oracle`, propagating Y through the trainer's
/// Euler step with Z read from the oracle at every grid point, and compares
/// the propagated Y against the problem's reference solution.
///
/// `oracle_seed` feeds the reference oracle when it is stochastic; each
/// (step, path) query gets its own derived seed. The first
/// `sample_path_count` paths are additionally returned as full trajectories.
pub fn evaluate_error_curve_with(
    problem: &FbsdeProblem,
    oracle: &ValueOracle,
    batch: &PathBatch,
    oracle_seed: u64,
    sample_path_count: usize,
) -> Result<(ErrorCurve, SamplePaths), ReportError> {
    let steps = batch.grid.steps;
    let paths = batch.paths;
    let dt = batch.grid.dt();
    let tracked = sample_path_count.min(paths);

    // Every path starts at the same point.
    let mut x = Array2::zeros((problem.dim, paths));
    for m in 0..paths {
        x.column_mut(m).assign(&problem.initial_state);
    }
    // Y_0 is the oracle's own value at the start point.
    let mut y: Vec<f64> = {
        let g = Graph::new();
        let xn = g.input(Tensor::Matrix(x.clone()));
        let (y0, _) = oracle.eval_nodes(&g, 0.0, xn);
        y0.value().flat()
    };

    let mut times = Vec::with_capacity(steps + 1);
    let mut raw_rel_err = Vec::with_capacity(steps + 1);
    let mut se_sum = 0.0;
    let mut tracks: Vec<SamplePath> = (0..tracked)
        .map(|m| SamplePath {
            path_id: m,
            y_pred: Vec::with_capacity(steps + 1),
            y_exact: Vec::with_capacity(steps + 1),
        })
        .collect();

    for n in 0..=steps {
        let t = batch.grid.time(n);
        times.push(t);

        // Compare the propagated Y against the reference at the simulated
        // state, path by path.
        let mut errs = Vec::with_capacity(paths);
        for m in 0..paths {
            let col: Vec<f64> = x.column(m).iter().copied().collect();
            let query_seed = derive_seed(oracle_seed, (n * paths + m) as u64);
            let (reference, se) = problem.exact_value(t, &col, query_seed)?;
            se_sum += se;
            errs.push((y[m] - reference).abs() / reference.abs());
            if m < tracked {
                tracks[m].y_pred.push(y[m]);
                tracks[m].y_exact.push(reference);
            }
        }
        raw_rel_err.push(errs);

        if n == steps {
            break;
        }

        // One Euler step on a scratch graph: Z from the oracle, the same
        // state/value update the trainer optimizes against.
        let g = Graph::new();
        let xn = g.input(Tensor::Matrix(x.clone()));
        let yn = g.input(Tensor::Vector(Array1::from(y.clone())));
        let (_, z) = oracle.eval_nodes(&g, t, xn);
        let step = euler_step(&g, problem, t, xn, yn, z, dt, batch.step_block(n))
            .map_err(|source| ReportError::Step { step: n, source })?;
        let drift_part = step.y_drift.value().flat();
        let diffusion_part = step.y_diffusion.value().flat();
        x = step.x_next.value().matrix().clone();
        for m in 0..paths {
            y[m] += drift_part[m] + diffusion_part[m];
            if !y[m].is_finite() || x.column(m).iter().any(|v| !v.is_finite()) {
                return Err(ReportError::NonFinite { step: n + 1, path: m });
            }
        }
    }

    let mut mean_rel_err = Vec::with_capacity(steps + 1);
    let mut mean_plus_2std = Vec::with_capacity(steps + 1);
    for errs in &raw_rel_err {
        let (mean, std) = mean_and_std(errs);
        mean_rel_err.push(mean);
        mean_plus_2std.push(mean + 2.0 * std);
    }

    let curve = ErrorCurve {
        times: times.clone(),
        mean_rel_err,
        mean_plus_2std,
        raw_rel_err,
        mean_oracle_se: se_sum / ((steps + 1) * paths) as f64,
    };
    Ok((curve, SamplePaths { times, paths: tracks }))
}

/// Evaluates a trained network on `paths` fresh paths over `steps` Euler
/// steps, returning the relative-error curve and two individual sample
/// trajectories. All randomness (path increments and any stochastic
/// reference oracle) derives from `seed`.
pub fn evaluate_error_curve(
    problem: &FbsdeProblem,
    params: &NetworkParams,
    paths: usize,
    steps: usize,
    seed: u64,
) -> Result<(ErrorCurve, SamplePaths), ReportError> {
    let grid = TimeGrid { horizon: problem.horizon, steps };
    let batch = sample_increments(grid, problem.dim, paths, derive_seed(seed, 0));
    evaluate_error_curve_with(
        problem,
        &ValueOracle::Network(params),
        &batch,
        derive_seed(seed, 1),
        2,
    )
}

/// A point uniformly distributed on the unit sphere in `dim` dimensions
/// (normalized standard Gaussian; the degenerate near-zero draw is
/// rejected and redrawn).
pub fn unit_sphere_direction(dim: usize, rng: &mut impl Rng) -> Array1<f64> {
    loop {
        let v = Array1::from_iter((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// One distance row of a generalization sweep. All quantities are percent.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub rel_distance_pct: f64,
    pub mean_rel_err_pct: f64,
    /// Standard error of the mean over the perturbation draws.
    pub stderr_pct: f64,
    /// Mean reference-oracle standard error, as a percentage of the
    /// reference value (0 for closed forms).
    pub mean_oracle_se_pct: f64,
}

/// Result of evaluating a trained network at perturbed start points
/// without retraining.
#[derive(Clone, Debug)]
pub struct GeneralizationSweep {
    pub rows: Vec<SweepRow>,
    /// True when the unperturbed start point has zero norm; distances are
    /// then absolute step lengths instead of fractions of ‖ξ‖.
    pub absolute_fallback: bool,
    /// Parameter checksums taken before and after the sweep; always equal,
    /// recorded so callers can re-assert the no-retraining contract.
    pub checksum_before: u64,
    pub checksum_after: u64,
    /// Human-readable label of the perturbation protocol.
    pub protocol: &'static str,
}

/// For each distance δ, draws `draws` perturbed start points
/// ξ′ = ξ + δ·‖ξ‖·v with v uniform on the unit sphere, and reports the mean
/// relative error of the network value at t=0 against the reference, as a
/// percentage. Parameters are never modified; this is asserted by checksum.
pub fn generalization_sweep(
    problem: &FbsdeProblem,
    params: &NetworkParams,
    distances: &[f64],
    draws: usize,
    seed: u64,
) -> Result<GeneralizationSweep, ReportError> {
    if distances.is_empty() {
        return Err(ReportError::InvalidSweep("the distance list is empty".into()));
    }
    for pair in distances.windows(2) {
        if pair[1] <= pair[0] {
            return Err(ReportError::InvalidSweep(format!(
                "distances must be strictly increasing, found {} after {}",
                pair[1], pair[0]
            )));
        }
    }
    if let Some(bad) = distances.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(ReportError::InvalidSweep(format!(
            "distance {bad} is outside [0, 1]"
        )));
    }
    if draws == 0 {
        return Err(ReportError::InvalidSweep("need at least one draw per distance".into()));
    }

    let checksum_before = params.checksum();
    let xi = &problem.initial_state;
    let norm = xi.dot(xi).sqrt();
    let absolute_fallback = norm == 0.0;
    let scale = if absolute_fallback { 1.0 } else { norm };
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0));

    let mut rows = Vec::with_capacity(distances.len());
    for (i, &delta) in distances.iter().enumerate() {
        let mut errs = Vec::with_capacity(draws);
        let mut se_pct_sum = 0.0;
        for k in 0..draws {
            let v = unit_sphere_direction(problem.dim, &mut rng);
            let point: Vec<f64> = (0..problem.dim)
                .map(|j| xi[j] + delta * scale * v[j])
                .collect();
            let predicted = params.value(0.0, &point);
            let query_seed = derive_seed(seed, (i * draws + k) as u64 + 1);
            let (reference, se) = problem.exact_value(0.0, &point, query_seed)?;
            errs.push((predicted - reference).abs() / reference.abs());
            se_pct_sum += se / reference.abs() * 100.0;
        }
        let (mean, std) = mean_and_std(&errs);
        let stderr = if draws > 1 { std / (draws as f64).sqrt() } else { 0.0 };
        rows.push(SweepRow {
            rel_distance_pct: delta * 100.0,
            mean_rel_err_pct: mean * 100.0,
            stderr_pct: stderr * 100.0,
            mean_oracle_se_pct: se_pct_sum / draws as f64,
        });
    }

    let checksum_after = params.checksum();
    assert_eq!(
        checksum_before, checksum_after,
        "evaluation must not touch the trained parameters"
    );
    Ok(GeneralizationSweep {
        rows,
        absolute_fallback,
        checksum_before,
        checksum_after,
        protocol: "mean over isotropic unit-sphere directions",
    })
}

/// Whether a run trained on a single step count or on a coarse-to-fine
/// schedule of step counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Single,
    Multi,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Single => "single",
            TrainMode::Multi => "multi",
        })
    }
}

/// One row of the architecture/mode comparison table.
#[derive(Clone, Debug)]
pub struct TimingRow {
    pub architecture: String,
    pub mode: TrainMode,
    pub total_seconds: f64,
    pub iterations: usize,
    /// NaN when the run recorded no iterations.
    pub final_loss: f64,
    /// |Y₀ − reference| / |reference|; NaN when no reference is available.
    pub y0_rel_err: f64,
}

/// Builds one comparison row from a finished training report.
pub fn timing_row(
    architecture: &str,
    mode: TrainMode,
    report: &TrainReport,
    reference_y0: Option<f64>,
) -> TimingRow {
    TimingRow {
        architecture: architecture.to_string(),
        mode,
        total_seconds: report.total_seconds,
        iterations: report.records.len(),
        final_loss: report.final_loss().unwrap_or(f64::NAN),
        y0_rel_err: match reference_y0 {
            Some(r) => (report.final_y0 - r).abs() / r.abs(),
            None => f64::NAN,
        },
    }
}

fn open(path: &Path) -> Result<BufWriter<File>, ReportError> {
    Ok(BufWriter::new(File::create(path)?))
}

/// `error_curve.csv`: one row per grid point.
pub fn write_error_curve(path: impl AsRef<Path>, curve: &ErrorCurve) -> Result<(), ReportError> {
    let mut w = open(path.as_ref())?;
    writeln!(w, "t,mean_rel_err,mean_plus_2std")?;
    for i in 0..curve.times.len() {
        writeln!(w, "{},{},{}", curve.times[i], curve.mean_rel_err[i], curve.mean_plus_2std[i])?;
    }
    w.flush()?;
    Ok(())
}

/// `sample_paths.csv`: trajectories grouped by path, one row per grid point.
pub fn write_sample_paths(path: impl AsRef<Path>, samples: &SamplePaths) -> Result<(), ReportError> {
    let mut w = open(path.as_ref())?;
    writeln!(w, "t,path_id,y_pred,y_exact")?;
    for track in &samples.paths {
        for i in 0..samples.times.len() {
            writeln!(
                w,
                "{},{},{},{}",
                samples.times[i], track.path_id, track.y_pred[i], track.y_exact[i]
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `generalization.csv`: sweep rows grouped per architecture label.
pub fn write_generalization(
    path: impl AsRef<Path>,
    sweeps: &[(String, GeneralizationSweep)],
) -> Result<(), ReportError> {
    let mut w = open(path.as_ref())?;
    writeln!(w, "architecture,rel_distance_pct,mean_rel_err_pct,stderr_pct")?;
    for (label, sweep) in sweeps {
        for row in &sweep.rows {
            writeln!(
                w,
                "{},{},{},{}",
                label, row.rel_distance_pct, row.mean_rel_err_pct, row.stderr_pct
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `timings.csv`: one row per (architecture, mode) run.
pub fn write_timings(path: impl AsRef<Path>, rows: &[TimingRow]) -> Result<(), ReportError> {
    let mut w = open(path.as_ref())?;
    writeln!(w, "architecture,mode,total_seconds,iterations,final_loss,y0_rel_err")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            row.architecture, row.mode, row.total_seconds, row.iterations, row.final_loss, row.y0_rel_err
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `loss_curve.csv`: one row per training iteration. Wall-clock values are
/// written as 0 unless `record_wall_clock` is set, so that two identical
/// runs produce byte-identical files; the value-at-start column carries NaN
/// on iterations where it was not logged.
pub fn write_loss_curve(
    path: impl AsRef<Path>,
    report: &TrainReport,
    record_wall_clock: bool,
) -> Result<(), ReportError> {
    let mut w = open(path.as_ref())?;
    writeln!(w, "iteration,level,loss,elapsed_seconds,y0_estimate")?;
    for r in &report.records {
        let elapsed = if record_wall_clock { r.elapsed_seconds } else { 0.0 };
        writeln!(
            w,
            "{},{},{},{},{}",
            r.iteration,
            r.level,
            r.loss,
            elapsed,
            r.y0_estimate.unwrap_or(f64::NAN)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `convergence.csv`: strong-error study rows `(steps, rms_error)` with the
/// ratio of each error to its successor's (NaN on the first row).
pub fn write_convergence(path: impl AsRef<Path>, rows: &[(usize, f64)]) -> Result<(), ReportError> {
    let mut w = open(path.as_ref())?;
    writeln!(w, "N,rms_error,ratio")?;
    for (i, (steps, rms)) in rows.iter().enumerate() {
        let ratio = if i == 0 { f64::NAN } else { rows[i - 1].1 / rms };
        writeln!(w, "{},{},{}", steps, rms, ratio)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Architecture, NetConfig};
    use crate::problems::{
        black_scholes, driver, terminal, CoeffArgs, Diffusion, ExactSolution, FbsdeProblem,
    };
    use crate::trainer::TrainRecord;

    fn reference_of(problem: &FbsdeProblem) -> &ClosedForm {
        match &problem.exact {
            Some(ExactSolution::ClosedForm(cf)) => cf,
            _ => panic!("expected a closed-form reference"),
        }
    }

    /// A problem whose start point has zero norm, for the absolute-fallback
    /// path of the sweep. The reference here only needs to be well-defined,
    /// not meaningful.
    fn zero_start_problem() -> FbsdeProblem {
        FbsdeProblem {
            name: "toy".into(),
            dim: 2,
            horizon: 1.0,
            initial_state: Array1::zeros(2),
            drift: None,
            diffusion: Diffusion::ScaledIdentity(1.0),
            driver: driver(|a: &CoeffArgs<'_>| a.y.scale(0.0)),
            terminal: terminal(|x: Node<'_>| x.square().col_sums()),
            terminal_grad: None,
            exact: Some(ExactSolution::ClosedForm(ClosedForm {
                eval: Box::new(|_t, x| 1.0 + x.iter().map(|v| v * v).sum::<f64>()),
                graph: Box::new(|_t, x: Node<'_>| {
                    let m = x.shape_cols();
                    let ones = x.graph().constant(Tensor::Vector(Array1::from_elem(m, 1.0)));
                    x.square().col_sums() + ones
                }),
            })),
        }
    }

    #[test]
    fn reference_oracle_error_curve_is_a_small_discretization_floor() {
        let problem = black_scholes(2, 0.05, 0.25, 1.0, Array1::ones(2));
        let cf = reference_of(&problem);
        let grid = TimeGrid { horizon: 1.0, steps: 50 };
        let batch = sample_increments(grid, 2, 64, 901);
        let (curve, _) =
            evaluate_error_curve_with(&problem, &ValueOracle::Reference(cf), &batch, 7, 2)
                .unwrap();

        // All paths share the start point and the oracle is exact there.
        assert_eq!(curve.mean_rel_err[0], 0.0);
        assert_eq!(curve.mean_plus_2std[0], 0.0);
        assert_eq!(curve.mean_oracle_se, 0.0);
        for (i, (&mean, &cap)) in curve
            .mean_rel_err
            .iter()
            .zip(&curve.mean_plus_2std)
            .enumerate()
        {
            assert!(mean >= 0.0 && cap >= mean, "bad ordering at point {i}");
            assert!(
                mean < 0.01,
                "discretization floor too high at point {i}: {mean}"
            );
        }
    }

    #[test]
    fn error_curve_statistics_match_the_raw_errors() {
        let problem = black_scholes(2, 0.05, 0.3, 1.0, Array1::ones(2));
        let cf = reference_of(&problem);
        let grid = TimeGrid { horizon: 1.0, steps: 10 };
        let batch = sample_increments(grid, 2, 32, 17);
        let (curve, _) =
            evaluate_error_curve_with(&problem, &ValueOracle::Reference(cf), &batch, 7, 0)
                .unwrap();
        for n in 0..curve.times.len() {
            let raw = &curve.raw_rel_err[n];
            let mean = raw.iter().sum::<f64>() / raw.len() as f64;
            let var = raw.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / raw.len() as f64;
            assert!((curve.mean_rel_err[n] - mean).abs() <= 1e-12);
            assert!((curve.mean_plus_2std[n] - (mean + 2.0 * var.sqrt())).abs() <= 1e-12);
        }
    }

    #[test]
    fn reordering_paths_leaves_the_statistics_unchanged() {
        let problem = black_scholes(3, 0.05, 0.3, 1.0, Array1::ones(3));
        let cf = reference_of(&problem);
        let grid = TimeGrid { horizon: 1.0, steps: 8 };
        let paths = 16;
        let batch = sample_increments(grid, 3, paths, 55);
        let reversed = PathBatch::from_blocks(
            grid,
            (0..grid.steps)
                .map(|n| {
                    let block = batch.step_block(n);
                    let mut out = block.clone();
                    for m in 0..paths {
                        out.column_mut(m).assign(&block.column(paths - 1 - m));
                    }
                    out
                })
                .collect(),
        );
        let oracle = ValueOracle::Reference(cf);
        let (a, _) = evaluate_error_curve_with(&problem, &oracle, &batch, 7, 0).unwrap();
        let (b, _) = evaluate_error_curve_with(&problem, &oracle, &reversed, 7, 0).unwrap();
        for n in 0..a.times.len() {
            assert!((a.mean_rel_err[n] - b.mean_rel_err[n]).abs() <= 1e-12);
            assert!((a.mean_plus_2std[n] - b.mean_plus_2std[n]).abs() <= 1e-12);
        }
    }

    #[test]
    fn network_evaluation_emits_two_tracked_trajectories() {
        let problem = black_scholes(2, 0.05, 0.3, 1.0, Array1::ones(2));
        let params = NetworkParams::init(NetConfig::new(2, 8, 2, Architecture::FullyConnected), 3);
        let (curve, samples) = evaluate_error_curve(&problem, &params, 6, 5, 42).unwrap();

        assert_eq!(curve.times.len(), 6);
        assert_eq!(samples.paths.len(), 2);
        assert_eq!(samples.paths[0].path_id, 0);
        assert_eq!(samples.paths[1].path_id, 1);
        for track in &samples.paths {
            assert_eq!(track.y_pred.len(), 6);
            assert_eq!(track.y_exact.len(), 6);
        }
        // The predicted trajectory starts at the network's own value and the
        // reference one at the closed form, both at the shared start point.
        let at_start = params.value(0.0, problem.initial_state.as_slice().unwrap());
        assert_eq!(samples.paths[0].y_pred[0], at_start);
        assert_eq!(samples.paths[1].y_pred[0], at_start);
        let cf = reference_of(&problem);
        let exact_start = (cf.eval)(0.0, problem.initial_state.as_slice().unwrap());
        assert_eq!(samples.paths[0].y_exact[0], exact_start);
        // Tracked trajectories are the first per-path error rows.
        let err0 = (samples.paths[0].y_pred[5] - samples.paths[0].y_exact[5]).abs()
            / samples.paths[0].y_exact[5].abs();
        assert!((curve.raw_rel_err[5][0] - err0).abs() <= 1e-15);
    }

    #[test]
    fn zero_distance_row_reproduces_the_unperturbed_error() {
        let problem = black_scholes(3, 0.05, 0.4, 1.0, Array1::ones(3));
        let params =
            NetworkParams::init(NetConfig::new(3, 10, 2, Architecture::StableResidual), 11);
        let cf = reference_of(&problem);
        let xi = problem.initial_state.as_slice().unwrap();
        let unperturbed = (params.value(0.0, xi) - (cf.eval)(0.0, xi)).abs()
            / (cf.eval)(0.0, xi).abs();

        let sweep = generalization_sweep(&problem, &params, &[0.0, 0.1, 0.2], 25, 99).unwrap();
        assert_eq!(sweep.rows.len(), 3);
        assert_eq!(sweep.rows[0].rel_distance_pct, 0.0);
        // Every zero-distance draw lands on the same point, so the mean is
        // the unperturbed error itself and its spread is exactly zero.
        assert_eq!(sweep.rows[0].mean_rel_err_pct, unperturbed * 100.0);
        assert_eq!(sweep.rows[0].stderr_pct, 0.0);
        assert_eq!(sweep.checksum_before, sweep.checksum_after);
        assert_eq!(sweep.checksum_before, params.checksum());
        assert!(!sweep.absolute_fallback);
        for row in &sweep.rows {
            assert!(row.mean_rel_err_pct.is_finite() && row.stderr_pct >= 0.0);
        }
    }

    #[test]
    fn sweep_rejects_malformed_requests() {
        let problem = black_scholes(2, 0.05, 0.4, 1.0, Array1::ones(2));
        let params = NetworkParams::init(NetConfig::new(2, 6, 1, Architecture::Residual), 1);
        let cases: Vec<(Vec<f64>, usize)> = vec![
            (vec![], 10),
            (vec![0.1, 0.1], 10),
            (vec![0.2, 0.1], 10),
            (vec![0.5, 1.5], 10),
            (vec![-0.1, 0.5], 10),
            (vec![0.0, 0.5], 0),
        ];
        for (distances, draws) in cases {
            match generalization_sweep(&problem, &params, &distances, draws, 5) {
                Err(ReportError::InvalidSweep(_)) => {}
                other => panic!(
                    "distances {distances:?}, draws {draws}: expected a sweep error, got {:?}",
                    other.map(|s| s.rows.len())
                ),
            }
        }
    }

    #[test]
    fn zero_norm_start_point_falls_back_to_absolute_perturbations() {
        let problem = zero_start_problem();
        let params = NetworkParams::init(NetConfig::new(2, 6, 1, Architecture::FullyConnected), 2);
        let sweep = generalization_sweep(&problem, &params, &[0.0, 0.5], 12, 31).unwrap();
        assert!(sweep.absolute_fallback);
        // The nonzero distance actually moves the evaluation point: with the
        // reference 1 + ‖x‖², perturbed references differ from the origin's.
        assert!(sweep.rows[1].mean_rel_err_pct != sweep.rows[0].mean_rel_err_pct);
        assert!(sweep.rows.iter().all(|r| r.mean_rel_err_pct.is_finite()));
    }

    #[test]
    fn sphere_directions_are_unit_length_and_isotropic() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let dim = 5;
        let draws = 100_000;
        let mut mean = Array1::<f64>::zeros(dim);
        for _ in 0..draws {
            let v = unit_sphere_direction(dim, &mut rng);
            assert!((v.dot(&v).sqrt() - 1.0).abs() < 1e-12);
            mean = mean + &v;
        }
        mean /= draws as f64;
        let bias = mean.dot(&mean).sqrt();
        assert!(bias < 0.02, "directional bias too large: {bias}");
    }

    #[test]
    fn timing_rows_summarize_reports() {
        let report = TrainReport {
            records: vec![
                TrainRecord {
                    iteration: 0,
                    level: 0,
                    loss: 4.0,
                    elapsed_seconds: 0.5,
                    y0_estimate: Some(5.5),
                },
                TrainRecord {
                    iteration: 1,
                    level: 0,
                    loss: 0.5,
                    elapsed_seconds: 0.5,
                    y0_estimate: None,
                },
            ],
            final_y0: 6.0,
            total_seconds: 12.5,
        };
        let row = timing_row("fc", TrainMode::Single, &report, Some(5.0));
        assert_eq!(row.architecture, "fc");
        assert_eq!(row.mode, TrainMode::Single);
        assert_eq!(row.total_seconds, 12.5);
        assert_eq!(row.iterations, 2);
        assert_eq!(row.final_loss, 0.5);
        assert_eq!(row.y0_rel_err, 0.2);

        let bare = timing_row("resnet", TrainMode::Multi, &TrainReport::default(), None);
        assert_eq!(bare.iterations, 0);
        assert!(bare.final_loss.is_nan());
        assert!(bare.y0_rel_err.is_nan());
    }

    #[test]
    fn loss_curve_csv_suppresses_wall_clock_unless_asked() {
        let report = TrainReport {
            records: vec![
                TrainRecord {
                    iteration: 0,
                    level: 0,
                    loss: 2.5,
                    elapsed_seconds: 0.125,
                    y0_estimate: Some(1.25),
                },
                TrainRecord {
                    iteration: 1,
                    level: 1,
                    loss: 1.5,
                    elapsed_seconds: 0.25,
                    y0_estimate: None,
                },
            ],
            final_y0: 1.25,
            total_seconds: 0.375,
        };
        let dir = tempfile::tempdir().unwrap();
        let silent = dir.path().join("loss_curve.csv");
        write_loss_curve(&silent, &report, false).unwrap();
        assert_eq!(
            std::fs::read_to_string(&silent).unwrap(),
            "iteration,level,loss,elapsed_seconds,y0_estimate\n\
             0,0,2.5,0,1.25\n\
             1,1,1.5,0,NaN\n"
        );
        let timed = dir.path().join("loss_curve_timed.csv");
        write_loss_curve(&timed, &report, true).unwrap();
        assert_eq!(
            std::fs::read_to_string(&timed).unwrap(),
            "iteration,level,loss,elapsed_seconds,y0_estimate\n\
             0,0,2.5,0.125,1.25\n\
             1,1,1.5,0.25,NaN\n"
        );
    }

    #[test]
    fn convergence_csv_carries_successive_ratios() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("convergence.csv");
        write_convergence(&path, &[(8, 0.5), (16, 0.25), (32, 0.125)]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "N,rms_error,ratio\n8,0.5,NaN\n16,0.25,2\n32,0.125,2\n"
        );
    }

    #[test]
    fn remaining_csv_writers_use_the_locked_headers() {
        let dir = tempfile::tempdir().unwrap();

        let curve = ErrorCurve {
            times: vec![0.0, 0.5],
            mean_rel_err: vec![0.0, 0.25],
            mean_plus_2std: vec![0.0, 0.5],
            raw_rel_err: vec![vec![0.0], vec![0.25]],
            mean_oracle_se: 0.0,
        };
        let curve_path = dir.path().join("error_curve.csv");
        write_error_curve(&curve_path, &curve).unwrap();
        assert_eq!(
            std::fs::read_to_string(&curve_path).unwrap(),
            "t,mean_rel_err,mean_plus_2std\n0,0,0\n0.5,0.25,0.5\n"
        );

        let samples = SamplePaths {
            times: vec![0.0, 0.5],
            paths: vec![SamplePath {
                path_id: 0,
                y_pred: vec![1.0, 1.5],
                y_exact: vec![1.0, 1.25],
            }],
        };
        let sample_path = dir.path().join("sample_paths.csv");
        write_sample_paths(&sample_path, &samples).unwrap();
        assert_eq!(
            std::fs::read_to_string(&sample_path).unwrap(),
            "t,path_id,y_pred,y_exact\n0,0,1,1\n0.5,0,1.5,1.25\n"
        );

        let sweep = GeneralizationSweep {
            rows: vec![
                SweepRow {
                    rel_distance_pct: 0.0,
                    mean_rel_err_pct: 1.5,
                    stderr_pct: 0.0,
                    mean_oracle_se_pct: 0.0,
                },
                SweepRow {
                    rel_distance_pct: 10.0,
                    mean_rel_err_pct: 2.5,
                    stderr_pct: 0.25,
                    mean_oracle_se_pct: 0.0,
                },
            ],
            absolute_fallback: false,
            checksum_before: 1,
            checksum_after: 1,
            protocol: "test",
        };
        let gen_path = dir.path().join("generalization.csv");
        write_generalization(
            &gen_path,
            &[("fc".to_string(), sweep.clone()), ("resnet".to_string(), sweep)],
        )
        .unwrap();
        let text = std::fs::read_to_string(&gen_path).unwrap();
        assert_eq!(
            text,
            "architecture,rel_distance_pct,mean_rel_err_pct,stderr_pct\n\
             fc,0,1.5,0\nfc,10,2.5,0.25\nresnet,0,1.5,0\nresnet,10,2.5,0.25\n"
        );

        let rows = vec![TimingRow {
            architecture: "naisnet".into(),
            mode: TrainMode::Multi,
            total_seconds: 3.5,
            iterations: 100,
            final_loss: 0.125,
            y0_rel_err: 0.0625,
        }];
        let timing_path = dir.path().join("timings.csv");
        write_timings(&timing_path, &rows).unwrap();
        assert_eq!(
            std::fs::read_to_string(&timing_path).unwrap(),
            "architecture,mode,total_seconds,iterations,final_loss,y0_rel_err\n\
             naisnet,multi,3.5,100,0.125,0.0625\n"
        );
    }
}

//! Time discretization and Brownian path sampling.
//!
//! The explicit scheme advances both processes on a uniform grid
//! `t_n = n T / N` with increments `ΔW_n ~ Normal(0, Δt I)`:
//!
//! ```text
//! X_{n+1} = X_n + mu Δt + sigma ΔW_n
//! Y_{n+1} = Y_n + phi Δt + Zᵀ sigma ΔW_n
//! ```
//!
//! Sampling is stream-seeded: path `m` draws from its own counter stream of
//! one ChaCha generator, so its increments depend only on `(seed, m)` — a
//! batch of 4 is a bitwise prefix of a batch of 8, and shards of a batch can
//! be regenerated independently on any thread.
//!
//! [`PathBatch::coarsen`] sums consecutive increments, which preserves the
//! underlying Brownian path across step sizes; that is what lets a coarse
//! training level and a fine one see the same randomness, and what the
//! strong-order study relies on to reuse one set of paths for every `N`.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::graph::{Graph, Node};
use crate::problems::{CoeffArgs, FbsdeProblem};

#[derive(Clone, Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("coefficient `{coefficient}` produced a non-finite value")]
    NonFiniteCoefficient { coefficient: &'static str },
    #[error("coarsening factor {factor} does not divide {steps} steps")]
    BadCoarsenFactor { factor: usize, steps: usize },
}

/// Uniform grid on `[0, horizon]` with `steps` intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> TimeGrid {
        assert!(horizon > 0.0, "horizon must be positive");
        assert!(steps > 0, "need at least one time step");
        TimeGrid { horizon, steps }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// `t_n`, with the endpoints exact: `time(0) == 0`, `time(steps) == horizon`.
    pub fn time(&self, n: usize) -> f64 {
        debug_assert!(n <= self.steps);
        if n == self.steps {
            self.horizon
        } else {
            n as f64 * self.horizon / self.steps as f64
        }
    }
}

/// Brownian increments for a batch of paths, stored per step as d×M blocks
/// (one column per path) — the layout the batched rollout consumes.
pub struct PathBatch {
    pub grid: TimeGrid,
    pub dim: usize,
    pub paths: usize,
    increments: Vec<Array2<f64>>,
}

/// Draws `ΔW_n ~ Normal(0, Δt I)` for every path and step. Path `m` uses
/// stream `m` of a ChaCha generator seeded with `seed`, drawing step-major,
/// so its increments are a pure function of `(seed, m)`.
pub fn sample_increments(grid: TimeGrid, dim: usize, paths: usize, seed: u64) -> PathBatch {
    let sqrt_dt = grid.dt().sqrt();
    let mut increments = vec![Array2::zeros((dim, paths)); grid.steps];
    for m in 0..paths {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(m as u64);
        for block in increments.iter_mut() {
            for i in 0..dim {
                let draw: f64 = rng.sample(StandardNormal);
                block[(i, m)] = sqrt_dt * draw;
            }
        }
    }
    PathBatch {
        grid,
        dim,
        paths,
        increments,
    }
}

impl PathBatch {
    /// Builds a batch from explicit per-step increment blocks (d×M each) —
    /// handy for driving the scheme with hand-picked noise.
    pub fn from_blocks(grid: TimeGrid, blocks: Vec<Array2<f64>>) -> PathBatch {
        assert_eq!(blocks.len(), grid.steps, "one increment block per step");
        let (dim, paths) = blocks[0].dim();
        for b in &blocks {
            assert_eq!(b.dim(), (dim, paths), "increment blocks must share a shape");
        }
        PathBatch {
            grid,
            dim,
            paths,
            increments: blocks,
        }
    }

    /// The d×M increment block of step `n`.
    pub fn step_block(&self, n: usize) -> &Array2<f64> {
        &self.increments[n]
    }

    /// Increments of one path as an N×d array (row n = step n).
    pub fn path_increments(&self, m: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.grid.steps, self.dim));
        for (n, block) in self.increments.iter().enumerate() {
            for i in 0..self.dim {
                out[(n, i)] = block[(i, m)];
            }
        }
        out
    }

    /// Restricts the batch to a contiguous range of paths (shared-nothing
    /// shard for one worker thread).
    pub fn shard(&self, start: usize, count: usize) -> PathBatch {
        assert!(start + count <= self.paths);
        let increments = self
            .increments
            .iter()
            .map(|b| b.slice(ndarray::s![.., start..start + count]).to_owned())
            .collect();
        PathBatch {
            grid: self.grid,
            dim: self.dim,
            paths: count,
            increments,
        }
    }

    /// Sums consecutive groups of `factor` increments, producing the same
    /// Brownian paths on a grid `factor` times coarser. Each group is summed
    /// left to right, so coarsening by the full step count reproduces the
    /// plain running total of the fine increments bit for bit.
    pub fn coarsen(&self, factor: usize) -> Result<PathBatch, SamplerError> {
        if factor == 0 || self.grid.steps % factor != 0 {
            return Err(SamplerError::BadCoarsenFactor {
                factor,
                steps: self.grid.steps,
            });
        }
        let coarse_steps = self.grid.steps / factor;
        let mut increments = Vec::with_capacity(coarse_steps);
        for k in 0..coarse_steps {
            let mut block = self.increments[k * factor].clone();
            for j in 1..factor {
                block += &self.increments[k * factor + j];
            }
            increments.push(block);
        }
        Ok(PathBatch {
            grid: TimeGrid::new(self.grid.horizon, coarse_steps),
            dim: self.dim,
            paths: self.paths,
            increments,
        })
    }
}

/// One explicit step of the coupled system, built as graph nodes.
pub struct EulerStep<'g> {
    /// `X_{n+1} = X_n + mu Δt + sigma ΔW` (d×M).
    pub x_next: Node<'g>,
    /// `phi Δt` (length M) — the drift part of the Y update.
    pub y_drift: Node<'g>,
    /// `Zᵀ sigma ΔW` (length M) — the diffusion part of the Y update.
    pub y_diffusion: Node<'g>,
}

/// Advances one step. `x`, `y`, `z` are the current batched nodes; `dw` the
/// increment block of this step. Coefficients are evaluated through the
/// problem's callbacks so the step stays differentiable, including the
/// coupling of the forward process to `y` and `z` when the drift uses them.
pub fn euler_step<'g>(
    g: &'g Graph,
    problem: &FbsdeProblem,
    t: f64,
    x: Node<'g>,
    y: Node<'g>,
    z: Node<'g>,
    dt: f64,
    dw: &Array2<f64>,
) -> Result<EulerStep<'g>, SamplerError> {
    let args = CoeffArgs { t, x, y, z };
    let sigma_dw = problem.diffusion.apply_increment(g, x, dw);
    if !sigma_dw.value().is_finite() {
        return Err(SamplerError::NonFiniteCoefficient { coefficient: "sigma" });
    }
    let mut x_next = x + sigma_dw;
    if let Some(mu) = &problem.drift {
        let drift = mu(&args);
        if !drift.value().is_finite() {
            return Err(SamplerError::NonFiniteCoefficient { coefficient: "mu" });
        }
        x_next = x_next + drift.scale(dt);
    }
    let phi = (problem.driver)(&args);
    if !phi.value().is_finite() {
        return Err(SamplerError::NonFiniteCoefficient { coefficient: "phi" });
    }
    Ok(EulerStep {
        x_next,
        y_drift: phi.scale(dt),
        y_diffusion: z.col_dots(sigma_dw),
    })
}

/// Euler scheme for componentwise geometric Brownian motion
/// (`dX = mu X dt + sigma X dW` per component) along one path's increments
/// (N×d). Returns the full path, (N+1)×d.
pub fn gbm_euler_path(x0: &[f64], mu: f64, sigma: f64, dt: f64, increments: &Array2<f64>) -> Array2<f64> {
    let (steps, dim) = increments.dim();
    assert_eq!(dim, x0.len());
    let mut path = Array2::zeros((steps + 1, dim));
    for (i, v) in x0.iter().enumerate() {
        path[(0, i)] = *v;
    }
    for n in 0..steps {
        for i in 0..dim {
            let x = path[(n, i)];
            path[(n + 1, i)] = x + mu * x * dt + sigma * x * increments[(n, i)];
        }
    }
    path
}

/// Exact solution of componentwise geometric Brownian motion driven by the
/// same increments: `X_{n+1} = X_n exp((mu - sigma²/2) Δt + sigma ΔW_n)`.
pub fn gbm_exact_path(x0: &[f64], mu: f64, sigma: f64, dt: f64, increments: &Array2<f64>) -> Array2<f64> {
    let (steps, dim) = increments.dim();
    assert_eq!(dim, x0.len());
    let drift = (mu - 0.5 * sigma * sigma) * dt;
    let mut path = Array2::zeros((steps + 1, dim));
    for (i, v) in x0.iter().enumerate() {
        path[(0, i)] = *v;
    }
    for n in 0..steps {
        for i in 0..dim {
            path[(n + 1, i)] = path[(n, i)] * (drift + sigma * increments[(n, i)]).exp();
        }
    }
    path
}

/// Root-mean-square terminal error of the Euler scheme at each step count,
/// all levels driven by one set of fine paths via [`PathBatch::coarsen`].
/// For scalar GBM the exact terminal value depends only on the total
/// increment, so every level is compared against the same reference.
pub fn strong_error_study(
    mu: f64,
    sigma: f64,
    x0: f64,
    horizon: f64,
    step_counts: &[usize],
    paths: usize,
    seed: u64,
) -> Vec<(usize, f64)> {
    assert!(!step_counts.is_empty());
    let finest = *step_counts.iter().max().unwrap();
    for &n in step_counts {
        assert!(finest % n == 0, "step counts must divide the finest ({finest})");
    }
    let batch = sample_increments(TimeGrid::new(horizon, finest), 1, paths, seed);

    // Exact terminal per path from the fine increments' running total.
    let drift = (mu - 0.5 * sigma * sigma) * horizon;
    let exact: Vec<f64> = (0..paths)
        .map(|m| {
            let incs = batch.path_increments(m);
            let w_total: f64 = incs.column(0).sum();
            x0 * (drift + sigma * w_total).exp()
        })
        .collect();

    step_counts
        .iter()
        .map(|&n| {
            let coarse = batch.coarsen(finest / n).expect("divisibility checked");
            let dt = coarse.grid.dt();
            let mse: f64 = (0..paths)
                .map(|m| {
                    let incs = coarse.path_increments(m);
                    let path = gbm_euler_path(&[x0], mu, sigma, dt, &incs);
                    let err = path[(n, 0)] - exact[m];
                    err * err
                })
                .sum::<f64>()
                / paths as f64;
            (n, mse.sqrt())
        })
        .collect()
}

/// Step counts per training level, coarse to fine. The default doubles the
/// step count per level starting from 2: halving the step size level by
/// level, e.g. `[2, 4, 8, 16, 32]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSchedule {
    pub steps_per_level: Vec<usize>,
    pub iterations_per_level: Vec<usize>,
}

impl LevelSchedule {
    pub fn new(steps_per_level: Vec<usize>, iterations_per_level: Vec<usize>) -> Result<LevelSchedule, String> {
        if steps_per_level.is_empty() {
            return Err("level schedule needs at least one level".into());
        }
        if steps_per_level.len() != iterations_per_level.len() {
            return Err(format!(
                "schedule has {} level step counts but {} iteration counts",
                steps_per_level.len(),
                iterations_per_level.len()
            ));
        }
        if steps_per_level.iter().any(|&s| s == 0) {
            return Err("level step counts must be positive".into());
        }
        if steps_per_level.windows(2).any(|w| w[1] <= w[0]) {
            return Err("level step counts must be strictly increasing".into());
        }
        Ok(LevelSchedule {
            steps_per_level,
            iterations_per_level,
        })
    }

    /// `levels` levels whose step size shrinks by `factor` each level:
    /// step counts `coarsest * factor^l`, equal iterations per level.
    pub fn geometric(coarsest: usize, factor: usize, levels: usize, iterations_per_level: usize) -> LevelSchedule {
        assert!(coarsest > 0 && factor > 1 && levels > 0);
        let steps = (0..levels).map(|l| coarsest * factor.pow(l as u32)).collect();
        LevelSchedule::new(steps, vec![iterations_per_level; levels]).expect("geometric schedule is valid")
    }

    pub fn levels(&self) -> usize {
        self.steps_per_level.len()
    }

    pub fn total_iterations(&self) -> usize {
        self.iterations_per_level.iter().sum()
    }
}

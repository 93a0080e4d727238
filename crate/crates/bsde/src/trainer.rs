//! Training: batched rollout of the discretized system, the residual loss,
//! Adam, and the single-/multilevel optimization loops.
//!
//! One network — one parameter set — is evaluated at every grid time, so the
//! rollout ties all time steps to the same Θ:
//!
//! ```text
//! Y_n = u_Θ(t_n, X_n)        Z_n = ∇ₓu_Θ(t_n, X_n)
//! residual_n = Y_{n+1} − Y_n − φ(t_n, X_n, Y_n, Z_n) Δt − Z_nᵀ σ ΔW_n
//! loss(Θ)    = Σ_{m,n} residual² + Σ_m (Y_N − g(X_N))²   [+ Σ_m ‖Z_N − g′(X_N)‖²]
//! ```
//!
//! Because `Z_n` is itself a gradient emitted as graph nodes, the parameter
//! gradient of the loss differentiates *through* it — the engine's
//! second-order machinery is what makes this loss trainable at all.
//!
//! Multilevel training runs the same loop over a schedule of step counts,
//! coarse to fine, carrying parameters (and optimizer state) across levels;
//! a single-level run is literally the one-level schedule.

use std::time::Instant;

use ndarray::{Array1, Array2};

use crate::graph::{grad, Graph, Node, Tensor};
use crate::nets::{BoundNet, NetConfig, NetworkParams};
use crate::problems::FbsdeProblem;
use crate::sampler::{euler_step, sample_increments, LevelSchedule, PathBatch, SamplerError, TimeGrid};

#[derive(Clone, Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("non-finite state at step {step}, path {path}")]
    NonFiniteState { step: usize, path: usize },
    #[error("step {step}: {source}")]
    Coefficient { step: usize, source: SamplerError },
}

impl RolloutError {
    fn offset_paths(self, offset: usize) -> RolloutError {
        match self {
            RolloutError::NonFiniteState { step, path } => RolloutError::NonFiniteState {
                step,
                path: path + offset,
            },
            other => other,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("terminal-gradient loss term requested but the problem provides no terminal gradient")]
    MissingTerminalGradient,
    #[error("iteration {iteration}: {source}")]
    Rollout { iteration: usize, source: RolloutError },
    #[error("loss diverged at iteration {iteration} (value {loss:e}); try a smaller learning rate")]
    Diverged { iteration: usize, loss: f64 },
}

/// First path (column) holding a non-finite entry, if any.
fn first_non_finite_path(value: &Tensor) -> Option<usize> {
    match value {
        Tensor::Scalar(v) => (!v.is_finite()).then_some(0),
        Tensor::Vector(v) => v.iter().position(|x| !x.is_finite()),
        Tensor::Matrix(m) => (0..m.ncols()).find(|&c| m.column(c).iter().any(|x| !x.is_finite())),
    }
}

/// The discretized system rolled out as graph nodes, one batched node per
/// time step (one path per column).
pub struct Rollout<'g> {
    /// States X_n: N+1 nodes, d×M each.
    pub x: Vec<Node<'g>>,
    /// Values Y_n: N+1 length-M nodes.
    pub y: Vec<Node<'g>>,
    /// Spatial gradients Z_n: N+1 nodes, d×M each.
    pub z: Vec<Node<'g>>,
    /// One-step residuals: N length-M nodes.
    pub residuals: Vec<Node<'g>>,
}

/// Rolls out the scheme with an arbitrary evaluator `(t, x) -> (y, z)`.
/// `initial` seeds every column of X₀ (an input node, so spatial gradients
/// exist at t = 0). The network version is [`rollout`]; passing a closed-form
/// solution instead measures pure discretization error.
pub fn rollout_with<'g, E>(
    g: &'g Graph,
    problem: &FbsdeProblem,
    batch: &PathBatch,
    initial: &Array1<f64>,
    eval: E,
) -> Result<Rollout<'g>, RolloutError>
where
    E: Fn(f64, Node<'g>) -> (Node<'g>, Node<'g>),
{
    assert_eq!(batch.dim, problem.dim, "batch dimension does not match problem");
    assert_eq!(initial.len(), problem.dim, "initial state dimension mismatch");
    let steps = batch.grid.steps;
    let dt = batch.grid.dt();

    let x0 = Array2::from_shape_fn((problem.dim, batch.paths), |(i, _)| initial[i]);
    let mut xs = vec![g.input(Tensor::Matrix(x0))];
    let mut ys = Vec::with_capacity(steps + 1);
    let mut zs = Vec::with_capacity(steps + 1);
    let mut drift_parts = Vec::with_capacity(steps);
    let mut diffusion_parts = Vec::with_capacity(steps);

    for n in 0..=steps {
        let t = batch.grid.time(n);
        let (y, z) = eval(t, xs[n]);
        if let Some(path) = first_non_finite_path(&y.value()).or_else(|| first_non_finite_path(&z.value())) {
            return Err(RolloutError::NonFiniteState { step: n, path });
        }
        ys.push(y);
        zs.push(z);
        if n == steps {
            break;
        }
        let step = euler_step(g, problem, t, xs[n], y, z, dt, batch.step_block(n))
            .map_err(|source| RolloutError::Coefficient { step: n, source })?;
        if let Some(path) = first_non_finite_path(&step.x_next.value()) {
            return Err(RolloutError::NonFiniteState { step: n + 1, path });
        }
        drift_parts.push(step.y_drift);
        diffusion_parts.push(step.y_diffusion);
        xs.push(step.x_next);
    }

    let residuals = (0..steps)
        .map(|n| ys[n + 1] - ys[n] - drift_parts[n] - diffusion_parts[n])
        .collect();
    Ok(Rollout {
        x: xs,
        y: ys,
        z: zs,
        residuals,
    })
}

/// Rolls out with the network: `y = u_Θ(t, ·)`, `z = ∇ₓu_Θ(t, ·)`, starting
/// from the problem's initial state.
pub fn rollout<'g>(
    g: &'g Graph,
    problem: &FbsdeProblem,
    net: &BoundNet<'g>,
    batch: &PathBatch,
) -> Result<Rollout<'g>, RolloutError> {
    rollout_with(g, problem, batch, &problem.initial_state, |t, x| {
        net.gradient_x_cols(t, x)
    })
}

/// The training loss: summed squared residuals plus the squared terminal
/// mismatch, and optionally the squared terminal-gradient mismatch.
pub fn loss_node<'g>(
    rollout: &Rollout<'g>,
    problem: &FbsdeProblem,
    use_terminal_grad: bool,
) -> Result<Node<'g>, TrainError> {
    let last = rollout.y.len() - 1;
    let x_terminal = rollout.x[last];
    let mismatch = rollout.y[last] - (problem.terminal)(x_terminal);
    let mut total = mismatch.square().sum();
    for r in &rollout.residuals {
        total = total + r.square().sum();
    }
    if use_terminal_grad {
        let g_grad = problem
            .terminal_grad
            .as_ref()
            .ok_or(TrainError::MissingTerminalGradient)?;
        total = total + (rollout.z[last] - g_grad(x_terminal)).square().sum();
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> AdamHyper {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates over the flat parameter vector.
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u32,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
        }
    }

    /// First-moment estimates (exposed for inspection in tests/tools).
    pub fn first_moments(&self) -> &[f64] {
        &self.m
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, hyper: &AdamHyper) {
        assert_eq!(params.len(), grads.len(), "gradient length mismatch");
        assert_eq!(params.len(), self.m.len(), "moment length mismatch");
        self.step_count += 1;
        let m_corr = 1.0 - hyper.beta1.powi(self.step_count as i32);
        let v_corr = 1.0 - hyper.beta2.powi(self.step_count as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = hyper.beta1 * self.m[i] + (1.0 - hyper.beta1) * g;
            self.v[i] = hyper.beta2 * self.v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = self.m[i] / m_corr;
            let v_hat = self.v[i] / v_corr;
            params[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub net: NetConfig,
    /// Iterations for a single-level run; ignored when `schedule` is set.
    pub iterations: usize,
    /// Paths per batch (M).
    pub batch_paths: usize,
    /// Time steps (N) for a single-level run; ignored when `schedule` is set.
    pub steps: usize,
    pub learning_rate: f64,
    pub adam: AdamHyper,
    pub use_terminal_grad_term: bool,
    pub seed: u64,
    /// Fresh paths every iteration (the default); `false` reuses one batch,
    /// a fixed-dataset mode for debugging.
    pub resample: bool,
    /// Coarse-to-fine step-count schedule; `None` trains single-level.
    pub schedule: Option<LevelSchedule>,
    /// Worker threads sharding each batch (1 = fully sequential).
    pub threads: usize,
    /// Evaluate the t=0 prediction every this many iterations.
    pub y0_log_every: usize,
}

impl TrainConfig {
    /// Defaults everything but the essentials: batch of 100 paths over 50
    /// steps, learning rate 1e-3, resampling on, single-threaded.
    pub fn new(net: NetConfig, iterations: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            net,
            iterations,
            batch_paths: 100,
            steps: 50,
            learning_rate: 1e-3,
            adam: AdamHyper::default(),
            use_terminal_grad_term: false,
            seed,
            resample: true,
            schedule: None,
            threads: 1,
            y0_log_every: 1,
        }
    }

    fn validate(&self, problem: &FbsdeProblem) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.net.state_dim != problem.dim {
            return fail(format!(
                "network state_dim {} does not match problem dimension {}",
                self.net.state_dim, problem.dim
            ));
        }
        if self.batch_paths == 0 {
            return fail("batch_paths must be at least 1".into());
        }
        if self.schedule.is_none() && self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.threads == 0 {
            return fail("threads must be at least 1".into());
        }
        if self.y0_log_every == 0 {
            return fail("y0_log_every must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub iteration: usize,
    /// Schedule level this iteration ran at (0 for single-level runs).
    pub level: usize,
    pub loss: f64,
    /// Wall-clock seconds spent on this iteration.
    pub elapsed_seconds: f64,
    /// Network prediction at (0, ξ), present on logged iterations.
    pub y0_estimate: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    /// Final network prediction at (0, ξ) — the quantity the whole scheme
    /// approximates.
    pub final_y0: f64,
    pub total_seconds: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

pub struct TrainOutcome {
    pub params: NetworkParams,
    pub report: TrainReport,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic seed stream: index 0 seeds parameter initialization, index
/// 1 + i seeds the path batch of iteration i.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(0x243F_6A88_85A3_08D3)))
}

enum ShardError {
    Rollout(RolloutError),
    MissingTerminalGradient,
}

/// Loss and flat parameter gradient on one shard, built on its own graph.
fn shard_loss_gradient(
    problem: &FbsdeProblem,
    params: &NetworkParams,
    shard: &PathBatch,
    use_terminal_grad: bool,
    path_offset: usize,
) -> Result<(f64, Vec<f64>), ShardError> {
    let g = Graph::new();
    let flat = g.input(Tensor::Vector(Array1::from_vec(params.flat())));
    let net = params.bind_from_flat(flat);
    let roll = rollout(&g, problem, &net, shard)
        .map_err(|e| ShardError::Rollout(e.offset_paths(path_offset)))?;
    let loss = loss_node(&roll, problem, use_terminal_grad).map_err(|e| match e {
        TrainError::MissingTerminalGradient => ShardError::MissingTerminalGradient,
        _ => unreachable!("loss_node only raises the terminal-gradient error"),
    })?;
    let loss_value = loss.value().scalar();
    let grad_flat = grad(loss, &[flat])[0].value().flat();
    Ok((loss_value, grad_flat))
}

/// Contiguous path ranges for `workers` shards (earlier shards one longer
/// when the split is uneven; never more shards than paths).
fn shard_ranges(paths: usize, workers: usize) -> Vec<(usize, usize)> {
    let workers = workers.clamp(1, paths.max(1));
    let base = paths / workers;
    let extra = paths % workers;
    let mut ranges = Vec::with_capacity(workers);
    let mut start = 0;
    for w in 0..workers {
        let len = base + usize::from(w < extra);
        if len > 0 {
            ranges.push((start, len));
            start += len;
        }
    }
    ranges
}

/// Loss and flat parameter gradient for one batch. With `threads > 1` the
/// paths are split into contiguous shards, one independent graph per worker;
/// shard results are reduced in shard order, so the outcome is deterministic
/// for a fixed thread count (and equals the sequential result up to
/// floating-point summation order). `iteration` only tags errors.
pub fn batch_loss_gradient(
    problem: &FbsdeProblem,
    params: &NetworkParams,
    batch: &PathBatch,
    use_terminal_grad: bool,
    threads: usize,
    iteration: usize,
) -> Result<(f64, Vec<f64>), TrainError> {
    let ranges = shard_ranges(batch.paths, threads);
    let results: Vec<Result<(f64, Vec<f64>), ShardError>> = if ranges.len() <= 1 {
        vec![shard_loss_gradient(problem, params, batch, use_terminal_grad, 0)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = ranges
                .iter()
                .map(|&(start, len)| {
                    let shard = batch.shard(start, len);
                    scope.spawn(move || {
                        shard_loss_gradient(problem, params, &shard, use_terminal_grad, start)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("shard worker panicked"))
                .collect()
        })
    };

    let mut total_loss = 0.0;
    let mut total_grad = vec![0.0; params.flat_len()];
    for result in results {
        let (loss, grad_flat) = result.map_err(|e| match e {
            ShardError::Rollout(source) => TrainError::Rollout { iteration, source },
            ShardError::MissingTerminalGradient => TrainError::MissingTerminalGradient,
        })?;
        total_loss += loss;
        for (acc, g) in total_grad.iter_mut().zip(grad_flat) {
            *acc += g;
        }
    }
    Ok((total_loss, total_grad))
}

/// Trains the value network on the problem. `config.schedule` selects
/// multilevel mode; otherwise a single level at `config.steps` runs for
/// `config.iterations`. A one-level schedule and the equivalent single-level
/// run are the same computation, bit for bit.
pub fn train(problem: &FbsdeProblem, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate(problem)?;
    if config.use_terminal_grad_term && problem.terminal_grad.is_none() {
        return Err(TrainError::MissingTerminalGradient);
    }
    let schedule = match &config.schedule {
        Some(s) => s.clone(),
        None => LevelSchedule::new(vec![config.steps], vec![config.iterations])
            .map_err(TrainError::InvalidConfig)?,
    };

    let mut params = NetworkParams::init(config.net, derive_seed(config.seed, 0));
    let mut adam = AdamState::new(params.flat_len());
    let mut records = Vec::with_capacity(schedule.total_iterations());
    let initial = problem
        .initial_state
        .as_slice()
        .expect("initial state is contiguous")
        .to_vec();
    let started = Instant::now();
    let mut iteration = 0usize;

    for (level, (&steps, &level_iters)) in schedule
        .steps_per_level
        .iter()
        .zip(&schedule.iterations_per_level)
        .enumerate()
    {
        let grid = TimeGrid::new(problem.horizon, steps);
        for _ in 0..level_iters {
            let iter_started = Instant::now();
            let batch_index = if config.resample { 1 + iteration as u64 } else { 1 };
            let batch_seed = derive_seed(config.seed, batch_index);
            let batch = sample_increments(grid, problem.dim, config.batch_paths, batch_seed);

            let (loss, grad_flat) = batch_loss_gradient(
                problem,
                &params,
                &batch,
                config.use_terminal_grad_term,
                config.threads,
                iteration,
            )?;
            if !loss.is_finite() || loss > 1e12 {
                return Err(TrainError::Diverged { iteration, loss });
            }

            let mut flat = params.flat();
            adam.step(&mut flat, &grad_flat, config.learning_rate, &config.adam);
            params.set_flat(&flat);
            params.project_stable_blocks();

            let y0_estimate =
                (iteration % config.y0_log_every == 0).then(|| params.value(0.0, &initial));
            records.push(TrainRecord {
                iteration,
                level,
                loss,
                elapsed_seconds: iter_started.elapsed().as_secs_f64(),
                y0_estimate,
            });
            iteration += 1;
        }
    }

    let final_y0 = params.value(0.0, &initial);
    Ok(TrainOutcome {
        params,
        report: TrainReport {
            records,
            final_y0,
            total_seconds: started.elapsed().as_secs_f64(),
        },
    })
}

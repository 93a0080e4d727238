//! Neural solver for high-dimensional semi-linear parabolic PDEs.
//!
//! The solver recasts a terminal-value PDE problem as a coupled
//! forward–backward stochastic system: a forward diffusion X explores
//! space, while the solution value Y and its spatial gradient Z ride
//! along the same paths. A single network `u(t, x)` (fully connected,
//! residual, or norm-constrained residual) plays the role of the
//! solution; its graph gradient supplies Z. Training drives the
//! one-step Euler residuals of the backward variable and the terminal
//! mismatch to zero over freshly simulated path batches, optionally
//! sweeping a coarse-to-fine schedule of time grids to cut wall-clock
//! cost.
//!
//! Everything is deterministic given a seed: path noise comes from
//! counter-addressed stream RNGs, so batch b of a run is reproducible
//! in isolation and reruns are byte-identical.
//!
//! Module map:
//!
//! - [`graph`]: arena-based scalar/vector/matrix computation graph with
//!   reverse-mode differentiation. Adjoints are emitted as ordinary
//!   nodes, so gradients can be differentiated again.
//! - [`nets`]: the three value-network architectures over shared
//!   parameter flattening, plus finite-difference checking helpers.
//! - [`problems`]: benchmark problem definitions (option pricing,
//!   stochastic control, phase-field reaction) with closed-form or
//!   Monte Carlo reference solutions.
//! - [`sampler`]: seeded Gaussian increment streams, Euler path
//!   stepping, time grids, level schedules, and a strong-convergence
//!   study used to validate the stepping order.
//! - [`trainer`]: the training loop — rollout, residual loss, Adam —
//!   with single-grid and multilevel modes.
//! - [`report`]: post-training evaluation along fresh paths, error
//!   curves, generalization sweeps away from the trained start point,
//!   and the CSV writers shared by the command-line tools.
//! - [`cli`]: config-file driven train / evaluate / generalize /
//!   convergence commands behind the `bsde` binary.
//!
//! Each major capability has a runnable demonstration under
//! `examples/`:
//!
//! ```text
//! cargo run --release --example nested_gradients          # derivatives of derivatives
//! cargo run --release --example network_spatial_gradient  # ∇u vs finite differences
//! cargo run --release --example stable_blocks             # norm-constrained residual algebra
//! cargo run --release --example driver_mapping            # PDE ↔ backward-driver consistency
//! cargo run --release --example strong_convergence        # Euler stepping order ~ 1/2
//! cargo run --release --example train_quickstart          # small end-to-end training run
//! cargo run --release --example multilevel_speedup        # coarse-to-fine vs flat training
//! cargo run --release --example generalization            # accuracy away from the start point
//! cargo run --release --example hjb_oracle                # Monte Carlo reference behavior
//! ```

pub mod cli;
pub mod graph;
pub mod nets;
pub mod problems;
pub mod report;
pub mod sampler;
pub mod trainer;

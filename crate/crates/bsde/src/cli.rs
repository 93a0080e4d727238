//! Config-driven command layer: the TOML run configuration, checkpoint
//! wiring, and the four experiment commands (train, evaluate, generalize,
//! convergence) that the `bsde` binary dispatches to.
//!
//! Every command creates the output directory, echoes the fully resolved
//! configuration into it as `resolved_config.toml`, and writes its CSV
//! artifacts there. All randomness derives from `training.seed`, so a rerun
//! from the echoed config reproduces every artifact byte for byte (wall
//! clock is suppressed in CSVs unless `output.record_wall_clock` is set).
//!
//! Exit-code contract (used by the binary): 0 success, 1 I/O or internal
//! failure, 2 configuration error, 3 checkpoint error, 4 numerical
//! divergence.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::nets::{load_checkpoint, save_checkpoint, NetConfig, NetworkParams};
use crate::problems::{
    allen_cahn, black_scholes, hamilton_jacobi_bellman, FbsdeProblem, TerminalForm,
};
use crate::report::{
    evaluate_error_curve, generalization_sweep, write_convergence, write_error_curve,
    write_generalization, write_loss_curve, write_sample_paths, ReportError,
};
use crate::sampler::{strong_error_study, LevelSchedule};
use crate::trainer::{derive_seed, train, TrainError, TrainConfig};

/// Offsets added to `training.seed` when deriving the seeds of the
/// non-training commands. Far above any realistic iteration count so the
/// derived streams never collide with training batch seeds.
const EVALUATE_SEED_TAG: u64 = 1 << 40;
const GENERALIZE_SEED_TAG: u64 = (1 << 40) + 1;
const CONVERGENCE_SEED_TAG: u64 = (1 << 40) + 2;

/// Perturbation draws per distance in the generalization command.
const GENERALIZE_DRAWS: usize = 100;

/// Step counts of the convergence study.
const CONVERGENCE_STEPS: [usize; 4] = [8, 16, 32, 64];
/// Path count of the convergence study.
const CONVERGENCE_PATHS: usize = 4096;

/// Command-layer error; [`CliError::exit_code`] maps each variant onto the
/// documented process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) | CliError::Internal(_) => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::InvalidConfig(_) | TrainError::MissingTerminalGradient => {
                CliError::Config(e.to_string())
            }
            TrainError::Diverged { .. } | TrainError::Rollout { .. } => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> CliError {
        match e {
            ReportError::Problem(_) | ReportError::InvalidSweep(_) => {
                CliError::Config(e.to_string())
            }
            ReportError::Step { .. } | ReportError::NonFinite { .. } => {
                CliError::Numeric(e.to_string())
            }
            ReportError::Io(io) => CliError::Io(io),
        }
    }
}

fn default_dim() -> usize {
    5
}
fn default_horizon() -> f64 {
    1.0
}
fn default_rate() -> f64 {
    0.05
}
fn default_vol() -> f64 {
    0.4
}
fn default_xi_mode() -> String {
    "default".into()
}

/// `[problem]`: which equation to solve and its coefficients. `r` and
/// `sigma` parameterize the Black–Scholes dynamics and the convergence
/// study; the other problems carry fixed coefficients and ignore them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// `black_scholes`, `hjb`, or `allen_cahn`.
    pub name: String,
    /// State dimension (default 5).
    #[serde(default = "default_dim")]
    pub d: usize,
    /// Time horizon (default 1.0).
    #[serde(rename = "T", default = "default_horizon")]
    pub horizon: f64,
    /// Interest rate / GBM drift (default 0.05).
    #[serde(default = "default_rate")]
    pub r: f64,
    /// Volatility (default 0.4).
    #[serde(default = "default_vol")]
    pub sigma: f64,
    /// Start point: `default` (the problem's own convention: ones for
    /// black_scholes, zeros otherwise), `ones`, or `zeros`.
    #[serde(default = "default_xi_mode")]
    pub xi_mode: String,
}

fn default_architecture() -> String {
    "fc".into()
}
fn default_width() -> usize {
    32
}
fn default_layers() -> usize {
    2
}
fn default_epsilon() -> f64 {
    0.01
}
fn default_step_scale() -> f64 {
    1.0
}

/// `[network]`: value-network shape shared by training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// `fc`, `resnet`, or `naisnet` (default `fc`).
    #[serde(default = "default_architecture")]
    pub architecture: String,
    /// Hidden width (default 32).
    #[serde(default = "default_width")]
    pub width: usize,
    /// Hidden layers / blocks (default 2).
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Stability margin of the stable residual blocks (default 0.01).
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Residual step size (default 1.0).
    #[serde(default = "default_step_scale")]
    pub h: f64,
}

impl Default for NetworkSection {
    fn default() -> NetworkSection {
        NetworkSection {
            architecture: default_architecture(),
            width: default_width(),
            layers: default_layers(),
            epsilon: default_epsilon(),
            h: default_step_scale(),
        }
    }
}

fn default_batch() -> usize {
    100
}
fn default_steps() -> usize {
    20
}
fn default_iterations() -> usize {
    500
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_threads() -> usize {
    1
}

/// `[training]`: optimization settings. The seed is deliberately required —
/// there are no time-based defaults anywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    /// Paths per batch (default 100).
    #[serde(rename = "batch_M", default = "default_batch")]
    pub batch_m: usize,
    /// Euler steps per path (default 20); the finest schedule level
    /// supersedes this when `[schedule]` is present.
    #[serde(rename = "steps_N", default = "default_steps")]
    pub steps_n: usize,
    /// Optimizer iterations (default 500); ignored when `[schedule]` is
    /// present, which carries its own per-level counts.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Adam learning rate (default 1e-3).
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Master seed for every random draw of the run. Required.
    pub seed: u64,
    /// Add the terminal-gradient penalty to the loss (default false).
    #[serde(default)]
    pub use_terminal_grad_term: bool,
    /// Worker threads for batch evaluation (default 1). Results are
    /// identical at any thread count.
    #[serde(default = "default_threads")]
    pub threads: usize,
}

/// `[schedule]`: optional coarse-to-fine step-count schedule. When present,
/// training runs one segment per level, carrying parameters and optimizer
/// state across boundaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// Step counts, strictly increasing (e.g. [2, 4, 8, 16, 32]).
    pub levels: Vec<usize>,
    /// Iterations spent at each level; same length as `levels`.
    pub iterations_per_level: Vec<usize>,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

/// `[output]`: where artifacts go and whether CSVs carry wall-clock times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Output directory (default `out`), created if missing.
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    /// Write real per-iteration wall-clock seconds into loss_curve.csv.
    /// Off by default so reruns are byte-identical (default false).
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl Default for OutputSection {
    fn default() -> OutputSection {
        OutputSection {
            directory: default_directory(),
            record_wall_clock: false,
        }
    }
}

/// A full run configuration as parsed from TOML. Unknown keys anywhere are
/// rejected. `[problem]` and `[training]` are required (the latter because
/// of the mandatory seed); everything else falls back to documented
/// defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    #[serde(default)]
    pub network: NetworkSection,
    pub training: TrainingSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Reads and parses a TOML run configuration. Parse errors (including
/// unknown or missing keys) surface as [`CliError::Config`] with the
/// offending key named by the parser.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
}

/// Applies command-line overrides so the echoed config reflects what
/// actually ran.
pub fn apply_overrides(config: &mut RunConfig, out: Option<&Path>, threads: Option<usize>) {
    if let Some(dir) = out {
        config.output.directory = dir.to_path_buf();
    }
    if let Some(n) = threads {
        config.training.threads = n;
    }
}

impl RunConfig {
    /// Network shape resolved from the `[network]` and `[problem]` sections.
    pub fn net_config(&self) -> Result<NetConfig, CliError> {
        let architecture = self.network.architecture.parse().map_err(|e: String| {
            CliError::Config(format!("network.architecture: {e}"))
        })?;
        let mut cfg = NetConfig::new(
            self.problem.d,
            self.network.width,
            self.network.layers,
            architecture,
        );
        cfg.epsilon = self.network.epsilon;
        cfg.step_scale = self.network.h;
        Ok(cfg)
    }

    /// The start point selected by `problem.xi_mode`.
    pub fn initial_state(&self) -> Result<Array1<f64>, CliError> {
        let d = self.problem.d;
        match self.problem.xi_mode.as_str() {
            "ones" => Ok(Array1::ones(d)),
            "zeros" => Ok(Array1::zeros(d)),
            "default" => Ok(match self.problem.name.as_str() {
                "black_scholes" => Array1::ones(d),
                _ => Array1::zeros(d),
            }),
            other => Err(CliError::Config(format!(
                "problem.xi_mode: unknown mode `{other}` (expected default, ones, or zeros)"
            ))),
        }
    }

    /// Instantiates the configured equation.
    pub fn build_problem(&self) -> Result<FbsdeProblem, CliError> {
        let d = self.problem.d;
        let horizon = self.problem.horizon;
        let xi = self.initial_state()?;
        match self.problem.name.as_str() {
            "black_scholes" => Ok(black_scholes(d, self.problem.r, self.problem.sigma, horizon, xi)),
            "hjb" => Ok(hamilton_jacobi_bellman(d, horizon, xi)),
            "allen_cahn" => Ok(allen_cahn(d, horizon, xi, TerminalForm::SquaredNorm)),
            other => Err(CliError::Config(format!(
                "problem.name: unknown problem `{other}` (expected black_scholes, hjb, or allen_cahn)"
            ))),
        }
    }

    /// Full training configuration, including the optional level schedule.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = TrainConfig::new(
            self.net_config()?,
            self.training.iterations,
            self.training.seed,
        );
        cfg.batch_paths = self.training.batch_m;
        cfg.steps = self.training.steps_n;
        cfg.learning_rate = self.training.learning_rate;
        cfg.use_terminal_grad_term = self.training.use_terminal_grad_term;
        cfg.threads = self.training.threads;
        if let Some(s) = &self.schedule {
            let schedule = LevelSchedule::new(s.levels.clone(), s.iterations_per_level.clone())
                .map_err(|e| CliError::Config(format!("schedule: {e}")))?;
            cfg.schedule = Some(schedule);
        }
        Ok(cfg)
    }
}

/// Creates the output directory and echoes the resolved config into it.
fn start_run(config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = config.output.directory.clone();
    fs::create_dir_all(&dir)?;
    let text = toml::to_string_pretty(config)
        .map_err(|e| CliError::Internal(format!("cannot serialize resolved config: {e}")))?;
    fs::write(dir.join("resolved_config.toml"), text)?;
    Ok(dir)
}

fn describe_net(cfg: &NetConfig) -> String {
    format!(
        "{} (d={}, width={}, layers={}, epsilon={}, h={})",
        cfg.architecture, cfg.state_dim, cfg.hidden_width, cfg.hidden_layers, cfg.epsilon,
        cfg.step_scale
    )
}

/// Loads a checkpoint and verifies it matches the configured network shape;
/// a mismatch reports both shapes.
pub fn load_matching_checkpoint(
    config: &RunConfig,
    path: &Path,
) -> Result<NetworkParams, CliError> {
    let params = load_checkpoint(path).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    let expected = config.net_config()?;
    if params.config != expected {
        return Err(CliError::Checkpoint(format!(
            "checkpoint network {} does not match configured network {}",
            describe_net(&params.config),
            describe_net(&expected)
        )));
    }
    Ok(params)
}

/// Trains per the config and writes `loss_curve.csv` plus
/// `checkpoint.json` (the initialization checkpoint when iterations = 0).
pub fn cmd_train(config: &RunConfig) -> Result<(), CliError> {
    let problem = config.build_problem()?;
    let train_config = config.train_config()?;
    let dir = start_run(config)?;

    let outcome = train(&problem, &train_config)?;
    write_loss_curve(
        dir.join("loss_curve.csv"),
        &outcome.report,
        config.output.record_wall_clock,
    )?;
    save_checkpoint(&outcome.params, &dir.join("checkpoint.json"))
        .map_err(|e| CliError::Checkpoint(e.to_string()))?;

    println!(
        "trained {} for {} iterations: final loss {}, value at start {}",
        describe_net(&train_config.net),
        outcome.report.records.len(),
        outcome.report.final_loss().unwrap_or(f64::NAN),
        outcome.report.final_y0
    );
    println!("wrote {}", dir.join("loss_curve.csv").display());
    println!("wrote {}", dir.join("checkpoint.json").display());
    Ok(())
}

/// Evaluates a trained checkpoint on fresh paths and writes
/// `error_curve.csv` and `sample_paths.csv`.
pub fn cmd_evaluate(config: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let problem = config.build_problem()?;
    let params = load_matching_checkpoint(config, checkpoint)?;
    let dir = start_run(config)?;

    let seed = derive_seed(config.training.seed, EVALUATE_SEED_TAG);
    let (curve, samples) = evaluate_error_curve(
        &problem,
        &params,
        config.training.batch_m,
        config.training.steps_n,
        seed,
    )?;
    write_error_curve(dir.join("error_curve.csv"), &curve)?;
    write_sample_paths(dir.join("sample_paths.csv"), &samples)?;

    let last = *curve.mean_rel_err.last().expect("curve is never empty");
    println!(
        "evaluated {} paths over {} steps: mean relative error {} at t=0, {} at t={}",
        config.training.batch_m, config.training.steps_n, curve.mean_rel_err[0], last,
        problem.horizon
    );
    println!("wrote {}", dir.join("error_curve.csv").display());
    println!("wrote {}", dir.join("sample_paths.csv").display());
    Ok(())
}

/// Evaluates a trained checkpoint at perturbed start points and writes
/// `generalization.csv` plus a small metadata file describing the
/// perturbation protocol.
pub fn cmd_generalize(
    config: &RunConfig,
    checkpoint: &Path,
    distances: &[f64],
) -> Result<(), CliError> {
    let problem = config.build_problem()?;
    let params = load_matching_checkpoint(config, checkpoint)?;
    let dir = start_run(config)?;

    let seed = derive_seed(config.training.seed, GENERALIZE_SEED_TAG);
    let sweep = generalization_sweep(&problem, &params, distances, GENERALIZE_DRAWS, seed)?;
    let label = params.config.architecture.label().to_string();
    write_generalization(dir.join("generalization.csv"), &[(label, sweep.clone())])?;
    fs::write(
        dir.join("generalization_metadata.txt"),
        format!(
            "protocol: {}\ndraws_per_distance: {}\nabsolute_fallback: {}\nparams_checksum: {}\n",
            sweep.protocol, GENERALIZE_DRAWS, sweep.absolute_fallback, sweep.checksum_after
        ),
    )?;

    println!(
        "swept {} distances with {} draws each (parameters untouched, checksum {})",
        sweep.rows.len(),
        GENERALIZE_DRAWS,
        sweep.checksum_after
    );
    println!("wrote {}", dir.join("generalization.csv").display());
    Ok(())
}

/// Runs the scalar-GBM strong-convergence study with the configured drift,
/// volatility, and horizon, and writes `convergence.csv`. The study always
/// starts at x₀ = 1 and uses fixed step counts {8, 16, 32, 64} over 4096
/// paths.
pub fn cmd_convergence(config: &RunConfig) -> Result<(), CliError> {
    // Validate the problem section even though the study only needs its
    // coefficients, so malformed configs fail the same way everywhere.
    config.build_problem()?;
    let dir = start_run(config)?;

    let seed = derive_seed(config.training.seed, CONVERGENCE_SEED_TAG);
    let rows = strong_error_study(
        config.problem.r,
        config.problem.sigma,
        1.0,
        config.problem.horizon,
        &CONVERGENCE_STEPS,
        CONVERGENCE_PATHS,
        seed,
    );
    write_convergence(dir.join("convergence.csv"), &rows)?;

    for (i, (n, rms)) in rows.iter().enumerate() {
        if i == 0 {
            println!("N={n}: rms error {rms}");
        } else {
            println!("N={n}: rms error {rms} (ratio {})", rows[i - 1].1 / rms);
        }
    }
    println!("wrote {}", dir.join("convergence.csv").display());
    Ok(())
}

/// Parses a comma-separated distance list (e.g. `0,0.05,0.1`).
pub fn parse_distances(text: &str) -> Result<Vec<f64>, CliError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("distances: `{part}` is not a number")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Architecture;
    use crate::trainer::derive_seed;

    fn minimal_toml(dir: &Path, extra: &str) -> String {
        format!(
            "[problem]\nname = \"black_scholes\"\n{extra}\n[training]\nseed = 7\n\n\
             [output]\ndirectory = \"{}\"\n",
            dir.display()
        )
    }

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str::<RunConfig>(text).map_err(|e| CliError::Config(e.to_string()))
    }

    #[test]
    fn minimal_config_fills_documented_defaults() {
        let cfg = parse("[problem]\nname = \"black_scholes\"\n[training]\nseed = 7\n").unwrap();
        assert_eq!(cfg.problem.d, 5);
        assert_eq!(cfg.problem.horizon, 1.0);
        assert_eq!(cfg.problem.r, 0.05);
        assert_eq!(cfg.problem.sigma, 0.4);
        assert_eq!(cfg.problem.xi_mode, "default");
        assert_eq!(cfg.network, NetworkSection::default());
        assert_eq!(cfg.training.batch_m, 100);
        assert_eq!(cfg.training.steps_n, 20);
        assert_eq!(cfg.training.iterations, 500);
        assert_eq!(cfg.training.learning_rate, 1e-3);
        assert_eq!(cfg.training.seed, 7);
        assert!(!cfg.training.use_terminal_grad_term);
        assert_eq!(cfg.training.threads, 1);
        assert!(cfg.schedule.is_none());
        assert_eq!(cfg.output, OutputSection::default());

        let net = cfg.net_config().unwrap();
        assert_eq!(net.state_dim, 5);
        assert_eq!(net.hidden_width, 32);
        assert_eq!(net.architecture, Architecture::FullyConnected);
    }

    #[test]
    fn unknown_and_missing_keys_are_named() {
        let unknown_key = parse(
            "[problem]\nname = \"black_scholes\"\nstrike = 1.0\n[training]\nseed = 7\n",
        )
        .unwrap_err();
        assert!(unknown_key.to_string().contains("strike"), "{unknown_key}");
        assert_eq!(unknown_key.exit_code(), 2);

        let unknown_section =
            parse("[problem]\nname = \"black_scholes\"\n[training]\nseed = 7\n[extra]\nx = 1\n")
                .unwrap_err();
        assert!(unknown_section.to_string().contains("extra"), "{unknown_section}");

        let missing_name = parse("[problem]\nd = 3\n[training]\nseed = 7\n").unwrap_err();
        assert!(missing_name.to_string().contains("name"), "{missing_name}");

        let missing_seed = parse("[problem]\nname = \"hjb\"\n[training]\niterations = 5\n")
            .unwrap_err();
        assert!(missing_seed.to_string().contains("seed"), "{missing_seed}");
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let mut cfg = parse(
            "[problem]\nname = \"hjb\"\nd = 3\n[network]\narchitecture = \"naisnet\"\n\
             [training]\nseed = 11\n[schedule]\nlevels = [2, 4]\niterations_per_level = [5, 5]\n",
        )
        .unwrap();
        apply_overrides(&mut cfg, Some(Path::new("elsewhere")), Some(4));
        assert_eq!(cfg.output.directory, PathBuf::from("elsewhere"));
        assert_eq!(cfg.training.threads, 4);

        let echoed = toml::to_string_pretty(&cfg).unwrap();
        let reparsed: RunConfig = toml::from_str(&echoed).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn xi_modes_select_start_points() {
        let base = "[training]\nseed = 1\n";
        let bs = parse(&format!("[problem]\nname = \"black_scholes\"\nd = 3\n{base}")).unwrap();
        assert_eq!(bs.initial_state().unwrap(), Array1::<f64>::ones(3));
        let hjb = parse(&format!("[problem]\nname = \"hjb\"\nd = 3\n{base}")).unwrap();
        assert_eq!(hjb.initial_state().unwrap(), Array1::<f64>::zeros(3));
        let zeros = parse(&format!(
            "[problem]\nname = \"black_scholes\"\nd = 2\nxi_mode = \"zeros\"\n{base}"
        ))
        .unwrap();
        assert_eq!(zeros.initial_state().unwrap(), Array1::<f64>::zeros(2));
        let bad = parse(&format!(
            "[problem]\nname = \"black_scholes\"\nxi_mode = \"spiral\"\n{base}"
        ))
        .unwrap();
        let err = bad.initial_state().unwrap_err();
        assert!(err.to_string().contains("xi_mode"), "{err}");

        let unknown_problem =
            parse(&format!("[problem]\nname = \"heat\"\n{base}")).unwrap();
        match unknown_problem.build_problem() {
            Err(err) => {
                assert!(err.to_string().contains("heat"), "{err}");
                assert_eq!(err.exit_code(), 2);
            }
            Ok(_) => panic!("expected the unknown problem name to be rejected"),
        }
    }

    #[test]
    fn schedule_section_maps_to_a_level_schedule() {
        let cfg = parse(
            "[problem]\nname = \"black_scholes\"\n[training]\nseed = 3\n\
             [schedule]\nlevels = [2, 4, 8]\niterations_per_level = [10, 10, 10]\n",
        )
        .unwrap();
        let tc = cfg.train_config().unwrap();
        let schedule = tc.schedule.unwrap();
        assert_eq!(schedule.steps_per_level, vec![2, 4, 8]);
        assert_eq!(schedule.total_iterations(), 30);

        let bad = parse(
            "[problem]\nname = \"black_scholes\"\n[training]\nseed = 3\n\
             [schedule]\nlevels = [4, 2]\niterations_per_level = [10, 10]\n",
        )
        .unwrap();
        let err = bad.train_config().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn checkpoint_shape_mismatch_names_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let saved = NetworkParams::init(
            NetConfig::new(2, 8, 1, Architecture::FullyConnected),
            derive_seed(1, 0),
        );
        let path = dir.path().join("checkpoint.json");
        save_checkpoint(&saved, &path).unwrap();

        let cfg = parse(
            "[problem]\nname = \"black_scholes\"\nd = 2\n[network]\nwidth = 16\nlayers = 1\n\
             [training]\nseed = 1\n",
        )
        .unwrap();
        let err = load_matching_checkpoint(&cfg, &path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let message = err.to_string();
        assert!(message.contains("width=8") && message.contains("width=16"), "{message}");

        let missing = load_matching_checkpoint(&cfg, &dir.path().join("nope.json")).unwrap_err();
        assert_eq!(missing.exit_code(), 3);
    }

    #[test]
    fn zero_iteration_training_checkpoints_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let text = minimal_toml(
            dir.path(),
            "d = 2\n[network]\nwidth = 6\nlayers = 1\n[training2]\n",
        )
        .replace("[training2]\n", "");
        let mut cfg = parse(&text).unwrap();
        cfg.training.iterations = 0;
        cfg.training.batch_m = 4;
        cfg.training.steps_n = 3;
        cmd_train(&cfg).unwrap();

        assert_eq!(
            std::fs::read_to_string(dir.path().join("loss_curve.csv")).unwrap(),
            "iteration,level,loss,elapsed_seconds,y0_estimate\n"
        );
        let restored = load_checkpoint(&dir.path().join("checkpoint.json")).unwrap();
        let expected = NetworkParams::init(cfg.net_config().unwrap(), derive_seed(7, 0));
        assert_eq!(restored, expected);
        // The echoed config itself re-parses to the same resolved settings.
        let echoed = load_config(&dir.path().join("resolved_config.toml")).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn train_evaluate_generalize_pipeline_produces_the_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let text = minimal_toml(dir.path(), "d = 2\n[network]\nwidth = 6\nlayers = 1\n");
        let mut cfg = parse(&text).unwrap();
        cfg.training.iterations = 3;
        cfg.training.batch_m = 4;
        cfg.training.steps_n = 3;
        cmd_train(&cfg).unwrap();

        let checkpoint = dir.path().join("checkpoint.json");
        cmd_evaluate(&cfg, &checkpoint).unwrap();
        let curve = std::fs::read_to_string(dir.path().join("error_curve.csv")).unwrap();
        let mut lines = curve.lines();
        assert_eq!(lines.next(), Some("t,mean_rel_err,mean_plus_2std"));
        // Errors of a barely trained network are large but must be finite.
        assert_eq!(curve.lines().count(), 1 + cfg.training.steps_n + 1);
        for line in lines {
            for field in line.split(',') {
                assert!(field.parse::<f64>().unwrap().is_finite(), "bad line {line}");
            }
        }
        let samples = std::fs::read_to_string(dir.path().join("sample_paths.csv")).unwrap();
        assert_eq!(samples.lines().next(), Some("t,path_id,y_pred,y_exact"));
        assert_eq!(samples.lines().count(), 1 + 2 * (cfg.training.steps_n + 1));

        cmd_generalize(&cfg, &checkpoint, &[0.0, 0.5]).unwrap();
        let sweep = std::fs::read_to_string(dir.path().join("generalization.csv")).unwrap();
        assert_eq!(
            sweep.lines().next(),
            Some("architecture,rel_distance_pct,mean_rel_err_pct,stderr_pct")
        );
        assert_eq!(sweep.lines().count(), 3);
        assert!(sweep.lines().nth(1).unwrap().starts_with("fc,0,"));
        // Empty distance lists are a config-level error.
        let err = cmd_generalize(&cfg, &checkpoint, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn convergence_command_emits_the_expected_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse(&minimal_toml(dir.path(), "")).unwrap();
        cmd_convergence(&cfg).unwrap();

        let text = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "N,rms_error,ratio");
        assert_eq!(lines.len(), 5);
        for (i, expected_n) in [8usize, 16, 32, 64].iter().enumerate() {
            let fields: Vec<&str> = lines[i + 1].split(',').collect();
            assert_eq!(fields[0], expected_n.to_string());
            if i > 0 {
                let ratio: f64 = fields[2].parse().unwrap();
                assert!((1.2..=1.7).contains(&ratio), "ratio {ratio} out of band");
            }
        }
    }

    #[test]
    fn driftless_noise_free_convergence_decays_like_one_over_n() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse(&minimal_toml(dir.path(), "sigma = 0.0\nr = 0.5\n")).unwrap();
        cmd_convergence(&cfg).unwrap();

        let text = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
        let rows: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        // Pure drift: the Euler error is deterministic and halves with N.
        for pair in rows.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!((1.9..=2.1).contains(&ratio), "ratio {ratio} not ~2");
        }
    }

    #[test]
    fn distance_lists_parse_or_fail_loudly() {
        assert_eq!(parse_distances("0,0.05,0.1").unwrap(), vec![0.0, 0.05, 0.1]);
        assert_eq!(parse_distances(" 0.5 ").unwrap(), vec![0.5]);
        assert_eq!(parse_distances("").unwrap(), Vec::<f64>::new());
        let err = parse_distances("0,abc").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("abc"));
    }

    #[test]
    fn exit_codes_follow_the_documented_contract() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Checkpoint("x".into()).exit_code(), 3);
        assert_eq!(CliError::Numeric("x".into()).exit_code(), 4);
        assert_eq!(CliError::Internal("x".into()).exit_code(), 1);
        let io = CliError::Io(std::io::Error::new(std::io::ErrorKind::Other, "x"));
        assert_eq!(io.exit_code(), 1);
    }
}

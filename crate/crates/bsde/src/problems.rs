//! Forward–backward SDE problems and their reference solutions.
//!
//! A problem couples a forward diffusion with a backward value process:
//!
//! ```text
//! dX = mu(t, X, Y, Z) dt + sigma(t, X, Y) dW,    X(0) = xi
//! dY = phi(t, X, Y, Z) dt + Zᵀ sigma dW,         Y(T) = g(X(T))
//! ```
//!
//! Writing `Y = u(t, X)` and `Z = ∇u(t, X)` ties the system to the
//! semi-linear PDE `u_t = f(t, x, u, ∇u, Hess u)` with
//!
//! ```text
//! f = phi - muᵀ z - (1/2) Tr[sigma sigmaᵀ gamma]
//! ```
//!
//! [`FbsdeProblem::verify_driver_mapping`] checks that identity numerically
//! at a point, using the closed-form solution for `y`, `z`, `gamma` and a
//! central time difference for `u_t` — a cheap certificate that a problem's
//! coefficients, terminal condition, and reference solution belong to the
//! same PDE.
//!
//! Coefficient callbacks operate on graph nodes in batched column form (one
//! path per column), so the training loop can differentiate straight through
//! them.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::graph::{grad, Graph, Node, Tensor};

/// Structural form of the diffusion coefficient. The solver only ever needs
/// `sigma` applied to an increment or inside the trace term, so the shape is
/// kept symbolic instead of materializing d×d matrices per path.
pub enum Diffusion {
    /// `sigma = c * I`.
    ScaledIdentity(f64),
    /// `sigma = c * diag(x)` (componentwise geometric dynamics).
    DiagonalOfState(f64),
    /// A constant full matrix.
    Matrix(Array2<f64>),
}

impl Diffusion {
    /// `sigma(x) * dw` for a batch: `x` is the d×M state node, `dw` the d×M
    /// increment block. Constant in the state where possible so the graph
    /// stays small.
    pub fn apply_increment<'g>(&self, g: &'g Graph, x: Node<'g>, dw: &Array2<f64>) -> Node<'g> {
        match self {
            Diffusion::ScaledIdentity(c) => g.constant(Tensor::Matrix(dw.mapv(|v| v * c))),
            Diffusion::DiagonalOfState(c) => x.mul(g.constant(Tensor::Matrix(dw.mapv(|v| v * c)))),
            Diffusion::Matrix(m) => g.constant(Tensor::Matrix(m.dot(dw))),
        }
    }

    /// `Tr[sigma sigmaᵀ gamma]` at one point.
    pub fn trace_quadratic_form(&self, x: &[f64], gamma: &Array2<f64>) -> f64 {
        match self {
            Diffusion::ScaledIdentity(c) => c * c * gamma.diag().sum(),
            Diffusion::DiagonalOfState(c) => {
                c * c
                    * x.iter()
                        .enumerate()
                        .map(|(i, xi)| xi * xi * gamma[(i, i)])
                        .sum::<f64>()
            }
            Diffusion::Matrix(m) => {
                let s = m.dot(&m.t());
                s.iter()
                    .zip(gamma.t().iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            }
        }
    }
}

/// Batched inputs to drift and driver callbacks: one path per column.
pub struct CoeffArgs<'g> {
    pub t: f64,
    /// State, d×M.
    pub x: Node<'g>,
    /// Value, length M.
    pub y: Node<'g>,
    /// Spatial gradient, d×M.
    pub z: Node<'g>,
}

/// Drift `mu(t, x, y, z)`, returning a d×M node.
pub type DriftFn = Box<dyn for<'g> Fn(&CoeffArgs<'g>) -> Node<'g> + Send + Sync>;
/// Driver `phi(t, x, y, z)`, returning a length-M node.
pub type DriverFn = Box<dyn for<'g> Fn(&CoeffArgs<'g>) -> Node<'g> + Send + Sync>;
/// Terminal condition or its gradient, mapping the d×M terminal state to a
/// length-M node (value) or d×M node (gradient).
pub type TerminalFn = Box<dyn for<'g> Fn(Node<'g>) -> Node<'g> + Send + Sync>;

/// Boxes a driver closure. Going through this helper pins down the
/// higher-ranked signature that a bare `Box::new` often fails to infer.
pub fn driver<F>(f: F) -> DriverFn
where
    F: for<'g> Fn(&CoeffArgs<'g>) -> Node<'g> + Send + Sync + 'static,
{
    Box::new(f)
}

/// Boxes a terminal-condition closure; see [`driver`].
pub fn terminal<F>(f: F) -> TerminalFn
where
    F: for<'g> Fn(Node<'g>) -> Node<'g> + Send + Sync + 'static,
{
    Box::new(f)
}

/// Closed-form reference solution, in two equivalent forms: a plain
/// evaluator for reporting, and a graph builder so `z` and `gamma` can be
/// produced by differentiation.
pub struct ClosedForm {
    pub eval: Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
    /// Batched: `(t, x d×M) -> length-M values`.
    pub graph: Box<dyn for<'g> Fn(f64, Node<'g>) -> Node<'g> + Send + Sync>,
}

/// Reference solution attached to a problem.
pub enum ExactSolution {
    ClosedForm(ClosedForm),
    /// Log-transform Monte Carlo oracle (available for the control problem
    /// whose diffusion is `sqrt(2) I`); carries the sample count per query.
    LogMonteCarlo { samples: usize },
}

#[derive(Debug, thiserror::Error)]
pub enum ProblemError {
    #[error("problem `{0}` has no closed-form solution graph")]
    NoClosedForm(String),
    #[error("problem `{0}` has no reference solution")]
    NoReference(String),
}

/// A forward–backward SDE problem in batched graph form.
pub struct FbsdeProblem {
    pub name: String,
    pub dim: usize,
    pub horizon: f64,
    pub initial_state: Array1<f64>,
    /// `None` means identically-zero drift (skipped in the forward step).
    pub drift: Option<DriftFn>,
    pub diffusion: Diffusion,
    pub driver: DriverFn,
    pub terminal: TerminalFn,
    pub terminal_grad: Option<TerminalFn>,
    pub exact: Option<ExactSolution>,
}

impl FbsdeProblem {
    /// Reference value at `(t, x)` with its standard error (zero for closed
    /// forms). `seed` only matters for Monte Carlo references.
    pub fn exact_value(&self, t: f64, x: &[f64], seed: u64) -> Result<(f64, f64), ProblemError> {
        match &self.exact {
            Some(ExactSolution::ClosedForm(cf)) => Ok(((cf.eval)(t, x), 0.0)),
            Some(ExactSolution::LogMonteCarlo { samples }) => {
                Ok(log_mc_reference(x, t, self.horizon, *samples, seed))
            }
            None => Err(ProblemError::NoReference(self.name.clone())),
        }
    }

    /// Terminal value `g(x)` at a single point, evaluated through the graph
    /// form (single source of truth for the terminal condition).
    pub fn terminal_value(&self, x: &[f64]) -> f64 {
        let g = Graph::new();
        let ones1 = g.vector(&[1.0]);
        let col = g.vector(x).outer(ones1);
        (self.terminal)(col).value().flat()[0]
    }

    /// Driver `phi` at a single point with explicit `y`, `z`.
    pub fn driver_value(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        let g = Graph::new();
        let ones1 = g.vector(&[1.0]);
        let args = CoeffArgs {
            t,
            x: g.vector(x).outer(ones1),
            y: g.vector(&[y]),
            z: g.vector(z).outer(ones1),
        };
        (self.driver)(&args).value().flat()[0]
    }

    /// Builds `(y, z, gamma)` at `(t, x)` by differentiating the closed-form
    /// solution graph — no hand-written derivatives involved.
    pub fn generator_point(&self, t: f64, x: &[f64]) -> Result<GeneratorPoint, ProblemError> {
        let Some(ExactSolution::ClosedForm(cf)) = &self.exact else {
            return Err(ProblemError::NoClosedForm(self.name.clone()));
        };
        let g = Graph::new();
        let xn = g.input(Tensor::Vector(Array1::from_vec(x.to_vec())));
        let ones1 = g.vector(&[1.0]);
        let col = xn.outer(ones1);
        let y = (cf.graph)(t, col).element(0);
        let z = grad(y, &[xn])[0];
        let d = x.len();
        let mut gamma = Array2::zeros((d, d));
        for i in 0..d {
            let row = grad(z.element(i), &[xn])[0].value().flat();
            for j in 0..d {
                gamma[(i, j)] = row[j];
            }
        }
        Ok(GeneratorPoint {
            t,
            x: Array1::from_vec(x.to_vec()),
            y: y.value().scalar(),
            z: Array1::from_vec(z.value().flat()),
            gamma,
        })
    }

    /// Residual `|u_t - (phi - muᵀ z - ½ Tr[sigma sigmaᵀ gamma])|` at a
    /// point, with `u_t` from a central difference of the closed form with
    /// step `t_step`. Small residuals certify that the problem's
    /// coefficients and its reference solution describe the same PDE.
    pub fn verify_driver_mapping(&self, point: &GeneratorPoint, t_step: f64) -> Result<f64, ProblemError> {
        let Some(ExactSolution::ClosedForm(cf)) = &self.exact else {
            return Err(ProblemError::NoClosedForm(self.name.clone()));
        };
        let x_slice = point.x.as_slice().expect("contiguous state");
        let u_plus = (cf.eval)(point.t + t_step, x_slice);
        let u_minus = (cf.eval)(point.t - t_step, x_slice);
        let u_t = (u_plus - u_minus) / (2.0 * t_step);

        let phi = self.driver_value(point.t, x_slice, point.y, point.z.as_slice().unwrap());

        let mu_dot_z = match &self.drift {
            None => 0.0,
            Some(mu) => {
                let g = Graph::new();
                let ones1 = g.vector(&[1.0]);
                let args = CoeffArgs {
                    t: point.t,
                    x: g.vector(x_slice).outer(ones1),
                    y: g.vector(&[point.y]),
                    z: g.vector(point.z.as_slice().unwrap()).outer(ones1),
                };
                let mu_col = mu(&args);
                let z_col = args.z;
                mu_col.col_dots(z_col).value().flat()[0]
            }
        };

        let trace = self.diffusion.trace_quadratic_form(x_slice, &point.gamma);
        let f = phi - mu_dot_z - 0.5 * trace;
        Ok((u_t - f).abs())
    }
}

/// Solution data `(y, z, gamma)` of the reference solution at one point.
#[derive(Clone, Debug)]
pub struct GeneratorPoint {
    pub t: f64,
    pub x: Array1<f64>,
    pub y: f64,
    pub z: Array1<f64>,
    pub gamma: Array2<f64>,
}

/// Option-pricing benchmark: zero drift, `sigma = vol * diag(x)`,
/// `phi = rate (y - zᵀx)`, `g(x) = ‖x‖²`, with the closed form
/// `u(t, x) = exp((rate + vol²)(T - t)) ‖x‖²`.
pub fn black_scholes(dim: usize, rate: f64, vol: f64, horizon: f64, initial: Array1<f64>) -> FbsdeProblem {
    assert_eq!(initial.len(), dim);
    let growth = rate + vol * vol;
    FbsdeProblem {
        name: "black_scholes".into(),
        dim,
        horizon,
        initial_state: initial,
        drift: None,
        diffusion: Diffusion::DiagonalOfState(vol),
        driver: driver(move |a: &CoeffArgs<'_>| (a.y - a.z.col_dots(a.x)).scale(rate)),
        terminal: terminal(|x: Node<'_>| x.square().col_sums()),
        terminal_grad: Some(terminal(|x: Node<'_>| x.scale(2.0))),
        exact: Some(ExactSolution::ClosedForm(ClosedForm {
            eval: Box::new(move |t, x| {
                let s: f64 = x.iter().map(|v| v * v).sum();
                (growth * (horizon - t)).exp() * s
            }),
            graph: Box::new(move |t, x: Node<'_>| {
                x.square().col_sums().scale((growth * (horizon - t)).exp())
            }),
        })),
    }
}

/// Control benchmark: zero drift, `sigma = sqrt(2) I`, `phi = ‖z‖²`,
/// `g(x) = ln(½(1 + ‖x‖²))`. No closed form; [`log_mc_reference`] serves as
/// the oracle through the exponential transform of the solution.
pub fn hamilton_jacobi_bellman(dim: usize, horizon: f64, initial: Array1<f64>) -> FbsdeProblem {
    assert_eq!(initial.len(), dim);
    FbsdeProblem {
        name: "hjb".into(),
        dim,
        horizon,
        initial_state: initial,
        drift: None,
        diffusion: Diffusion::ScaledIdentity(std::f64::consts::SQRT_2),
        driver: driver(|a: &CoeffArgs<'_>| a.z.square().col_sums()),
        terminal: terminal(|x: Node<'_>| {
            let m = x.shape_cols();
            let ones = x.graph().constant(Tensor::Vector(Array1::from_elem(m, 1.0)));
            (x.square().col_sums() + ones).scale(0.5).ln()
        }),
        terminal_grad: Some(terminal(|x: Node<'_>| {
            let (d, m) = x.shape_dims();
            let ones = x.graph().constant(Tensor::Vector(Array1::from_elem(m, 1.0)));
            let inv = (x.square().col_sums() + ones).pow(-1.0);
            x.scale(2.0).mul(inv.tile_rows(d))
        })),
        exact: Some(ExactSolution::LogMonteCarlo { samples: 100_000 }),
    }
}

/// Phase-field benchmark: zero drift, `sigma = I`, cubic driver
/// `phi = y³ - y`, terminal `g(x) = (2 + 0.4 q(x))⁻¹` where `q` is `‖x‖²`
/// by default or `‖x‖` behind [`TerminalForm::PlainNorm`]. No reference
/// solution.
pub fn allen_cahn(dim: usize, horizon: f64, initial: Array1<f64>, form: TerminalForm) -> FbsdeProblem {
    assert_eq!(initial.len(), dim);
    fn q<'g>(form: TerminalForm, x: Node<'g>) -> Node<'g> {
        match form {
            TerminalForm::SquaredNorm => x.square().col_sums(),
            TerminalForm::PlainNorm => x.square().col_sums().pow(0.5),
        }
    }
    FbsdeProblem {
        name: "allen_cahn".into(),
        dim,
        horizon,
        initial_state: initial,
        drift: None,
        diffusion: Diffusion::ScaledIdentity(1.0),
        driver: driver(|a: &CoeffArgs<'_>| a.y.pow(3.0) - a.y),
        terminal: terminal(move |x: Node<'_>| {
            let m = x.shape_cols();
            let twos = x.graph().constant(Tensor::Vector(Array1::from_elem(m, 2.0)));
            (q(form, x).scale(0.4) + twos).pow(-1.0)
        }),
        terminal_grad: match form {
            TerminalForm::SquaredNorm => Some(terminal(move |x: Node<'_>| {
                let (d, m) = x.shape_dims();
                let twos = x.graph().constant(Tensor::Vector(Array1::from_elem(m, 2.0)));
                let inner = x.square().col_sums().scale(0.4) + twos;
                x.scale(-0.8).mul(inner.pow(-2.0).tile_rows(d))
            })),
            // d/dx (2 + 0.4 ‖x‖)⁻¹ = -0.4 (2 + 0.4‖x‖)⁻² x/‖x‖ — singular at
            // the origin, so the plain-norm form ships without a gradient.
            TerminalForm::PlainNorm => None,
        },
        exact: None,
    }
}

/// Which norm enters the phase-field terminal condition.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TerminalForm {
    SquaredNorm,
    PlainNorm,
}

/// Terminal condition of the control benchmark as a plain function.
fn control_terminal(x: &[f64]) -> f64 {
    let s: f64 = x.iter().map(|v| v * v).sum();
    (0.5 * (1.0 + s)).ln()
}

/// Monte Carlo reference for the control benchmark through the exponential
/// transform: `u(t, x) = -ln E[exp(-g(x + sqrt(2) W_{T-t}))]`. Returns the
/// estimate and its delta-method standard error `sd / (sqrt(K) * mean)`.
/// At `t = T` the expectation degenerates and `g(x)` is returned exactly
/// with zero standard error.
pub fn log_mc_reference(x: &[f64], t: f64, horizon: f64, samples: usize, seed: u64) -> (f64, f64) {
    let tau = horizon - t;
    assert!(tau >= 0.0, "query time beyond the horizon");
    assert!(samples >= 2, "need at least two samples");
    if tau == 0.0 {
        return (control_terminal(x), 0.0);
    }
    let scale = (2.0 * tau).sqrt();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut shifted = vec![0.0; x.len()];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        for (s, xi) in shifted.iter_mut().zip(x.iter()) {
            let draw: f64 = rng.sample(StandardNormal);
            *s = xi + scale * draw;
        }
        let v = (-control_terminal(&shifted)).exp();
        sum += v;
        sum_sq += v * v;
    }
    let k = samples as f64;
    let mean = sum / k;
    let var = (sum_sq - k * mean * mean) / (k - 1.0);
    let se_mean = var.max(0.0).sqrt() / k.sqrt();
    (-(mean.ln()), se_mean / mean)
}

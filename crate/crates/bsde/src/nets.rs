//! Value networks `u(t, x; Θ)` for the solver, in three interchangeable
//! architectures sharing one layout: an affine+tanh lift from the
//! (time, state) input to the hidden width, a stack of hidden blocks, and a
//! linear head producing the scalar value.
//!
//! Block recursions (u is the lifted network input `(t, x)`):
//!
//! ```text
//! fully connected   y <- tanh(W y + b)
//! residual          y <- y + tanh(W y + b)
//! stable residual   y <- y + h * tanh(A y + B u + C),   A = -RᵀR - eps*I
//! ```
//!
//! The third form keeps every eigenvalue of `A` at or below `-eps`, and
//! [`project_r`] caps `‖RᵀR‖_F` at `1 - eps` after each optimizer step, so
//! the block's state transition stays a stable contraction throughout
//! training.
//!
//! Parameters are plain arrays ([`NetworkParams`]); [`NetworkParams::bind`]
//! lends them into a [`Graph`](crate::graph::Graph) as differentiable leaves
//! for one forward/backward pass.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

use crate::graph::{grad, Graph, Node, Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "fc")]
    FullyConnected,
    #[serde(rename = "resnet")]
    Residual,
    #[serde(rename = "naisnet")]
    StableResidual,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::FullyConnected,
        Architecture::Residual,
        Architecture::StableResidual,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Architecture::FullyConnected => "fc",
            Architecture::Residual => "resnet",
            Architecture::StableResidual => "naisnet",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fc" => Ok(Architecture::FullyConnected),
            "resnet" => Ok(Architecture::Residual),
            "naisnet" => Ok(Architecture::StableResidual),
            other => Err(format!(
                "unknown architecture `{other}` (expected fc, resnet, or naisnet)"
            )),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct NetConfig {
    /// State dimension d; the network input is (t, x) with d+1 entries.
    pub state_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub architecture: Architecture,
    /// Eigenvalue shift for the stable-residual state matrix.
    pub epsilon: f64,
    /// Step size h multiplying the stable-residual block update.
    pub step_scale: f64,
}

impl NetConfig {
    pub fn new(state_dim: usize, hidden_width: usize, hidden_layers: usize, architecture: Architecture) -> NetConfig {
        NetConfig {
            state_dim,
            hidden_width,
            hidden_layers,
            architecture,
            epsilon: 0.01,
            step_scale: 1.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + 1
    }
}

/// State matrix of a stable-residual block: `A = -RᵀR - eps*I`.
/// Symmetric by construction with every eigenvalue ≤ `-eps`.
pub fn build_a(r: &Array2<f64>, epsilon: f64) -> Array2<f64> {
    let n = r.ncols();
    let mut a = r.t().dot(r);
    a.mapv_inplace(|v| -v);
    for i in 0..n {
        a[(i, i)] -= epsilon;
    }
    a
}

/// Frobenius norm of `RᵀR`.
pub fn gram_fro_norm(r: &Array2<f64>) -> f64 {
    let rtr = r.t().dot(r);
    rtr.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `R` so that `‖RᵀR‖_F ≤ 1 - eps`, leaving it untouched (bitwise)
/// when already inside the bound. A hair of slack in the trigger makes the
/// projection idempotent despite rounding in the recomputed norm.
pub fn project_r(r: &mut Array2<f64>, epsilon: f64) {
    let bound = 1.0 - epsilon;
    let fro = gram_fro_norm(r);
    if fro > bound * (1.0 + 1e-12) {
        let factor = (bound / fro).sqrt();
        r.mapv_inplace(|v| v * factor);
    }
}

/// Parameters of one hidden block.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockParams {
    /// Fully connected / residual block: `tanh(W y + b)`.
    Dense { w: Array2<f64>, b: Array1<f64> },
    /// Stable residual block: `h * tanh(A y + B u + C)` with `A` derived from `r`.
    Stable {
        r: Array2<f64>,
        b_in: Array2<f64>,
        c: Array1<f64>,
    },
}

/// All parameters of one value network, as plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetConfig,
    pub lift_w: Array2<f64>,
    pub lift_b: Array1<f64>,
    pub blocks: Vec<BlockParams>,
    pub head_w: Array1<f64>,
    pub head_b: f64,
}

fn glorot(rng: &mut ChaCha12Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-s..s))
}

impl NetworkParams {
    /// Deterministic initialization: weights uniform in ±sqrt(6/(fan_in+fan_out)),
    /// biases zero, stable-block `R` projected immediately. The draw order is
    /// fixed (lift, blocks in order, head) so a seed pins every parameter.
    pub fn init(config: NetConfig, seed: u64) -> NetworkParams {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let w = config.hidden_width;
        let din = config.input_dim();
        let lift_w = glorot(&mut rng, w, din, din, w);
        let lift_b = Array1::zeros(w);
        let mut blocks = Vec::with_capacity(config.hidden_layers);
        for _ in 0..config.hidden_layers {
            match config.architecture {
                Architecture::FullyConnected | Architecture::Residual => {
                    blocks.push(BlockParams::Dense {
                        w: glorot(&mut rng, w, w, w, w),
                        b: Array1::zeros(w),
                    });
                }
                Architecture::StableResidual => {
                    let mut r = glorot(&mut rng, w, w, w, w);
                    project_r(&mut r, config.epsilon);
                    blocks.push(BlockParams::Stable {
                        r,
                        b_in: glorot(&mut rng, w, din, din, w),
                        c: Array1::zeros(w),
                    });
                }
            }
        }
        let head_w = glorot(&mut rng, 1, w, w, 1).row(0).to_owned();
        NetworkParams {
            config,
            lift_w,
            lift_b,
            blocks,
            head_w,
            head_b: 0.0,
        }
    }

    /// Applies [`project_r`] to every stable block (no-op for the others).
    pub fn project_stable_blocks(&mut self) {
        let eps = self.config.epsilon;
        for block in &mut self.blocks {
            if let BlockParams::Stable { r, .. } = block {
                project_r(r, eps);
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.named_arrays().iter().map(|a| a.data.len()).sum()
    }

    /// All parameters flattened in the canonical order
    /// (lift.w, lift.b, block{i}.*, head.w, head.b; row-major within arrays).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for a in self.named_arrays() {
            out.extend_from_slice(&a.data);
        }
        out
    }

    /// Overwrites all parameters from a flat slice in canonical order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.flat_len(), "flat parameter length mismatch");
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &flat[at..at + n];
            at += n;
            s.to_vec()
        };
        self.lift_w = Array2::from_shape_vec(self.lift_w.dim(), take(self.lift_w.len())).unwrap();
        self.lift_b = Array1::from_vec(take(self.lift_b.len()));
        for block in &mut self.blocks {
            match block {
                BlockParams::Dense { w, b } => {
                    *w = Array2::from_shape_vec(w.dim(), take(w.len())).unwrap();
                    *b = Array1::from_vec(take(b.len()));
                }
                BlockParams::Stable { r, b_in, c } => {
                    *r = Array2::from_shape_vec(r.dim(), take(r.len())).unwrap();
                    *b_in = Array2::from_shape_vec(b_in.dim(), take(b_in.len())).unwrap();
                    *c = Array1::from_vec(take(c.len()));
                }
            }
        }
        self.head_w = Array1::from_vec(take(self.head_w.len()));
        self.head_b = take(1)[0];
    }

    /// Named views of every parameter array, canonical order.
    pub fn named_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        let push2 = |out: &mut Vec<NamedArray>, name: String, a: &Array2<f64>| {
            out.push(NamedArray {
                name,
                shape: vec![a.nrows(), a.ncols()],
                data: a.iter().copied().collect(),
            });
        };
        let push1 = |out: &mut Vec<NamedArray>, name: String, a: &Array1<f64>| {
            out.push(NamedArray {
                name,
                shape: vec![a.len()],
                data: a.to_vec(),
            });
        };
        push2(&mut out, "lift.w".into(), &self.lift_w);
        push1(&mut out, "lift.b".into(), &self.lift_b);
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                BlockParams::Dense { w, b } => {
                    push2(&mut out, format!("block{i}.w"), w);
                    push1(&mut out, format!("block{i}.b"), b);
                }
                BlockParams::Stable { r, b_in, c } => {
                    push2(&mut out, format!("block{i}.r"), r);
                    push2(&mut out, format!("block{i}.b_in"), b_in);
                    push1(&mut out, format!("block{i}.c"), c);
                }
            }
        }
        push1(&mut out, "head.w".into(), &self.head_w);
        out.push(NamedArray {
            name: "head.b".into(),
            shape: vec![],
            data: vec![self.head_b],
        });
        out
    }

    /// Order-insensitive digest of the parameter bits; two parameter sets
    /// compare equal iff every float is bitwise identical.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for a in self.named_arrays() {
            for v in &a.data {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Lends the parameters into `g` as differentiable leaves.
    pub fn bind<'g>(&self, g: &'g Graph) -> BoundNet<'g> {
        let to_mat = |a: &Array2<f64>| g.input(Tensor::Matrix(a.clone()));
        let to_vec = |a: &Array1<f64>| g.input(Tensor::Vector(a.clone()));
        let lift_w = to_mat(&self.lift_w);
        let lift_b = to_vec(&self.lift_b);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut order = vec![lift_w, lift_b];
        for block in &self.blocks {
            match block {
                BlockParams::Dense { w, b } => {
                    let (w, b) = (to_mat(w), to_vec(b));
                    order.extend([w, b]);
                    blocks.push(BoundBlock::Dense { w, b });
                }
                BlockParams::Stable { r, b_in, c } => {
                    let (r, b_in, c) = (to_mat(r), to_mat(b_in), to_vec(c));
                    order.extend([r, b_in, c]);
                    blocks.push(BoundBlock::stable(g, r, b_in, c, self.config.epsilon));
                }
            }
        }
        let head_w = to_vec(&self.head_w);
        let head_b = g.input(Tensor::Scalar(self.head_b));
        order.extend([head_w, head_b]);
        BoundNet {
            config: self.config,
            lift_w,
            lift_b,
            blocks,
            head_w,
            head_b,
            order,
        }
    }

    /// Binds the same structure with every parameter read out of one flat
    /// vector node (canonical order). Lets a whole training loss be expressed
    /// as a function of a single flat vector, e.g. for finite-difference
    /// certification of the parameter gradient.
    pub fn bind_from_flat<'g>(&self, flat: Node<'g>) -> BoundNet<'g> {
        let g = flat.graph();
        let mut cursor = 0;
        let lift_w = flat
            .slice(cursor, self.lift_w.len())
            .reshape(self.lift_w.nrows(), self.lift_w.ncols());
        cursor += self.lift_w.len();
        let lift_b = flat.slice(cursor, self.lift_b.len());
        cursor += self.lift_b.len();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            match block {
                BlockParams::Dense { w, b } => {
                    let wn = flat.slice(cursor, w.len()).reshape(w.nrows(), w.ncols());
                    cursor += w.len();
                    let bn = flat.slice(cursor, b.len());
                    cursor += b.len();
                    blocks.push(BoundBlock::Dense { w: wn, b: bn });
                }
                BlockParams::Stable { r, b_in, c } => {
                    let rn = flat.slice(cursor, r.len()).reshape(r.nrows(), r.ncols());
                    cursor += r.len();
                    let bin = flat.slice(cursor, b_in.len()).reshape(b_in.nrows(), b_in.ncols());
                    cursor += b_in.len();
                    let cn = flat.slice(cursor, c.len());
                    cursor += c.len();
                    blocks.push(BoundBlock::stable(g, rn, bin, cn, self.config.epsilon));
                }
            }
        }
        let head_w = flat.slice(cursor, self.head_w.len());
        cursor += self.head_w.len();
        let head_b = flat.element(cursor);
        cursor += 1;
        assert_eq!(cursor, self.flat_len(), "flat layout mismatch");
        BoundNet {
            config: self.config,
            lift_w,
            lift_b,
            blocks,
            head_w,
            head_b,
            order: vec![flat],
        }
    }

    /// Scalar network value at a single point (fresh scratch graph).
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let g = Graph::new();
        let net = self.bind(&g);
        let xn = g.vector(x);
        net.forward_point(t, xn).value().scalar()
    }

    /// Value and spatial gradient at a single point (fresh scratch graph).
    pub fn value_and_gradient(&self, t: f64, x: &[f64]) -> (f64, Vec<f64>) {
        let g = Graph::new();
        let net = self.bind(&g);
        let xn = g.input(Tensor::Vector(Array1::from_vec(x.to_vec())));
        let (y, z) = net.gradient_x_point(t, xn);
        (y.value().scalar(), z.value().flat())
    }
}

enum BoundBlock<'g> {
    Dense { w: Node<'g>, b: Node<'g> },
    Stable { a: Node<'g>, b_in: Node<'g>, c: Node<'g> },
}

impl<'g> BoundBlock<'g> {
    fn stable(g: &'g Graph, r: Node<'g>, b_in: Node<'g>, c: Node<'g>, epsilon: f64) -> BoundBlock<'g> {
        let width = match r.shape() {
            Shape::Matrix(_, c) => c,
            other => panic!("stable block R must be a matrix, got {other}"),
        };
        let eps_eye = g.matrix(Array2::from_diag_elem(width, epsilon));
        let a = r.t().matmul(r).scale(-1.0) - eps_eye;
        BoundBlock::Stable { a, b_in, c }
    }
}

/// A network bound into a graph for one set of evaluations.
pub struct BoundNet<'g> {
    pub config: NetConfig,
    lift_w: Node<'g>,
    lift_b: Node<'g>,
    blocks: Vec<BoundBlock<'g>>,
    head_w: Node<'g>,
    head_b: Node<'g>,
    order: Vec<Node<'g>>,
}

impl<'g> BoundNet<'g> {
    /// Parameter leaves in the canonical flat order (matches
    /// [`NetworkParams::flat`]); a single flat node if bound from one.
    pub fn param_nodes(&self) -> &[Node<'g>] {
        &self.order
    }

    /// Batched forward pass: `x` holds one state per column (d×M), and the
    /// result is the length-M vector `u(t, x_m)`.
    pub fn forward_cols(&self, t: f64, x: Node<'g>) -> Node<'g> {
        let g = x.graph();
        let m = match x.shape() {
            Shape::Matrix(rows, cols) => {
                assert_eq!(
                    rows,
                    self.config.state_dim,
                    "state rows do not match network state_dim"
                );
                cols
            }
            other => panic!("forward_cols expects a d×M matrix, got {other}"),
        };
        let t_row = g.matrix(Array2::from_elem((1, m), t));
        let input = t_row.vstack(x);
        let mut h = (self.lift_w.matmul(input) + self.lift_b.tile_cols(m)).tanh();
        for block in &self.blocks {
            h = match block {
                BoundBlock::Dense { w, b } => {
                    let pre = w.matmul(h) + b.tile_cols(m);
                    match self.config.architecture {
                        Architecture::FullyConnected => pre.tanh(),
                        _ => h + pre.tanh(),
                    }
                }
                BoundBlock::Stable { a, b_in, c } => {
                    let pre = a.matmul(h) + b_in.matmul(input) + c.tile_cols(m);
                    h + pre.tanh().scale(self.config.step_scale)
                }
            };
        }
        h.mul(self.head_w.tile_cols(m)).col_sums() + self.head_b.broadcast(Shape::Vector(m))
    }

    /// Batched value and spatial gradient: returns `(y, z)` where `y` is the
    /// length-M value vector and `z` the d×M matrix whose column m is
    /// `∇_x u(t, x_m)`. The gradient is emitted as graph nodes, so anything
    /// computed from `z` remains differentiable with respect to the
    /// parameters.
    pub fn gradient_x_cols(&self, t: f64, x: Node<'g>) -> (Node<'g>, Node<'g>) {
        let y = self.forward_cols(t, x);
        // Each column of x feeds exactly one batch element, so the gradient
        // of the batch sum recovers every per-column spatial gradient.
        let z = grad(y.sum(), &[x])[0];
        (y, z)
    }

    /// Scalar forward pass at a single point.
    pub fn forward_point(&self, t: f64, x: Node<'g>) -> Node<'g> {
        let g = x.graph();
        let ones1 = g.vector(&[1.0]);
        let x_col = x.outer(ones1);
        self.forward_cols(t, x_col).element(0)
    }

    /// Value and spatial gradient at a single point (`x` a length-d vector).
    pub fn gradient_x_point(&self, t: f64, x: Node<'g>) -> (Node<'g>, Node<'g>) {
        let g = x.graph();
        let ones1 = g.vector(&[1.0]);
        let x_col = x.outer(ones1);
        let y = self.forward_cols(t, x_col).element(0);
        let z = grad(y, &[x])[0];
        (y, z)
    }
}

/// One named parameter array of a checkpoint manifest. Shape is row-major;
/// scalars have an empty shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    kind: String,
    version: u32,
    config: NetConfig,
    arrays: Vec<NamedArray>,
}

const CHECKPOINT_KIND: &str = "value-network-checkpoint";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("not a network checkpoint (kind `{0}`)")]
    WrongKind(String),
    #[error("checkpoint array `{name}`: shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint missing array `{0}`")]
    MissingArray(String),
    #[error("checkpoint has unexpected array `{0}`")]
    UnexpectedArray(String),
}

/// Writes parameters as a single JSON file: a manifest of named arrays plus
/// the architecture config needed to rebuild the network. Floats are printed
/// in shortest-roundtrip form, so a save/load cycle is bit-exact.
pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<(), CheckpointError> {
    let file = CheckpointFile {
        kind: CHECKPOINT_KIND.to_string(),
        version: 1,
        config: params.config,
        arrays: params.named_arrays(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a checkpoint back into [`NetworkParams`], validating every array
/// name and shape against the embedded config.
pub fn load_checkpoint(path: &Path) -> Result<NetworkParams, CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.kind != CHECKPOINT_KIND {
        return Err(CheckpointError::WrongKind(file.kind));
    }
    let mut params = NetworkParams::init(file.config, 0);
    let expected = params.named_arrays();
    let mut flat = Vec::with_capacity(params.flat_len());
    for exp in &expected {
        let found = file
            .arrays
            .iter()
            .find(|a| a.name == exp.name)
            .ok_or_else(|| CheckpointError::MissingArray(exp.name.clone()))?;
        if found.shape != exp.shape || found.data.len() != exp.data.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: exp.name.clone(),
                expected: exp.shape.clone(),
                got: found.shape.clone(),
            });
        }
        flat.extend_from_slice(&found.data);
    }
    for extra in &file.arrays {
        if !expected.iter().any(|e| e.name == extra.name) {
            return Err(CheckpointError::UnexpectedArray(extra.name.clone()));
        }
    }
    params.set_flat(&flat);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::central_differences;
    use ndarray::array;

    fn zeroed(config: NetConfig) -> NetworkParams {
        let mut p = NetworkParams::init(config, 1);
        let flat = vec![0.0; p.flat_len()];
        p.set_flat(&flat);
        p
    }

    #[test]
    fn fc_zero_weights_returns_head_bias() {
        let mut p = zeroed(NetConfig::new(3, 8, 1, Architecture::FullyConnected));
        p.head_b = 2.75;
        for (t, x) in [(0.0, [0.0, 0.0, 0.0]), (0.7, [1.0, -2.0, 0.4]), (1.0, [9.0, 9.0, 9.0])] {
            assert_eq!(p.value(t, &x), 2.75);
        }
    }

    #[test]
    fn residual_zero_blocks_act_as_identity() {
        // With zero block weights a residual stack must leave the lifted
        // state unchanged, i.e. match the same net with no blocks at all.
        let with_blocks = NetworkParams::init(NetConfig::new(2, 6, 3, Architecture::Residual), 7);
        let mut p = with_blocks.clone();
        for block in &mut p.blocks {
            if let BlockParams::Dense { w, b } = block {
                w.fill(0.0);
                b.fill(0.0);
            }
        }
        let mut no_blocks = NetworkParams::init(NetConfig::new(2, 6, 0, Architecture::Residual), 7);
        no_blocks.lift_w = p.lift_w.clone();
        no_blocks.lift_b = p.lift_b.clone();
        no_blocks.head_w = p.head_w.clone();
        no_blocks.head_b = p.head_b;
        for (t, x) in [(0.0, [0.3, -0.8]), (0.5, [1.2, 0.1])] {
            assert_eq!(p.value(t, &x), no_blocks.value(t, &x));
        }
    }

    #[test]
    fn stable_block_with_zero_params_damps_toward_zero() {
        // Zero R, B, C and eps = 0.01: the block computes y + tanh(-0.01 y).
        let config = NetConfig::new(1, 4, 1, Architecture::StableResidual);
        let mut p = zeroed(config);
        // Give the lift a bias so the hidden state entering the block is nonzero.
        p.lift_b = array![0.3, -0.7, 1.1, 0.0];
        p.head_w = array![1.0, 1.0, 1.0, 1.0];
        let expected: f64 = p
            .lift_b
            .iter()
            .map(|&b| {
                let y = b.tanh();
                y + (-0.01 * y).tanh()
            })
            .sum();
        let got = p.value(0.4, &[2.0]);
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn build_a_matches_hand_computed_values() {
        let eps = 0.01;
        let zero = Array2::zeros((2, 2));
        assert_eq!(build_a(&zero, eps), array![[-0.01, 0.0], [0.0, -0.01]]);
        let eye = Array2::from_diag_elem(2, 1.0);
        assert_eq!(build_a(&eye, eps), array![[-1.01, 0.0], [0.0, -1.01]]);
        let r = array![[1.0, 1.0], [0.0, 0.0]];
        assert_eq!(build_a(&r, eps), array![[-1.01, -1.0], [-1.0, -1.01]]);
    }

    #[test]
    fn graph_built_a_matches_array_built_a() {
        let g = Graph::new();
        let r_arr = array![[0.4, -0.2], [0.7, 0.1]];
        let r = g.matrix(r_arr.clone());
        let eps_eye = g.matrix(Array2::from_diag_elem(2, 0.01));
        let a = r.t().matmul(r).scale(-1.0) - eps_eye;
        let reference = build_a(&r_arr, 0.01);
        let got = a.value();
        for (x, y) in got.matrix().iter().zip(reference.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn projection_leaves_small_r_bitwise_unchanged() {
        // ‖RᵀR‖_F = 0.5 here: diag(r2) with r2 chosen so the norm is 0.5.
        let v = (0.5f64 / 2.0).sqrt(); // RᵀR = diag(v², v²), fro = v²·√2 = 0.3535…
        let r = Array2::from_diag_elem(2, v);
        assert!(gram_fro_norm(&r) < 0.99);
        let mut projected = r.clone();
        project_r(&mut projected, 0.01);
        for (a, b) in projected.iter().zip(r.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn projection_caps_gram_norm_at_bound() {
        let mut r = Array2::from_diag_elem(2, 2.0); // ‖RᵀR‖_F = 4√2 > 0.99
        project_r(&mut r, 0.01);
        assert!((gram_fro_norm(&r) - 0.99).abs() < 1e-12);
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.gen_range(1..=16);
            let mut r = Array2::from_shape_fn((n, n), |_| rng.gen_range(-2.0..2.0));
            project_r(&mut r, 0.01);
            let once = r.clone();
            project_r(&mut r, 0.01);
            for (a, b) in r.iter().zip(once.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn state_matrix_eigenvalues_stay_below_minus_epsilon() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for _ in 0..200 {
            let n = rng.gen_range(1..=16);
            let mut r = Array2::from_shape_fn((n, n), |_| rng.gen_range(-3.0..3.0));
            project_r(&mut r, 0.01);
            let a = build_a(&r, 0.01);
            let na = nalgebra::DMatrix::from_row_slice(n, n, a.as_slice().unwrap());
            let eigs = na.symmetric_eigenvalues();
            for ev in eigs.iter() {
                assert!(*ev <= -0.01 + 1e-12, "eigenvalue {ev} above -0.01");
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_respects_bounds() {
        let config = NetConfig::new(3, 8, 2, Architecture::StableResidual);
        let a = NetworkParams::init(config, 5);
        let b = NetworkParams::init(config, 5);
        assert_eq!(a, b);
        let c = NetworkParams::init(config, 6);
        assert_ne!(a, c);

        assert!(a.lift_b.iter().all(|&v| v == 0.0));
        let s_lift = (6.0 / (4 + 8) as f64).sqrt();
        assert!(a.lift_w.iter().all(|&v| v.abs() < s_lift));
        for block in &a.blocks {
            if let BlockParams::Stable { r, c, .. } = block {
                assert!(gram_fro_norm(r) <= 0.99 * (1.0 + 1e-12));
                assert!(c.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn batched_forward_matches_single_points() {
        for arch in Architecture::ALL {
            let p = NetworkParams::init(NetConfig::new(3, 8, 2, arch), 11);
            let xs = [[0.4, -0.2, 1.1], [0.0, 0.0, 0.0], [2.0, -1.0, 0.5]];
            let t = 0.3;
            let g = Graph::new();
            let net = p.bind(&g);
            let mut cols = Array2::zeros((3, 3));
            for (j, x) in xs.iter().enumerate() {
                for (i, v) in x.iter().enumerate() {
                    cols[(i, j)] = *v;
                }
            }
            let y = net.forward_cols(t, g.matrix(cols));
            let batched = y.value().flat();
            for (j, x) in xs.iter().enumerate() {
                let single = p.value(t, x);
                let denom = single.abs() + batched[j].abs() + 1e-12;
                assert!(
                    (single - batched[j]).abs() / denom < 1e-12,
                    "{arch}: column {j}: {single} vs {}",
                    batched[j]
                );
            }
        }
    }

    #[test]
    fn spatial_gradient_matches_finite_differences() {
        for arch in Architecture::ALL {
            let p = NetworkParams::init(NetConfig::new(4, 8, 2, arch), 23);
            let x0 = [0.6, -0.3, 0.9, 0.2];
            let t = 0.45;
            let (_, analytic) = p.value_and_gradient(t, &x0);
            let numeric = central_differences(|x| p.value(t, x), &x0, 1e-5);
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let denom = a.abs() + n.abs() + 1e-12;
                assert!((a - n).abs() / denom < 1e-6, "{arch}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn linear_in_x_region_has_constant_gradient() {
        // Head over an identity-ish lift with zero blocks: u is affine in
        // tanh(lift); at x = 0 the gradient must equal head_w ᵀ lift_w (chain
        // rule with tanh'(0) = 1).
        let mut p = zeroed(NetConfig::new(2, 3, 0, Architecture::FullyConnected));
        p.lift_w = array![[0.0, 0.5, -0.2], [0.0, 0.1, 0.3], [0.0, -0.4, 0.7]];
        p.head_w = array![1.0, 2.0, -1.0];
        let (_, z) = p.value_and_gradient(0.0, &[0.0, 0.0]);
        // d u / d x_j = sum_i head_w[i] * lift_w[i, j+1]   (column 0 is time)
        let expected = [
            1.0 * 0.5 + 2.0 * 0.1 + (-1.0) * (-0.4),
            1.0 * (-0.2) + 2.0 * 0.3 + (-1.0) * 0.7,
        ];
        for (a, e) in z.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
    }

    #[test]
    fn bind_from_flat_matches_structured_bind() {
        for arch in Architecture::ALL {
            let p = NetworkParams::init(NetConfig::new(2, 6, 2, arch), 31);
            let g = Graph::new();
            let flat = g.input(Tensor::Vector(Array1::from_vec(p.flat())));
            let net_flat = p.bind_from_flat(flat);
            let x = g.vector(&[0.7, -1.1]);
            let via_flat = net_flat.forward_point(0.25, x).value().scalar();
            let direct = p.value(0.25, &[0.7, -1.1]);
            let denom = via_flat.abs() + direct.abs() + 1e-12;
            assert!((via_flat - direct).abs() / denom < 1e-12, "{arch}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for arch in Architecture::ALL {
            let p = NetworkParams::init(NetConfig::new(5, 8, 2, arch), 77);
            let path = dir.path().join(format!("{arch}.json"));
            save_checkpoint(&p, &path).unwrap();
            let q = load_checkpoint(&path).unwrap();
            assert_eq!(p.config, q.config);
            let (pf, qf) = (p.flat(), q.flat());
            assert_eq!(pf.len(), qf.len());
            for (a, b) in pf.iter().zip(qf.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_rejects_mismatched_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let p = NetworkParams::init(NetConfig::new(2, 4, 1, Architecture::FullyConnected), 3);
        let path = dir.path().join("net.json");
        save_checkpoint(&p, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // Claim a different width in the embedded config; array shapes no longer fit.
        let corrupted = text.replace("\"hidden_width\": 4", "\"hidden_width\": 8");
        std::fs::write(&path, corrupted).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        match err {
            CheckpointError::ShapeMismatch { name, expected, got } => {
                assert_eq!(name, "lift.w");
                assert_eq!(expected, vec![8, 3]);
                assert_eq!(got, vec![4, 3]);
            }
            other => panic!("expected shape mismatch, got {other}"),
        }
    }

    #[test]
    fn checksum_tracks_bit_level_changes() {
        let p = NetworkParams::init(NetConfig::new(2, 4, 1, Architecture::Residual), 9);
        let c1 = p.checksum();
        let mut q = p.clone();
        assert_eq!(c1, q.checksum());
        q.head_b += 1e-300;
        assert_ne!(c1, q.checksum());
    }
}

//! Reverse-mode differentiation on an explicit computation graph.
//!
//! Every operation appends a node to an arena held by [`Graph`] and eagerly
//! computes its value (64-bit floats, dense scalar/vector/matrix layout).
//! [`grad`] walks the arena backwards and *emits the adjoint expressions as
//! new graph nodes* instead of accumulating plain numbers.  Because the
//! backward pass is itself built from the same primitive set, its outputs can
//! be differentiated again — that is what lets a loss depend on the spatial
//! gradient of a network and still receive exact parameter gradients.
//!
//! The primitive set is closed: every adjoint rule below is expressed through
//! primitives in this file.  Adding an operation means adding its adjoint rule
//! and a finite-difference test next to the existing ones.
//!
//! A [`Graph`] is single-threaded by construction (interior mutability via
//! `RefCell`); parallel workloads build one graph per thread and combine
//! results outside the graph.

use std::cell::RefCell;
use std::fmt;

use ndarray::{Array1, Array2};

/// Shape of a node value. Vectors and matrices are distinct: a length-n
/// vector is not a 1×n or n×1 matrix.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "vector({n})"),
            Shape::Matrix(r, c) => write!(f, "matrix({r}x{c})"),
        }
    }
}

/// A dense value: scalar, vector, or row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Scalar(f64),
    Vector(Array1<f64>),
    Matrix(Array2<f64>),
}

impl Tensor {
    pub fn shape(&self) -> Shape {
        match self {
            Tensor::Scalar(_) => Shape::Scalar,
            Tensor::Vector(v) => Shape::Vector(v.len()),
            Tensor::Matrix(m) => Shape::Matrix(m.nrows(), m.ncols()),
        }
    }

    pub fn from_elem(shape: Shape, value: f64) -> Tensor {
        match shape {
            Shape::Scalar => Tensor::Scalar(value),
            Shape::Vector(n) => Tensor::Vector(Array1::from_elem(n, value)),
            Shape::Matrix(r, c) => Tensor::Matrix(Array2::from_elem((r, c), value)),
        }
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::from_elem(shape, 0.0)
    }

    /// The single value of a scalar tensor.
    pub fn scalar(&self) -> f64 {
        match self {
            Tensor::Scalar(v) => *v,
            other => panic!("expected scalar tensor, got {}", other.shape()),
        }
    }

    pub fn vector(&self) -> &Array1<f64> {
        match self {
            Tensor::Vector(v) => v,
            other => panic!("expected vector tensor, got {}", other.shape()),
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        match self {
            Tensor::Matrix(m) => m,
            other => panic!("expected matrix tensor, got {}", other.shape()),
        }
    }

    /// Flat view of the elements in row-major order.
    pub fn flat(&self) -> Vec<f64> {
        match self {
            Tensor::Scalar(v) => vec![*v],
            Tensor::Vector(v) => v.to_vec(),
            Tensor::Matrix(m) => m.iter().copied().collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Tensor::Scalar(v) => v.is_finite(),
            Tensor::Vector(v) => v.iter().all(|x| x.is_finite()),
            Tensor::Matrix(m) => m.iter().all(|x| x.is_finite()),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        match self {
            Tensor::Scalar(v) => Tensor::Scalar(f(*v)),
            Tensor::Vector(v) => Tensor::Vector(v.mapv(&f)),
            Tensor::Matrix(m) => Tensor::Matrix(m.mapv(&f)),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        match (self, other) {
            (Tensor::Scalar(a), Tensor::Scalar(b)) => Tensor::Scalar(f(*a, *b)),
            (Tensor::Vector(a), Tensor::Vector(b)) => {
                let mut out = a.clone();
                out.zip_mut_with(b, |x, &y| *x = f(*x, y));
                Tensor::Vector(out)
            }
            (Tensor::Matrix(a), Tensor::Matrix(b)) => {
                let mut out = a.clone();
                out.zip_mut_with(b, |x, &y| *x = f(*x, y));
                Tensor::Matrix(out)
            }
            _ => unreachable!("zip on mismatched shapes is rejected at construction"),
        }
    }

    fn total(&self) -> f64 {
        match self {
            Tensor::Scalar(v) => *v,
            Tensor::Vector(v) => v.sum(),
            Tensor::Matrix(m) => m.sum(),
        }
    }
}

/// Primitive operations. Parent node ids are stored inline; attributes that
/// shape the result (slice bounds, exponents, tile counts) live here too so
/// the forward evaluation can be replayed from the arena alone.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatVec(usize, usize),
    Outer(usize, usize),
    Transpose(usize),
    Sum(usize),
    Square(usize),
    Tanh(usize),
    Pow(usize, f64),
    Ln(usize),
    Concat(usize, usize),
    Slice { parent: usize, start: usize, len: usize },
    Element { parent: usize, index: usize },
    VStack(usize, usize),
    SliceRows { parent: usize, start: usize, len: usize },
    Broadcast { parent: usize, shape: Shape },
    TileCols { parent: usize, cols: usize },
    TileRows { parent: usize, rows: usize },
    RowSums(usize),
    ColSums(usize),
    Pad { parent: usize, start: usize, total: usize },
    PadScalar { parent: usize, index: usize, total: usize },
    PadRows { parent: usize, start: usize, total: usize },
    Reshape { parent: usize, rows: usize, cols: usize },
    Flatten(usize),
}

impl Op {
    fn parents(&self) -> (Option<usize>, Option<usize>) {
        use Op::*;
        match *self {
            Leaf => (None, None),
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | MatVec(a, b) | Outer(a, b)
            | Concat(a, b) | VStack(a, b) => (Some(a), Some(b)),
            Scale(a, _) | Transpose(a) | Sum(a) | Square(a) | Tanh(a) | Pow(a, _) | Ln(a)
            | RowSums(a) | ColSums(a) | Flatten(a) => (Some(a), None),
            Slice { parent, .. }
            | Element { parent, .. }
            | SliceRows { parent, .. }
            | Broadcast { parent, .. }
            | TileCols { parent, .. }
            | TileRows { parent, .. }
            | Pad { parent, .. }
            | PadScalar { parent, .. }
            | PadRows { parent, .. }
            | Reshape { parent, .. } => (Some(parent), None),
        }
    }
}

struct NodeData {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

struct GraphInner {
    nodes: Vec<NodeData>,
}

/// Arena of computation nodes. Construction is eager: a node's value is
/// computed the moment it is appended, so the arena order is also a valid
/// evaluation order.
pub struct Graph {
    inner: RefCell<GraphInner>,
}

/// Handle to one node of a [`Graph`]. Copyable; all arithmetic on handles
/// appends nodes to the owning graph.
#[derive(Clone, Copy)]
pub struct Node<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            inner: RefCell::new(GraphInner { nodes: Vec::new() }),
        }
    }

    /// Leaf that participates in differentiation.
    pub fn input(&self, value: Tensor) -> Node<'_> {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation (data, increments, fixed coefficients).
    pub fn constant(&self, value: Tensor) -> Node<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Node<'_> {
        self.constant(Tensor::Scalar(v))
    }

    pub fn vector(&self, v: &[f64]) -> Node<'_> {
        self.constant(Tensor::Vector(Array1::from_vec(v.to_vec())))
    }

    pub fn matrix(&self, m: Array2<f64>) -> Node<'_> {
        self.constant(Tensor::Matrix(m))
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Node<'_> {
        let id = self.inner.borrow_mut().push(NodeData {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Node { graph: self, id }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Value of a node (cloned out of the arena).
    pub fn value(&self, node: Node<'_>) -> Tensor {
        self.inner.borrow().nodes[node.id].value.clone()
    }

    /// Re-runs the forward evaluation of every non-leaf node in arena order
    /// and checks the recomputed values are bit-identical to the stored ones.
    pub fn replay_is_bit_exact(&self) -> bool {
        let inner = self.inner.borrow();
        for i in 0..inner.nodes.len() {
            if matches!(inner.nodes[i].op, Op::Leaf) {
                continue;
            }
            let recomputed = inner.eval(&inner.nodes[i].op);
            let stored = &inner.nodes[i].value;
            let same = match (&recomputed, stored) {
                (Tensor::Scalar(a), Tensor::Scalar(b)) => a.to_bits() == b.to_bits(),
                (Tensor::Vector(a), Tensor::Vector(b)) => {
                    a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (Tensor::Matrix(a), Tensor::Matrix(b)) => {
                    a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                _ => false,
            };
            if !same {
                return false;
            }
        }
        true
    }
}

impl GraphInner {
    fn push(&mut self, node: NodeData) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn shape(&self, id: usize) -> Shape {
        self.nodes[id].value.shape()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Appends an op node, evaluating it eagerly.
    fn op(&mut self, op: Op) -> usize {
        let value = self.eval(&op);
        let (p0, p1) = op.parents();
        let requires_grad = p0.map(|p| self.requires_grad(p)).unwrap_or(false)
            || p1.map(|p| self.requires_grad(p)).unwrap_or(false);
        self.push(NodeData {
            op,
            value,
            requires_grad,
        })
    }

    fn eval(&self, op: &Op) -> Tensor {
        use Op::*;
        let val = |id: usize| &self.nodes[id].value;
        match *op {
            Leaf => unreachable!("leaves are never re-evaluated"),
            Add(a, b) => val(a).zip(val(b), |x, y| x + y),
            Sub(a, b) => val(a).zip(val(b), |x, y| x - y),
            Mul(a, b) => val(a).zip(val(b), |x, y| x * y),
            Scale(a, c) => val(a).map(|x| x * c),
            MatMul(a, b) => Tensor::Matrix(val(a).matrix().dot(val(b).matrix())),
            MatVec(a, b) => Tensor::Vector(val(a).matrix().dot(val(b).vector())),
            Outer(a, b) => {
                let u = val(a).vector();
                let v = val(b).vector();
                let mut out = Array2::zeros((u.len(), v.len()));
                for (i, ui) in u.iter().enumerate() {
                    for (j, vj) in v.iter().enumerate() {
                        out[(i, j)] = ui * vj;
                    }
                }
                Tensor::Matrix(out)
            }
            Transpose(a) => Tensor::Matrix(val(a).matrix().t().to_owned()),
            Sum(a) => Tensor::Scalar(val(a).total()),
            Square(a) => val(a).map(|x| x * x),
            Tanh(a) => val(a).map(f64::tanh),
            Pow(a, p) => val(a).map(|x| x.powf(p)),
            Ln(a) => val(a).map(f64::ln),
            Concat(a, b) => {
                let mut out = val(a).vector().to_vec();
                out.extend_from_slice(val(b).vector().as_slice().expect("standard layout"));
                Tensor::Vector(Array1::from_vec(out))
            }
            Slice { parent, start, len } => {
                Tensor::Vector(val(parent).vector().slice(ndarray::s![start..start + len]).to_owned())
            }
            Element { parent, index } => Tensor::Scalar(val(parent).vector()[index]),
            VStack(a, b) => {
                let top = val(a).matrix();
                let bottom = val(b).matrix();
                let mut out = Array2::zeros((top.nrows() + bottom.nrows(), top.ncols()));
                out.slice_mut(ndarray::s![..top.nrows(), ..]).assign(top);
                out.slice_mut(ndarray::s![top.nrows().., ..]).assign(bottom);
                Tensor::Matrix(out)
            }
            SliceRows { parent, start, len } => {
                Tensor::Matrix(val(parent).matrix().slice(ndarray::s![start..start + len, ..]).to_owned())
            }
            Broadcast { parent, shape } => Tensor::from_elem(shape, val(parent).scalar()),
            TileCols { parent, cols } => {
                let v = val(parent).vector();
                let mut out = Array2::zeros((v.len(), cols));
                for (i, vi) in v.iter().enumerate() {
                    out.row_mut(i).fill(*vi);
                }
                Tensor::Matrix(out)
            }
            TileRows { parent, rows } => {
                let v = val(parent).vector();
                let mut out = Array2::zeros((rows, v.len()));
                for mut row in out.rows_mut() {
                    row.assign(v);
                }
                Tensor::Matrix(out)
            }
            RowSums(a) => Tensor::Vector(val(a).matrix().sum_axis(ndarray::Axis(1))),
            ColSums(a) => Tensor::Vector(val(a).matrix().sum_axis(ndarray::Axis(0))),
            Pad { parent, start, total } => {
                let v = val(parent).vector();
                let mut out = Array1::zeros(total);
                out.slice_mut(ndarray::s![start..start + v.len()]).assign(v);
                Tensor::Vector(out)
            }
            PadScalar { parent, index, total } => {
                let mut out = Array1::zeros(total);
                out[index] = val(parent).scalar();
                Tensor::Vector(out)
            }
            PadRows { parent, start, total } => {
                let m = val(parent).matrix();
                let mut out = Array2::zeros((total, m.ncols()));
                out.slice_mut(ndarray::s![start..start + m.nrows(), ..]).assign(m);
                Tensor::Matrix(out)
            }
            Reshape { parent, rows, cols } => {
                let v = val(parent).vector();
                Tensor::Matrix(
                    Array2::from_shape_vec((rows, cols), v.to_vec())
                        .expect("length checked at construction"),
                )
            }
            Flatten(a) => {
                Tensor::Vector(Array1::from_vec(val(a).matrix().iter().copied().collect()))
            }
        }
    }
}

macro_rules! shape_check {
    ($op:expr, $cond:expr, $($arg:tt)*) => {
        if !$cond {
            panic!(concat!($op, ": shape mismatch: {}"), format!($($arg)*));
        }
    };
}

impl<'g> Node<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Shape {
        self.graph.inner.borrow().shape(self.id)
    }

    /// Row/column counts of a matrix node.
    pub fn shape_dims(&self) -> (usize, usize) {
        match self.shape() {
            Shape::Matrix(r, c) => (r, c),
            other => panic!("expected matrix node, got {other}"),
        }
    }

    pub fn shape_rows(&self) -> usize {
        self.shape_dims().0
    }

    pub fn shape_cols(&self) -> usize {
        self.shape_dims().1
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().requires_grad(self.id)
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(*self)
    }

    /// Scalar value convenience accessor.
    pub fn scalar_value(&self) -> f64 {
        self.value().scalar()
    }

    fn same_graph(&self, other: &Node<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "nodes belong to different graphs"
        );
    }

    fn binary(&self, other: Node<'g>, name: &str, same_shape: bool, op: impl FnOnce(usize, usize) -> Op) -> Node<'g> {
        self.same_graph(&other);
        let mut inner = self.graph.inner.borrow_mut();
        if same_shape {
            let (sa, sb) = (inner.shape(self.id), inner.shape(other.id));
            shape_check!("elementwise", sa == sb, "{name}: {sa} vs {sb}");
        }
        let id = inner.op(op(self.id, other.id));
        Node { graph: self.graph, id }
    }

    fn unary(&self, op: Op) -> Node<'g> {
        let id = self.graph.inner.borrow_mut().op(op);
        Node { graph: self.graph, id }
    }

    pub fn add(&self, other: Node<'g>) -> Node<'g> {
        self.binary(other, "add", true, Op::Add)
    }

    pub fn sub(&self, other: Node<'g>) -> Node<'g> {
        self.binary(other, "sub", true, Op::Sub)
    }

    /// Elementwise product (Hadamard); shapes must match exactly.
    pub fn mul(&self, other: Node<'g>) -> Node<'g> {
        self.binary(other, "mul", true, Op::Mul)
    }

    pub fn scale(&self, c: f64) -> Node<'g> {
        self.unary(Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Node<'g> {
        self.scale(-1.0)
    }

    /// Matrix–matrix product.
    pub fn matmul(&self, other: Node<'g>) -> Node<'g> {
        self.same_graph(&other);
        let mut inner = self.graph.inner.borrow_mut();
        let (sa, sb) = (inner.shape(self.id), inner.shape(other.id));
        match (sa, sb) {
            (Shape::Matrix(_, k1), Shape::Matrix(k2, _)) if k1 == k2 => {}
            _ => panic!("matmul: shape mismatch: {sa} vs {sb}"),
        }
        let id = inner.op(Op::MatMul(self.id, other.id));
        Node { graph: self.graph, id }
    }

    /// Matrix–vector product.
    pub fn matvec(&self, v: Node<'g>) -> Node<'g> {
        self.same_graph(&v);
        let mut inner = self.graph.inner.borrow_mut();
        let (sa, sb) = (inner.shape(self.id), inner.shape(v.id));
        match (sa, sb) {
            (Shape::Matrix(_, c), Shape::Vector(n)) if c == n => {}
            _ => panic!("matvec: shape mismatch: {sa} vs {sb}"),
        }
        let id = inner.op(Op::MatVec(self.id, v.id));
        Node { graph: self.graph, id }
    }

    /// Outer product of two vectors: `u.outer(v)[i][j] = u[i]*v[j]`.
    pub fn outer(&self, v: Node<'g>) -> Node<'g> {
        self.same_graph(&v);
        let mut inner = self.graph.inner.borrow_mut();
        let (sa, sb) = (inner.shape(self.id), inner.shape(v.id));
        match (sa, sb) {
            (Shape::Vector(_), Shape::Vector(_)) => {}
            _ => panic!("outer: shape mismatch: {sa} vs {sb}"),
        }
        let id = inner.op(Op::Outer(self.id, v.id));
        Node { graph: self.graph, id }
    }

    pub fn t(&self) -> Node<'g> {
        let shape = self.shape();
        match shape {
            Shape::Matrix(..) => self.unary(Op::Transpose(self.id)),
            _ => panic!("transpose: shape mismatch: expected matrix, got {shape}"),
        }
    }

    /// Sum of all elements (any shape) to a scalar.
    pub fn sum(&self) -> Node<'g> {
        self.unary(Op::Sum(self.id))
    }

    /// Mean of all elements.
    pub fn mean(&self) -> Node<'g> {
        let n = self.shape().len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn square(&self) -> Node<'g> {
        self.unary(Op::Square(self.id))
    }

    pub fn tanh(&self) -> Node<'g> {
        self.unary(Op::Tanh(self.id))
    }

    /// Elementwise power. Negative bases require an integer-valued exponent.
    pub fn pow(&self, p: f64) -> Node<'g> {
        self.unary(Op::Pow(self.id, p))
    }

    pub fn ln(&self) -> Node<'g> {
        self.unary(Op::Ln(self.id))
    }

    pub fn sqrt(&self) -> Node<'g> {
        self.pow(0.5)
    }

    /// Euclidean norm of all elements.
    pub fn norm(&self) -> Node<'g> {
        self.square().sum().sqrt()
    }

    /// Vector dot product.
    pub fn dot(&self, other: Node<'g>) -> Node<'g> {
        self.mul(other).sum()
    }

    /// Column-wise dot products of two equal-shape matrices: returns a vector
    /// whose j-th entry is `sum_i a[i][j]*b[i][j]`.
    pub fn col_dots(&self, other: Node<'g>) -> Node<'g> {
        self.mul(other).col_sums()
    }

    pub fn concat(&self, other: Node<'g>) -> Node<'g> {
        self.same_graph(&other);
        let mut inner = self.graph.inner.borrow_mut();
        let (sa, sb) = (inner.shape(self.id), inner.shape(other.id));
        match (sa, sb) {
            (Shape::Vector(_), Shape::Vector(_)) => {}
            _ => panic!("concat: shape mismatch: {sa} vs {sb}"),
        }
        let id = inner.op(Op::Concat(self.id, other.id));
        Node { graph: self.graph, id }
    }

    pub fn slice(&self, start: usize, len: usize) -> Node<'g> {
        let shape = self.shape();
        match shape {
            Shape::Vector(n) if start + len <= n => {}
            _ => panic!("slice: shape mismatch: [{start}..{}] of {shape}", start + len),
        }
        self.unary(Op::Slice { parent: self.id, start, len })
    }

    /// Extracts one element of a vector as a scalar node.
    pub fn element(&self, index: usize) -> Node<'g> {
        let shape = self.shape();
        match shape {
            Shape::Vector(n) if index < n => {}
            _ => panic!("element: shape mismatch: index {index} of {shape}"),
        }
        self.unary(Op::Element { parent: self.id, index })
    }

    /// Stacks `other` below `self` (matrices with equal column counts).
    pub fn vstack(&self, other: Node<'g>) -> Node<'g> {
        self.same_graph(&other);
        let mut inner = self.graph.inner.borrow_mut();
        let (sa, sb) = (inner.shape(self.id), inner.shape(other.id));
        match (sa, sb) {
            (Shape::Matrix(_, c1), Shape::Matrix(_, c2)) if c1 == c2 => {}
            _ => panic!("vstack: shape mismatch: {sa} vs {sb}"),
        }
        let id = inner.op(Op::VStack(self.id, other.id));
        Node { graph: self.graph, id }
    }

    pub fn rows(&self, start: usize, len: usize) -> Node<'g> {
        let shape = self.shape();
        match shape {
            Shape::Matrix(r, _) if start + len <= r => {}
            _ => panic!("rows: shape mismatch: [{start}..{}] of {shape}", start + len),
        }
        self.unary(Op::SliceRows { parent: self.id, start, len })
    }

    /// Fills a tensor of the given shape with this scalar.
    pub fn broadcast(&self, shape: Shape) -> Node<'g> {
        let own = self.shape();
        match own {
            Shape::Scalar => {}
            _ => panic!("broadcast: shape mismatch: expected scalar, got {own}"),
        }
        self.unary(Op::Broadcast { parent: self.id, shape })
    }

    /// Repeats a length-r vector as every column of an r×cols matrix.
    pub fn tile_cols(&self, cols: usize) -> Node<'g> {
        let shape = self.shape();
        match shape {
            Shape::Vector(_) => {}
            _ => panic!("tile_cols: shape mismatch: expected vector, got {shape}"),
        }
        self.unary(Op::TileCols { parent: self.id, cols })
    }

    /// Repeats a length-c vector as every row of a rows×c matrix.
    pub fn tile_rows(&self, rows: usize) -> Node<'g> {
        let shape = self.shape();
        match shape {
            Shape::Vector(_) => {}
            _ => panic!("tile_rows: shape mismatch: expected vector, got {shape}"),
        }
        self.unary(Op::TileRows { parent: self.id, rows })
    }

    /// Per-row sums of a matrix (length-r vector).
    pub fn row_sums(&self) -> Node<'g> {
        let shape = self.shape();
        match shape {
            Shape::Matrix(..) => {}
            _ => panic!("row_sums: shape mismatch: expected matrix, got {shape}"),
        }
        self.unary(Op::RowSums(self.id))
    }

    /// Per-column sums of a matrix (length-c vector).
    pub fn col_sums(&self) -> Node<'g> {
        let shape = self.shape();
        match shape {
            Shape::Matrix(..) => {}
            _ => panic!("col_sums: shape mismatch: expected matrix, got {shape}"),
        }
        self.unary(Op::ColSums(self.id))
    }

    /// Places a vector into a longer zero vector starting at `start`.
    pub fn pad(&self, start: usize, total: usize) -> Node<'g> {
        let shape = self.shape();
        match shape {
            Shape::Vector(n) if start + n <= total => {}
            _ => panic!("pad: shape mismatch: {shape} at {start} into vector({total})"),
        }
        self.unary(Op::Pad { parent: self.id, start, total })
    }

    /// Places a scalar at `index` of a zero vector of length `total`.
    pub fn pad_scalar(&self, index: usize, total: usize) -> Node<'g> {
        let shape = self.shape();
        match shape {
            Shape::Scalar if index < total => {}
            _ => panic!("pad_scalar: shape mismatch: {shape} at {index} into vector({total})"),
        }
        self.unary(Op::PadScalar { parent: self.id, index, total })
    }

    /// Places a matrix into a taller zero matrix starting at row `start`.
    pub fn pad_rows(&self, start: usize, total: usize) -> Node<'g> {
        let shape = self.shape();
        match shape {
            Shape::Matrix(r, _) if start + r <= total => {}
            _ => panic!("pad_rows: shape mismatch: {shape} at {start} into {total} rows"),
        }
        self.unary(Op::PadRows { parent: self.id, start, total })
    }

    /// Reinterprets a length r·c vector as an r×c row-major matrix.
    pub fn reshape(&self, rows: usize, cols: usize) -> Node<'g> {
        let shape = self.shape();
        match shape {
            Shape::Vector(n) if n == rows * cols => {}
            _ => panic!("reshape: shape mismatch: {shape} into matrix({rows}x{cols})"),
        }
        self.unary(Op::Reshape { parent: self.id, rows, cols })
    }

    /// Row-major flattening of a matrix into a vector.
    pub fn flatten(&self) -> Node<'g> {
        let shape = self.shape();
        match shape {
            Shape::Matrix(..) => {}
            _ => panic!("flatten: shape mismatch: expected matrix, got {shape}"),
        }
        self.unary(Op::Flatten(self.id))
    }
}

impl<'g> std::ops::Add for Node<'g> {
    type Output = Node<'g>;
    fn add(self, rhs: Node<'g>) -> Node<'g> {
        Node::add(&self, rhs)
    }
}

impl<'g> std::ops::Sub for Node<'g> {
    type Output = Node<'g>;
    fn sub(self, rhs: Node<'g>) -> Node<'g> {
        Node::sub(&self, rhs)
    }
}

impl<'g> std::ops::Mul for Node<'g> {
    type Output = Node<'g>;
    fn mul(self, rhs: Node<'g>) -> Node<'g> {
        Node::mul(&self, rhs)
    }
}

/// Reverse-mode gradient of a scalar `output` with respect to `wrt` nodes.
///
/// The adjoint of every node is assembled *as graph expressions*, so the
/// returned nodes can be differentiated again. Nodes in `wrt` that the output
/// does not depend on receive a zero gradient of their own shape.
///
/// Panics if `output` is not scalar or if any `wrt` node has
/// `requires_grad == false` — both are contract violations by the caller.
pub fn grad<'g>(output: Node<'g>, wrt: &[Node<'g>]) -> Vec<Node<'g>> {
    let graph = output.graph;
    {
        let inner = graph.inner.borrow();
        let out_shape = inner.shape(output.id);
        assert!(
            out_shape == Shape::Scalar,
            "grad: output must be scalar, got {out_shape}"
        );
        for w in wrt {
            assert!(
                std::ptr::eq(w.graph, graph),
                "grad: wrt node belongs to a different graph"
            );
            assert!(
                inner.requires_grad(w.id),
                "grad: wrt node {} does not require gradients",
                w.id
            );
        }
    }

    let limit = output.id;
    let mut inner = graph.inner.borrow_mut();

    // Restrict the sweep to ancestors of the output.
    let mut reachable = vec![false; limit + 1];
    reachable[limit] = true;
    for id in (0..=limit).rev() {
        if !reachable[id] {
            continue;
        }
        let (p0, p1) = inner.nodes[id].op.parents();
        if let Some(p) = p0 {
            reachable[p] = true;
        }
        if let Some(p) = p1 {
            reachable[p] = true;
        }
    }

    // adjoint[id] = node holding d(output)/d(node id), built incrementally.
    let mut adjoint: Vec<Option<usize>> = vec![None; limit + 1];
    adjoint[limit] = Some(inner.push(NodeData {
        op: Op::Leaf,
        value: Tensor::Scalar(1.0),
        requires_grad: false,
    }));

    for id in (0..=limit).rev() {
        if !reachable[id] || !inner.requires_grad(id) {
            continue;
        }
        let Some(adj) = adjoint[id] else { continue };
        let op = inner.nodes[id].op.clone();

        // Each arm lists (parent, contribution-builder) pairs; contributions
        // are accumulated into the parent's adjoint with an Add node.
        let contribute = |inner: &mut GraphInner, adjoint: &mut Vec<Option<usize>>, parent: usize, contrib: usize| {
            if !inner.requires_grad(parent) {
                return;
            }
            adjoint[parent] = Some(match adjoint[parent] {
                None => contrib,
                Some(existing) => inner.op(Op::Add(existing, contrib)),
            });
        };

        use Op::*;
        match op {
            Leaf => {}
            Add(a, b) => {
                contribute(&mut inner, &mut adjoint, a, adj);
                contribute(&mut inner, &mut adjoint, b, adj);
            }
            Sub(a, b) => {
                contribute(&mut inner, &mut adjoint, a, adj);
                let neg = inner.op(Scale(adj, -1.0));
                contribute(&mut inner, &mut adjoint, b, neg);
            }
            Mul(a, b) => {
                if inner.requires_grad(a) {
                    let c = inner.op(Mul(adj, b));
                    contribute(&mut inner, &mut adjoint, a, c);
                }
                if inner.requires_grad(b) {
                    let c = inner.op(Mul(adj, a));
                    contribute(&mut inner, &mut adjoint, b, c);
                }
            }
            Scale(a, c) => {
                let s = inner.op(Scale(adj, c));
                contribute(&mut inner, &mut adjoint, a, s);
            }
            MatMul(a, b) => {
                if inner.requires_grad(a) {
                    let bt = inner.op(Transpose(b));
                    let c = inner.op(MatMul(adj, bt));
                    contribute(&mut inner, &mut adjoint, a, c);
                }
                if inner.requires_grad(b) {
                    let at = inner.op(Transpose(a));
                    let c = inner.op(MatMul(at, adj));
                    contribute(&mut inner, &mut adjoint, b, c);
                }
            }
            MatVec(a, v) => {
                if inner.requires_grad(a) {
                    let c = inner.op(Outer(adj, v));
                    contribute(&mut inner, &mut adjoint, a, c);
                }
                if inner.requires_grad(v) {
                    let at = inner.op(Transpose(a));
                    let c = inner.op(MatVec(at, adj));
                    contribute(&mut inner, &mut adjoint, v, c);
                }
            }
            Outer(u, v) => {
                if inner.requires_grad(u) {
                    let c = inner.op(MatVec(adj, v));
                    contribute(&mut inner, &mut adjoint, u, c);
                }
                if inner.requires_grad(v) {
                    let adj_t = inner.op(Transpose(adj));
                    let c = inner.op(MatVec(adj_t, u));
                    contribute(&mut inner, &mut adjoint, v, c);
                }
            }
            Transpose(a) => {
                let c = inner.op(Transpose(adj));
                contribute(&mut inner, &mut adjoint, a, c);
            }
            Sum(a) => {
                let shape = inner.shape(a);
                let c = inner.op(Broadcast { parent: adj, shape });
                contribute(&mut inner, &mut adjoint, a, c);
            }
            Square(a) => {
                let m = inner.op(Mul(adj, a));
                let c = inner.op(Scale(m, 2.0));
                contribute(&mut inner, &mut adjoint, a, c);
            }
            Tanh(a) => {
                // d tanh = 1 - tanh^2, written through the op's own output
                // so the rule stays differentiable.
                let y_sq = inner.op(Square(id));
                let damp = inner.op(Mul(adj, y_sq));
                let c = inner.op(Sub(adj, damp));
                contribute(&mut inner, &mut adjoint, a, c);
            }
            Pow(a, p) => {
                let lower = inner.op(Pow(a, p - 1.0));
                let m = inner.op(Mul(adj, lower));
                let c = inner.op(Scale(m, p));
                contribute(&mut inner, &mut adjoint, a, c);
            }
            Ln(a) => {
                let inv = inner.op(Pow(a, -1.0));
                let c = inner.op(Mul(adj, inv));
                contribute(&mut inner, &mut adjoint, a, c);
            }
            Concat(a, b) => {
                let (na, nb) = match (inner.shape(a), inner.shape(b)) {
                    (Shape::Vector(na), Shape::Vector(nb)) => (na, nb),
                    _ => unreachable!(),
                };
                if inner.requires_grad(a) {
                    let c = inner.op(Slice { parent: adj, start: 0, len: na });
                    contribute(&mut inner, &mut adjoint, a, c);
                }
                if inner.requires_grad(b) {
                    let c = inner.op(Slice { parent: adj, start: na, len: nb });
                    contribute(&mut inner, &mut adjoint, b, c);
                }
            }
            Slice { parent, start, len: _ } => {
                let total = match inner.shape(parent) {
                    Shape::Vector(n) => n,
                    _ => unreachable!(),
                };
                let c = inner.op(Pad { parent: adj, start, total });
                contribute(&mut inner, &mut adjoint, parent, c);
            }
            Element { parent, index } => {
                let total = match inner.shape(parent) {
                    Shape::Vector(n) => n,
                    _ => unreachable!(),
                };
                let c = inner.op(PadScalar { parent: adj, index, total });
                contribute(&mut inner, &mut adjoint, parent, c);
            }
            VStack(a, b) => {
                let (ra, rb) = match (inner.shape(a), inner.shape(b)) {
                    (Shape::Matrix(ra, _), Shape::Matrix(rb, _)) => (ra, rb),
                    _ => unreachable!(),
                };
                if inner.requires_grad(a) {
                    let c = inner.op(SliceRows { parent: adj, start: 0, len: ra });
                    contribute(&mut inner, &mut adjoint, a, c);
                }
                if inner.requires_grad(b) {
                    let c = inner.op(SliceRows { parent: adj, start: ra, len: rb });
                    contribute(&mut inner, &mut adjoint, b, c);
                }
            }
            SliceRows { parent, start, len: _ } => {
                let total = match inner.shape(parent) {
                    Shape::Matrix(r, _) => r,
                    _ => unreachable!(),
                };
                let c = inner.op(PadRows { parent: adj, start, total });
                contribute(&mut inner, &mut adjoint, parent, c);
            }
            Broadcast { parent, shape: _ } => {
                let c = inner.op(Sum(adj));
                contribute(&mut inner, &mut adjoint, parent, c);
            }
            TileCols { parent, cols: _ } => {
                let c = inner.op(RowSums(adj));
                contribute(&mut inner, &mut adjoint, parent, c);
            }
            TileRows { parent, rows: _ } => {
                let c = inner.op(ColSums(adj));
                contribute(&mut inner, &mut adjoint, parent, c);
            }
            RowSums(a) => {
                let cols = match inner.shape(a) {
                    Shape::Matrix(_, c) => c,
                    _ => unreachable!(),
                };
                let c = inner.op(TileCols { parent: adj, cols });
                contribute(&mut inner, &mut adjoint, a, c);
            }
            ColSums(a) => {
                let rows = match inner.shape(a) {
                    Shape::Matrix(r, _) => r,
                    _ => unreachable!(),
                };
                let c = inner.op(TileRows { parent: adj, rows });
                contribute(&mut inner, &mut adjoint, a, c);
            }
            Pad { parent, start, total: _ } => {
                let len = match inner.shape(parent) {
                    Shape::Vector(n) => n,
                    _ => unreachable!(),
                };
                let c = inner.op(Slice { parent: adj, start, len });
                contribute(&mut inner, &mut adjoint, parent, c);
            }
            PadScalar { parent, index, total: _ } => {
                let c = inner.op(Element { parent: adj, index });
                contribute(&mut inner, &mut adjoint, parent, c);
            }
            PadRows { parent, start, total: _ } => {
                let len = match inner.shape(parent) {
                    Shape::Matrix(r, _) => r,
                    _ => unreachable!(),
                };
                let c = inner.op(SliceRows { parent: adj, start, len });
                contribute(&mut inner, &mut adjoint, parent, c);
            }
            Reshape { parent, .. } => {
                let c = inner.op(Flatten(adj));
                contribute(&mut inner, &mut adjoint, parent, c);
            }
            Flatten(a) => {
                let (rows, cols) = match inner.shape(a) {
                    Shape::Matrix(r, c) => (r, c),
                    _ => unreachable!(),
                };
                let c = inner.op(Reshape { parent: adj, rows, cols });
                contribute(&mut inner, &mut adjoint, a, c);
            }
        }
    }

    wrt.iter()
        .map(|w| match adjoint[w.id] {
            Some(id) => Node { graph, id },
            None => {
                let shape = inner.shape(w.id);
                let id = inner.push(NodeData {
                    op: Op::Leaf,
                    value: Tensor::zeros(shape),
                    requires_grad: false,
                });
                Node { graph, id }
            }
        })
        .collect()
}

/// Central finite differences of `value` around `point`.
pub fn central_differences(value: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = value(&probe);
        probe[i] = point[i] - step;
        let down = value(&probe);
        probe[i] = point[i];
        out.push((up - down) / (2.0 * step));
    }
    out
}

/// Worst relative deviation between two gradient estimates:
/// `max_i |a_i - b_i| / (|a_i| + |b_i| + 1e-12)`.
pub fn max_rel_deviation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs() + 1e-12))
        .fold(0.0, f64::max)
}

/// Checks the analytic gradient of `f` (a scalar function of a flat input
/// vector, expressed through graph ops) against central finite differences
/// with the given step. Returns the worst relative deviation over
/// coordinates. The finite-difference side only ever evaluates values, so it
/// is independent of the backward machinery it certifies.
pub fn finite_difference_check<F>(f: F, point: &[f64], step: f64) -> f64
where
    F: for<'a> Fn(&'a Graph, Node<'a>) -> Node<'a>,
{
    let analytic = {
        let g = Graph::new();
        let x = g.input(Tensor::Vector(Array1::from_vec(point.to_vec())));
        let y = f(&g, x);
        let dy = grad(y, &[x]);
        dy[0].value().flat()
    };
    let numeric = central_differences(
        |p| {
            let g = Graph::new();
            let x = g.input(Tensor::Vector(Array1::from_vec(p.to_vec())));
            f(&g, x).value().scalar()
        },
        point,
        step,
    );
    max_rel_deviation(&analytic, &numeric)
}

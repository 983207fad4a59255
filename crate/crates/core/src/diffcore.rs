//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Values are recorded on a [`Tape`]; calling [`Tape::grad`] builds the
//! adjoint computation out of the same primitive ops, so gradients are
//! themselves differentiable (gradient-of-gradient, Hessian-vector
//! products, and deeper nestings all work).
//!
//! The primitive set is closed: every vector-Jacobian product is expressed
//! in terms of the ops below, which is what makes repeated backward passes
//! possible without any special casing.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("operands belong to different tapes")]
    TapeMismatch,
    #[error("grad requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("requested gradient target is not on this tape")]
    NotOnTape,
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Dense array with an explicit shape. A scalar has the empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Value {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Value {
    pub fn scalar(x: f64) -> Self {
        Value { shape: vec![], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Value { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Value { shape: vec![rows, cols], data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Value { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Value { shape: shape.to_vec(), data: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn as_scalar(&self) -> f64 {
        debug_assert!(self.data.len() == 1);
        self.data[0]
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Primitive operations. Input node ids are stored inline.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    /// Row-broadcast add: `[r, c] + [c]`.
    AddBcastRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// Scalar tape value times array.
    BcastMul(usize, usize),
    Recip(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    /// `[r, c] · [c] -> [r]`
    MatVec(usize, usize),
    /// `[r, c]ᵀ · [r] -> [c]`
    MatVecT(usize, usize),
    /// `[r] ⊗ [c] -> [r, c]`
    Outer(usize, usize),
    MatMul(usize, usize),
    /// `A · Bᵀ`
    MatMulNT(usize, usize),
    /// `Aᵀ · B`
    MatMulTN(usize, usize),
    Sum(usize),
    Mean(usize),
    Dot(usize, usize),
    SqNorm(usize),
    /// `[r, c] -> [c]`, summing over rows.
    ColSum(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBcastRow(..) => "add-bcast-row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::BcastMul(..) => "bcast-mul",
            Op::Recip(..) => "recip",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::MatVec(..) => "matvec",
            Op::MatVecT(..) => "matvec-t",
            Op::Outer(..) => "outer",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul-nt",
            Op::MatMulTN(..) => "matmul-tn",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Dot(..) => "dot",
            Op::SqNorm(..) => "sqnorm",
            Op::ColSum(..) => "colsum",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::AddBcastRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::BcastMul(a, b)
            | Op::MatVec(a, b)
            | Op::MatVecT(a, b)
            | Op::Outer(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::MatMulTN(a, b)
            | Op::Dot(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Recip(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SqNorm(a)
            | Op::ColSum(a) => vec![a],
        }
    }
}

struct Node {
    op: Op,
    value: Value,
    requires_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Recording arena for one forward (and any number of backward) passes.
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
    generation: u64,
}

impl Clone for Tape {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner), generation: self.generation }
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape(gen={}, nodes={})", self.generation, self.inner.borrow().nodes.len())
    }
}

/// Handle to one recorded value.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(id={}, shape={:?})", self.id, self.shape())
    }
}

/// Forward evaluation of a single primitive. Used both for recording and
/// for replaying a tape, so replays are bit-exact by construction.
fn eval_op(op: &Op, vals: &[&Value]) -> Result<Value> {
    let err = |detail: String| DiffError::ShapeMismatch { op: op.name(), detail };
    let out = match *op {
        Op::Leaf => unreachable!("leaf nodes are not re-evaluated"),
        Op::Add(..) | Op::Sub(..) | Op::Mul(..) => {
            let (a, b) = (vals[0], vals[1]);
            if a.shape != b.shape {
                return Err(err(format!("{:?} vs {:?}", a.shape, b.shape)));
            }
            let data = match op {
                Op::Add(..) => a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                Op::Sub(..) => a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
                _ => a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
            };
            Value { shape: a.shape.clone(), data }
        }
        Op::AddBcastRow(..) => {
            let (a, v) = (vals[0], vals[1]);
            if a.shape.len() != 2 || v.shape.len() != 1 || a.shape[1] != v.shape[0] {
                return Err(err(format!("{:?} + {:?}", a.shape, v.shape)));
            }
            let c = a.shape[1];
            let mut data = a.data.clone();
            for row in data.chunks_mut(c) {
                for (x, y) in row.iter_mut().zip(&v.data) {
                    *x += y;
                }
            }
            Value { shape: a.shape.clone(), data }
        }
        Op::Scale(_, c) => {
            let a = vals[0];
            Value { shape: a.shape.clone(), data: a.data.iter().map(|x| c * x).collect() }
        }
        Op::BcastMul(..) => {
            let (s, a) = (vals[0], vals[1]);
            if !s.is_scalar() {
                return Err(err(format!("scalar expected, got {:?}", s.shape)));
            }
            let c = s.as_scalar();
            Value { shape: a.shape.clone(), data: a.data.iter().map(|x| c * x).collect() }
        }
        Op::Recip(..) => {
            let a = vals[0];
            Value { shape: a.shape.clone(), data: a.data.iter().map(|x| 1.0 / x).collect() }
        }
        Op::Exp(..) => {
            let a = vals[0];
            Value { shape: a.shape.clone(), data: a.data.iter().map(|x| x.exp()).collect() }
        }
        Op::Log(..) => {
            let a = vals[0];
            Value { shape: a.shape.clone(), data: a.data.iter().map(|x| x.ln()).collect() }
        }
        Op::Tanh(..) => {
            let a = vals[0];
            Value { shape: a.shape.clone(), data: a.data.iter().map(|x| x.tanh()).collect() }
        }
        Op::Relu(..) => {
            let a = vals[0];
            Value { shape: a.shape.clone(), data: a.data.iter().map(|x| x.max(0.0)).collect() }
        }
        Op::MatVec(..) => {
            let (m, v) = (vals[0], vals[1]);
            if m.shape.len() != 2 || v.shape.len() != 1 || m.shape[1] != v.shape[0] {
                return Err(err(format!("{:?} · {:?}", m.shape, v.shape)));
            }
            let (r, c) = (m.shape[0], m.shape[1]);
            let mut data = vec![0.0; r];
            for i in 0..r {
                let row = &m.data[i * c..(i + 1) * c];
                data[i] = row.iter().zip(&v.data).map(|(x, y)| x * y).sum();
            }
            Value { shape: vec![r], data }
        }
        Op::MatVecT(..) => {
            let (m, v) = (vals[0], vals[1]);
            if m.shape.len() != 2 || v.shape.len() != 1 || m.shape[0] != v.shape[0] {
                return Err(err(format!("{:?}ᵀ · {:?}", m.shape, v.shape)));
            }
            let (r, c) = (m.shape[0], m.shape[1]);
            let mut data = vec![0.0; c];
            for i in 0..r {
                let row = &m.data[i * c..(i + 1) * c];
                let vi = v.data[i];
                for (d, x) in data.iter_mut().zip(row) {
                    *d += vi * x;
                }
            }
            Value { shape: vec![c], data }
        }
        Op::Outer(..) => {
            let (u, v) = (vals[0], vals[1]);
            if u.shape.len() != 1 || v.shape.len() != 1 {
                return Err(err(format!("{:?} ⊗ {:?}", u.shape, v.shape)));
            }
            let (r, c) = (u.shape[0], v.shape[0]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                let ui = u.data[i];
                for (d, x) in data[i * c..(i + 1) * c].iter_mut().zip(&v.data) {
                    *d = ui * x;
                }
            }
            Value { shape: vec![r, c], data }
        }
        Op::MatMul(..) | Op::MatMulNT(..) | Op::MatMulTN(..) => {
            let (a, b) = (vals[0], vals[1]);
            if a.shape.len() != 2 || b.shape.len() != 2 {
                return Err(err(format!("{:?} × {:?}", a.shape, b.shape)));
            }
            // Normalize to C[r, c] = sum_k A'[r, k] B'[k, c].
            let (r, k, c, a_t, b_t) = match op {
                Op::MatMul(..) => (a.shape[0], a.shape[1], b.shape[1], false, false),
                Op::MatMulNT(..) => (a.shape[0], a.shape[1], b.shape[0], false, true),
                _ => (a.shape[1], a.shape[0], b.shape[1], true, false),
            };
            let k_b = if b_t { b.shape[1] } else { b.shape[0] };
            if k != k_b {
                return Err(err(format!("inner dims {:?} × {:?}", a.shape, b.shape)));
            }
            let mut data = vec![0.0; r * c];
            if !b_t {
                // Row-major friendly: accumulate scaled rows of B'.
                for i in 0..r {
                    let out = &mut data[i * c..(i + 1) * c];
                    for p in 0..k {
                        let aip = if a_t { a.data[p * r + i] } else { a.data[i * k + p] };
                        if aip == 0.0 {
                            continue;
                        }
                        let brow = &b.data[p * c..(p + 1) * c];
                        for (o, x) in out.iter_mut().zip(brow) {
                            *o += aip * x;
                        }
                    }
                }
            } else {
                // B transposed: both A and B rows are contiguous dot products.
                for i in 0..r {
                    let arow = &a.data[i * k..(i + 1) * k];
                    for j in 0..c {
                        let brow = &b.data[j * k..(j + 1) * k];
                        data[i * c + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
            }
            Value { shape: vec![r, c], data }
        }
        Op::Sum(..) => Value::scalar(vals[0].data.iter().sum()),
        Op::Mean(..) => {
            let a = vals[0];
            Value::scalar(a.data.iter().sum::<f64>() / a.data.len() as f64)
        }
        Op::Dot(..) => {
            let (a, b) = (vals[0], vals[1]);
            if a.shape != b.shape {
                return Err(err(format!("{:?} · {:?}", a.shape, b.shape)));
            }
            Value::scalar(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
        }
        Op::SqNorm(..) => Value::scalar(vals[0].data.iter().map(|x| x * x).sum()),
        Op::ColSum(..) => {
            let a = vals[0];
            if a.shape.len() != 2 {
                return Err(err(format!("matrix expected, got {:?}", a.shape)));
            }
            let c = a.shape[1];
            let mut data = vec![0.0; c];
            for row in a.data.chunks(c) {
                for (d, x) in data.iter_mut().zip(row) {
                    *d += x;
                }
            }
            Value { shape: vec![c], data }
        }
    };
    if !out.is_finite() {
        return Err(DiffError::NonFinite { op: op.name() });
    }
    Ok(out)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
            generation: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Value, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: "leaf" });
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Ok(Var { tape: self.clone(), id })
    }

    /// Differentiable input.
    pub fn input(&self, value: Value) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Non-differentiable constant.
    pub fn constant(&self, value: Value) -> Result<Var> {
        self.push_leaf(value, false)
    }

    pub fn scalar_const(&self, x: f64) -> Result<Var> {
        self.constant(Value::scalar(x))
    }

    fn record(&self, op: Op) -> Result<Var> {
        let value;
        let requires_grad;
        {
            let inner = self.inner.borrow();
            let ids = op.inputs();
            let vals: Vec<&Value> = ids.iter().map(|&i| &inner.nodes[i].value).collect();
            value = eval_op(&op, &vals)?;
            requires_grad = ids.iter().any(|&i| inner.nodes[i].requires_grad);
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, value, requires_grad });
        Ok(Var { tape: self.clone(), id })
    }

    /// Re-runs every non-leaf node from its recorded inputs and checks the
    /// stored outputs are reproduced bit-exactly.
    pub fn replay_check(&self) -> Result<bool> {
        let inner = self.inner.borrow();
        for node in &inner.nodes {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let vals: Vec<&Value> =
                node.op.inputs().iter().map(|&i| &inner.nodes[i].value).collect();
            let redo = eval_op(&node.op, &vals)?;
            if redo.data != node.value.data {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reverse pass from a scalar `output` to each of `wrt`.
    ///
    /// The returned adjoints live on this tape and are built from the same
    /// primitive set, so they can be differentiated again (`create_graph`
    /// exists for API clarity; the graph is always constructed).
    pub fn grad(&self, output: &Var, wrt: &[&Var], _create_graph: bool) -> Result<Vec<Var>> {
        if !Rc::ptr_eq(&self.inner, &output.tape.inner) {
            return Err(DiffError::TapeMismatch);
        }
        for w in wrt {
            if !Rc::ptr_eq(&self.inner, &w.tape.inner) {
                return Err(DiffError::NotOnTape);
            }
        }
        let out_shape = output.shape();
        if !out_shape.is_empty() {
            return Err(DiffError::NonScalarOutput(out_shape));
        }

        let frontier = output.id;
        let mut adjoints: HashMap<usize, Var> = HashMap::new();
        adjoints.insert(frontier, self.constant(Value::scalar(1.0))?);

        // Node ids are in topological order; sweep backwards.
        for id in (0..=frontier).rev() {
            let Some(adj) = adjoints.get(&id).cloned() else { continue };
            let (op, requires_grad) = {
                let inner = self.inner.borrow();
                (inner.nodes[id].op.clone(), inner.nodes[id].requires_grad)
            };
            if matches!(op, Op::Leaf) || !requires_grad {
                continue;
            }
            let node_var = Var { tape: self.clone(), id };
            for (input, contrib) in self.vjp(&op, &node_var, &adj)? {
                let needs = self.inner.borrow().nodes[input].requires_grad;
                if !needs {
                    continue;
                }
                match adjoints.remove(&input) {
                    Some(prev) => {
                        adjoints.insert(input, prev.add(&contrib)?);
                    }
                    None => {
                        adjoints.insert(input, contrib);
                    }
                }
            }
        }

        wrt.iter()
            .map(|w| match adjoints.get(&w.id) {
                Some(a) => Ok(a.clone()),
                None => self.constant(Value::zeros(&w.shape())),
            })
            .collect()
    }

    /// Per-input adjoint contributions for one node. `y` is the node itself,
    /// `g` the adjoint flowing into it.
    fn vjp(&self, op: &Op, y: &Var, g: &Var) -> Result<Vec<(usize, Var)>> {
        let var = |id: usize| Var { tape: self.clone(), id };
        Ok(match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::AddBcastRow(a, v) => vec![(a, g.clone()), (v, g.colsum()?)],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.scale(-1.0)?)],
            Op::Mul(a, b) => vec![(a, g.mul(&var(b))?), (b, g.mul(&var(a))?)],
            Op::Scale(a, c) => vec![(a, g.scale(c)?)],
            Op::BcastMul(s, a) => {
                vec![(s, g.dot(&var(a))?), (a, var(s).bcast_mul(g)?)]
            }
            Op::Recip(a) => vec![(a, g.mul(y)?.mul(y)?.scale(-1.0)?)],
            Op::Exp(a) => vec![(a, g.mul(y)?)],
            Op::Log(a) => vec![(a, g.mul(&var(a).recip()?)?)],
            Op::Tanh(a) => {
                let ones = self.constant(Value::ones(&y.shape()))?;
                vec![(a, g.mul(&ones.sub(&y.mul(y)?)?)?)]
            }
            Op::Relu(a) => {
                let av = var(a).value();
                let mask = Value {
                    shape: av.shape.clone(),
                    data: av.data.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect(),
                };
                vec![(a, g.mul(&self.constant(mask)?)?)]
            }
            Op::MatVec(m, v) => {
                vec![(m, g.outer(&var(v))?), (v, var(m).matvec_t(g)?)]
            }
            Op::MatVecT(m, v) => {
                vec![(m, var(v).outer(g)?), (v, var(m).matvec(g)?)]
            }
            Op::Outer(u, v) => {
                vec![(u, g.matvec(&var(v))?), (v, g.matvec_t(&var(u))?)]
            }
            Op::MatMul(a, b) => {
                vec![(a, g.matmul_nt(&var(b))?), (b, var(a).matmul_tn(g)?)]
            }
            Op::MatMulNT(a, b) => {
                vec![(a, g.matmul(&var(b))?), (b, g.matmul_tn(&var(a))?)]
            }
            Op::MatMulTN(a, b) => {
                vec![(a, var(b).matmul_nt(g)?), (b, var(a).matmul(g)?)]
            }
            Op::Sum(a) => {
                let ones = self.constant(Value::ones(&var(a).shape()))?;
                vec![(a, g.bcast_mul(&ones)?)]
            }
            Op::Mean(a) => {
                let shape = var(a).shape();
                let n: usize = shape.iter().product();
                let w = self.constant(Value {
                    shape,
                    data: vec![1.0 / n as f64; n],
                })?;
                vec![(a, g.bcast_mul(&w)?)]
            }
            Op::Dot(a, b) => {
                vec![(a, g.bcast_mul(&var(b))?), (b, g.bcast_mul(&var(a))?)]
            }
            Op::SqNorm(a) => vec![(a, g.bcast_mul(&var(a))?.scale(2.0)?)],
            Op::ColSum(a) => {
                let rows = var(a).shape()[0];
                let ones = self.constant(Value::ones(&[rows]))?;
                vec![(a, ones.outer(g)?)]
            }
        })
    }
}

macro_rules! binary_op {
    ($name:ident, $variant:ident) => {
        pub fn $name(&self, other: &Var) -> Result<Var> {
            if !Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
                return Err(DiffError::TapeMismatch);
            }
            self.tape.record(Op::$variant(self.id, other.id))
        }
    };
}

macro_rules! unary_op {
    ($name:ident, $variant:ident) => {
        pub fn $name(&self) -> Result<Var> {
            self.tape.record(Op::$variant(self.id))
        }
    };
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Value {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    binary_op!(add, Add);
    binary_op!(add_bcast_row, AddBcastRow);
    binary_op!(sub, Sub);
    binary_op!(mul, Mul);
    binary_op!(bcast_mul, BcastMul);
    binary_op!(matvec, MatVec);
    binary_op!(matvec_t, MatVecT);
    binary_op!(outer, Outer);
    binary_op!(matmul, MatMul);
    binary_op!(matmul_nt, MatMulNT);
    binary_op!(matmul_tn, MatMulTN);
    binary_op!(dot, Dot);

    unary_op!(recip, Recip);
    unary_op!(exp, Exp);
    unary_op!(log, Log);
    unary_op!(tanh, Tanh);
    unary_op!(relu, Relu);
    unary_op!(sum, Sum);
    unary_op!(mean, Mean);
    unary_op!(sqnorm, SqNorm);
    unary_op!(colsum, ColSum);

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.tape.record(Op::Scale(self.id, c))
    }

    /// Softmax cross-entropy for one logit vector against an integer label.
    ///
    /// Composed from the primitive set with a detached max-shift, so both
    /// the value and all derivative orders are available and stable.
    pub fn softmax_cross_entropy(&self, label: usize) -> Result<Var> {
        let shape = self.shape();
        if shape.len() != 1 || label >= shape[0] {
            return Err(DiffError::ShapeMismatch {
                op: "softmax-cross-entropy",
                detail: format!("logits {:?}, label {}", shape, label),
            });
        }
        let k = shape[0];
        let v = self.value();
        let m = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shift = self.tape.constant(Value { shape: vec![k], data: vec![m; k] })?;
        let lse = self
            .sub(&shift)?
            .exp()?
            .sum()?
            .log()?
            .add(&self.tape.scalar_const(m)?)?;
        let mut onehot = vec![0.0; k];
        onehot[label] = 1.0;
        let oh = self.tape.constant(Value { shape: vec![k], data: onehot })?;
        lse.sub(&self.dot(&oh)?)
    }

    /// Mean softmax cross-entropy over the rows of a logit matrix.
    pub fn softmax_cross_entropy_rows(&self, labels: &[usize]) -> Result<Var> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(DiffError::ShapeMismatch {
                op: "softmax-cross-entropy",
                detail: format!("logits {:?}, {} labels", shape, labels.len()),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let v = self.value();
        // Detached per-row max; subtracting a constant leaves all
        // derivatives of log-sum-exp unchanged.
        let mut maxes = vec![0.0; r];
        let mut shift = vec![0.0; r * c];
        let mut onehot = vec![0.0; r * c];
        for i in 0..r {
            let row = &v.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            maxes[i] = m;
            for j in 0..c {
                shift[i * c + j] = m;
            }
            if labels[i] >= c {
                return Err(DiffError::ShapeMismatch {
                    op: "softmax-cross-entropy",
                    detail: format!("label {} out of range {}", labels[i], c),
                });
            }
            onehot[i * c + labels[i]] = 1.0;
        }
        let shift = self.tape.constant(Value::matrix(r, c, shift))?;
        let ones_c = self.tape.constant(Value::ones(&[c]))?;
        let maxes = self.tape.constant(Value::vector(maxes))?;
        let lse = self
            .sub(&shift)?
            .exp()?
            .matvec(&ones_c)?
            .log()?
            .add(&maxes)?;
        let picked = self.mul(&self.tape.constant(Value::matrix(r, c, onehot))?)?;
        lse.sum()?.sub(&picked.sum()?)?.scale(1.0 / r as f64)
    }
}

/// Hessian-vector product of a scalar function of one vector input,
/// computed by double backward; the Hessian is never materialized.
pub fn hvp<F>(f: F, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    F: FnOnce(&Tape, &Var) -> Result<Var>,
{
    let tape = Tape::new();
    let th = tape.input(Value::vector(theta.to_vec()))?;
    let y = f(&tape, &th)?;
    let g = tape.grad(&y, &[&th], true)?.remove(0);
    let vc = tape.constant(Value::vector(v.to_vec()))?;
    let s = g.dot(&vc)?;
    let h = tape.grad(&s, &[&th], false)?.remove(0);
    Ok(h.value().data)
}

/// Gradient of a scalar function of one vector input.
pub fn grad_of<F>(f: F, theta: &[f64]) -> Result<Vec<f64>>
where
    F: FnOnce(&Tape, &Var) -> Result<Var>,
{
    let tape = Tape::new();
    let th = tape.input(Value::vector(theta.to_vec()))?;
    let y = f(&tape, &th)?;
    let g = tape.grad(&y, &[&th], false)?.remove(0);
    Ok(g.value().data)
}

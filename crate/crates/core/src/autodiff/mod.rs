//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] is a dynamic graph rebuilt per sentence: every operation appends
//! a node holding its forward value, and [`Tape::backward`] replays the tape in
//! reverse, accumulating gradients. Parameters live outside the tape in a
//! [`ParamStore`]; a tape copies the values it needs at construction time and
//! scatters gradients back with [`Tape::apply_param_grads`]. The op set is
//! exactly what the encoders and the CRF layer require — no broadcasting
//! beyond row/column vector addition, no higher-order derivatives.

mod params;
mod tensor;

pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("NotScalar: backward requires a scalar loss")]
    NotScalar,
    #[error("DuplicateParam: parameter name {0:?} already registered")]
    DuplicateParam(String),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { id: ParamId },
    GatherRows { id: ParamId, rows: Vec<usize> },
    Add { a: usize, b: usize },
    AddRow { m: usize, v: usize },
    AddCol { m: usize, v: usize },
    Sub { a: usize, b: usize },
    Hadamard { a: usize, b: usize },
    MatMul { a: usize, b: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize, len: usize },
    Flatten { x: usize },
    StackRows { rows: Vec<usize> },
    Tanh { x: usize },
    Sigmoid { x: usize },
    Relu { x: usize },
    MaxAxis { m: usize, axis: usize, argmax: Vec<usize>, tie: bool },
    LogSumExpAxis { m: usize, axis: usize },
    LogSumExpVec { v: usize },
    Dropout { x: usize, mask: Vec<f64> },
    Sum { x: usize },
    Scale { x: usize, c: f64 },
    GatherEntries { m: usize, idx: Vec<(usize, usize)> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Tensor,
}

/// Dynamic computation graph. Single-threaded; build, run [`Tape::backward`],
/// then scatter parameter gradients and drop the tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numeric-vs-analytic gradient comparison outcome.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    pub max_rel_error: f64,
    /// Set when a `max_over_axis` op had near-tied maxima; finite differences
    /// straddle the kink there and the comparison is unreliable.
    pub tie_flag: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { op, value, grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node holding the given data; gradients are tracked but stay on the
    /// tape (use [`Tape::param`] for store-backed parameters).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Copies a parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Param { id }, store.value(id).clone())
    }

    /// Copies selected rows of a matrix parameter (embedding lookup).
    pub fn gather_rows(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = store.value(id);
        if table.shape().len() != 2 {
            return Err(AutodiffError::ShapeMismatch(
                "gather_rows needs a matrix parameter".into(),
            ));
        }
        let (nrows, ncols) = (table.shape()[0], table.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for &r in rows {
            if r >= nrows {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "row {} out of range for table with {} rows",
                    r, nrows
                )));
            }
            data.extend_from_slice(&table.data()[r * ncols..(r + 1) * ncols]);
        }
        let value = Tensor::new(vec![rows.len(), ncols], data)?;
        Ok(self.push(
            Op::GatherRows {
                id,
                rows: rows.to_vec(),
            },
            value,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{}: {:?} vs {:?}",
                what,
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, value))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "hadamard")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Hadamard { a: a.0, b: b.0 }, value))
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (mv, vv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if mv.shape().len() != 2 || vv.shape().len() != 1 || mv.shape()[1] != vv.shape()[0] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "add_row: {:?} + {:?}",
                mv.shape(),
                vv.shape()
            )));
        }
        let (r, c) = (mv.shape()[0], mv.shape()[1]);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(mv.data()[i * c + j] + vv.data()[j]);
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(Op::AddRow { m: m.0, v: v.0 }, value))
    }

    /// Adds vector `v` to every column of matrix `m` (entry `(i,j)` gets `v[i]`).
    pub fn add_col(&mut self, m: Var, v: Var) -> Result<Var> {
        let (mv, vv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if mv.shape().len() != 2 || vv.shape().len() != 1 || mv.shape()[0] != vv.shape()[0] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "add_col: {:?} + {:?}",
                mv.shape(),
                vv.shape()
            )));
        }
        let (r, c) = (mv.shape()[0], mv.shape()[1]);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(mv.data()[i * c + j] + vv.data()[i]);
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(Op::AddCol { m: m.0, v: v.0 }, value))
    }

    /// Matrix product. Accepts `(m,k)x(k,n)`, `(m,k)x[k]` and `[k]x(k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (value, _) = matmul_forward(av, bv)?;
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, value))
    }

    /// Concatenates along `axis`. Vectors concatenate on axis 0; matrices on
    /// axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::ShapeMismatch("concat of nothing".into()));
        }
        let rank = self.nodes[parts[0].0].value.shape().len();
        for p in parts {
            if self.nodes[p.0].value.shape().len() != rank {
                return Err(AutodiffError::ShapeMismatch(
                    "concat parts have mixed ranks".into(),
                ));
            }
        }
        let value = match (rank, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for p in parts {
                    data.extend_from_slice(self.nodes[p.0].value.data());
                }
                Tensor::vector(data)
            }
            (2, 0) => {
                let c = self.nodes[parts[0].0].value.shape()[1];
                let mut rows = 0;
                let mut data = Vec::new();
                for p in parts {
                    let t = &self.nodes[p.0].value;
                    if t.shape()[1] != c {
                        return Err(AutodiffError::ShapeMismatch(
                            "concat axis0: column counts differ".into(),
                        ));
                    }
                    rows += t.shape()[0];
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, c], data)?
            }
            (2, 1) => {
                let r = self.nodes[parts[0].0].value.shape()[0];
                let mut cols = 0;
                for p in parts {
                    let t = &self.nodes[p.0].value;
                    if t.shape()[0] != r {
                        return Err(AutodiffError::ShapeMismatch(
                            "concat axis1: row counts differ".into(),
                        ));
                    }
                    cols += t.shape()[1];
                }
                let mut data = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for p in parts {
                        let t = &self.nodes[p.0].value;
                        let c = t.shape()[1];
                        data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
                    }
                }
                Tensor::new(vec![r, cols], data)?
            }
            _ => {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "concat: unsupported rank {} axis {}",
                    rank, axis
                )))
            }
        };
        Ok(self.push(
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            value,
        ))
    }

    /// Contiguous slice along `axis`.
    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        let value = match (t.shape().len(), axis) {
            (1, 0) => {
                if start + len > t.shape()[0] {
                    return Err(AutodiffError::ShapeMismatch("slice out of range".into()));
                }
                Tensor::vector(t.data()[start..start + len].to_vec())
            }
            (2, 0) => {
                let c = t.shape()[1];
                if start + len > t.shape()[0] {
                    return Err(AutodiffError::ShapeMismatch("slice out of range".into()));
                }
                Tensor::new(
                    vec![len, c],
                    t.data()[start * c..(start + len) * c].to_vec(),
                )?
            }
            (2, 1) => {
                let (r, c) = (t.shape()[0], t.shape()[1]);
                if start + len > c {
                    return Err(AutodiffError::ShapeMismatch("slice out of range".into()));
                }
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
                }
                Tensor::new(vec![r, len], data)?
            }
            _ => {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "slice: unsupported rank {} axis {}",
                    t.shape().len(),
                    axis
                )))
            }
        };
        Ok(self.push(
            Op::Slice {
                src: src.0,
                axis,
                start,
                len,
            },
            value,
        ))
    }

    /// Matrix `(r,c)` viewed as a vector of length `r*c` (row-major).
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 2 {
            return Err(AutodiffError::ShapeMismatch("flatten needs a matrix".into()));
        }
        let value = Tensor::vector(t.data().to_vec());
        Ok(self.push(Op::Flatten { x: x.0 }, value))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let s = self.slice(m, 0, i, 1)?;
        self.flatten(s)
    }

    /// Stacks equal-length vectors as matrix rows.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(AutodiffError::ShapeMismatch("stack_rows of nothing".into()));
        }
        let c = {
            let first = &self.nodes[rows[0].0].value;
            if first.shape().len() != 1 {
                return Err(AutodiffError::ShapeMismatch(
                    "stack_rows needs vectors".into(),
                ));
            }
            first.shape()[0]
        };
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            let t = &self.nodes[r.0].value;
            if t.shape() != [c] {
                return Err(AutodiffError::ShapeMismatch(
                    "stack_rows: vector lengths differ".into(),
                ));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(
            Op::StackRows {
                rows: rows.iter().map(|r| r.0).collect(),
            },
            value,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, mk: impl Fn(usize) -> Op) -> Var {
        let data = self.nodes[x.0].value.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data).unwrap();
        self.push(mk(x.0), value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |x| Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), |x| Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x| Op::Relu { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, |x| Op::Scale { x, c })
    }

    /// Column-wise (axis 0) or row-wise (axis 1) maximum of a matrix.
    /// Ties resolve to the first position; a recorded tie makes gradient
    /// checks unreliable (see [`GradCheckReport::tie_flag`]).
    pub fn max_over_axis(&mut self, m: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[m.0].value;
        if t.shape().len() != 2 || axis > 1 {
            return Err(AutodiffError::ShapeMismatch(
                "max_over_axis needs a matrix and axis 0|1".into(),
            ));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out_len = if axis == 0 { c } else { r };
        let mut best = vec![f64::NEG_INFINITY; out_len];
        let mut second = vec![f64::NEG_INFINITY; out_len];
        let mut argmax = vec![0usize; out_len];
        for i in 0..r {
            for j in 0..c {
                let (slot, pos) = if axis == 0 { (j, i) } else { (i, j) };
                let v = t.at(i, j);
                if v > best[slot] {
                    second[slot] = best[slot];
                    best[slot] = v;
                    argmax[slot] = pos;
                } else if v > second[slot] {
                    second[slot] = v;
                }
            }
        }
        let tie = best
            .iter()
            .zip(&second)
            .any(|(b, s)| s.is_finite() && (b - s).abs() < 1e-9);
        let value = Tensor::vector(best);
        Ok(self.push(
            Op::MaxAxis {
                m: m.0,
                axis,
                argmax,
                tie,
            },
            value,
        ))
    }

    /// log(sum(exp)) along an axis of a matrix, max-subtracted for overflow
    /// safety. Axis 0 reduces over rows (output length = columns).
    pub fn log_sum_exp_axis(&mut self, m: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[m.0].value;
        if t.shape().len() != 2 || axis > 1 {
            return Err(AutodiffError::ShapeMismatch(
                "log_sum_exp_axis needs a matrix and axis 0|1".into(),
            ));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out_len = if axis == 0 { c } else { r };
        let mut out = Vec::with_capacity(out_len);
        for slot in 0..out_len {
            let n = if axis == 0 { r } else { c };
            let get = |k: usize| {
                if axis == 0 {
                    t.at(k, slot)
                } else {
                    t.at(slot, k)
                }
            };
            out.push(log_sum_exp_iter((0..n).map(get)));
        }
        let value = Tensor::vector(out);
        Ok(self.push(Op::LogSumExpAxis { m: m.0, axis }, value))
    }

    /// log(sum(exp)) of a vector, producing a scalar.
    pub fn log_sum_exp(&mut self, v: Var) -> Result<Var> {
        let t = &self.nodes[v.0].value;
        if t.shape().len() != 1 {
            return Err(AutodiffError::ShapeMismatch(
                "log_sum_exp needs a vector".into(),
            ));
        }
        let value = Tensor::scalar(log_sum_exp_iter(t.data().iter().copied()));
        Ok(self.push(Op::LogSumExpVec { v: v.0 }, value))
    }

    /// Inverted dropout: keeps units with probability `1-rate` and scales the
    /// kept ones by `1/(1-rate)`. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "dropout rate {} outside [0,1)",
                rate
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let t = &self.nodes[x.0].value;
        let mask: Vec<f64> = (0..t.len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x: x.0, mask }, value))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::Sum { x: x.0 }, Tensor::scalar(s))
    }

    /// Selects matrix entries `(i,j)` into a vector.
    pub fn gather_entries(&mut self, m: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let t = &self.nodes[m.0].value;
        if t.shape().len() != 2 {
            return Err(AutodiffError::ShapeMismatch(
                "gather_entries needs a matrix".into(),
            ));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(idx.len());
        for &(i, j) in idx {
            if i >= r || j >= c {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "entry ({},{}) out of range for {}x{}",
                    i, j, r, c
                )));
            }
            data.push(t.at(i, j));
        }
        let value = Tensor::vector(data);
        Ok(self.push(
            Op::GatherEntries {
                m: m.0,
                idx: idx.to_vec(),
            },
            value,
        ))
    }

    /// Populates gradients of everything `loss` depends on. `loss` must be a
    /// scalar. Gradients accumulate: a node used twice receives both
    /// contributions.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(AutodiffError::NotScalar);
        }
        self.nodes[loss.0].grad.fill(1.0);
        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            backprop_node(node, before);
        }
        Ok(())
    }

    /// Scatters accumulated gradients of `Param`/`GatherRows` nodes into the
    /// store. Call after [`Tape::backward`].
    pub fn apply_param_grads(&mut self, store: &mut ParamStore) {
        for node in &self.nodes {
            match &node.op {
                Op::Param { id } => {
                    let g = store.get_mut(*id);
                    for (pg, ng) in g.grad.data_mut().iter_mut().zip(node.grad.data()) {
                        *pg += ng;
                    }
                }
                Op::GatherRows { id, rows } => {
                    let g = store.get_mut(*id);
                    let c = g.grad.shape()[1];
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            g.grad.data_mut()[r * c + j] += node.grad.data()[k * c + j];
                        }
                    }
                }
                _ => {}
            }
        }
    }

    fn has_max_tie(&self) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n.op, Op::MaxAxis { tie: true, .. }))
    }
}

fn log_sum_exp_iter(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    let s: f64 = vals.map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// Forward matmul plus a tag describing the vector/matrix case for backward.
fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<(Tensor, ())> {
    match (a.shape().len(), b.shape().len()) {
        (2, 2) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "matmul: ({},{}) x ({},{})",
                    m, k, k2, n
                )));
            }
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.at(i, p);
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[i * n + j] += av * b.at(p, j);
                    }
                }
            }
            Ok((Tensor::new(vec![m, n], out)?, ()))
        }
        (2, 1) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            if k != b.shape()[0] {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "matmul: ({},{}) x [{}]",
                    m,
                    k,
                    b.shape()[0]
                )));
            }
            let mut out = vec![0.0; m];
            for i in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.data()[p];
                }
                out[i] = s;
            }
            Ok((Tensor::vector(out), ()))
        }
        (1, 2) => {
            let k = a.shape()[0];
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "matmul: [{}] x ({},{})",
                    k, k2, n
                )));
            }
            let mut out = vec![0.0; n];
            for p in 0..k {
                let av = a.data()[p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[j] += av * b.at(p, j);
                }
            }
            Ok((Tensor::vector(out), ()))
        }
        _ => Err(AutodiffError::ShapeMismatch(
            "matmul: unsupported ranks".into(),
        )),
    }
}

/// Pushes one node's output gradient into its parents. `before` holds every
/// node with a smaller id, which by construction includes all parents.
fn backprop_node(node: &Node, before: &mut [Node]) {
    let g = node.grad.data();
    match &node.op {
        Op::Leaf | Op::Param { .. } | Op::GatherRows { .. } => {}
        Op::Add { a, b } => {
            for (i, gi) in g.iter().enumerate() {
                before[*a].grad.data_mut()[i] += gi;
                before[*b].grad.data_mut()[i] += gi;
            }
        }
        Op::Sub { a, b } => {
            for (i, gi) in g.iter().enumerate() {
                before[*a].grad.data_mut()[i] += gi;
                before[*b].grad.data_mut()[i] -= gi;
            }
        }
        Op::Hadamard { a, b } => {
            for i in 0..g.len() {
                let av = before[*a].value.data()[i];
                let bv = before[*b].value.data()[i];
                before[*a].grad.data_mut()[i] += g[i] * bv;
                before[*b].grad.data_mut()[i] += g[i] * av;
            }
        }
        Op::AddRow { m, v } => {
            let c = node.value.shape()[1];
            for (i, gi) in g.iter().enumerate() {
                before[*m].grad.data_mut()[i] += gi;
                before[*v].grad.data_mut()[i % c] += gi;
            }
        }
        Op::AddCol { m, v } => {
            let c = node.value.shape()[1];
            for (i, gi) in g.iter().enumerate() {
                before[*m].grad.data_mut()[i] += gi;
                before[*v].grad.data_mut()[i / c] += gi;
            }
        }
        Op::MatMul { a, b } => {
            let (ar, br) = (&before[*a].value.clone(), &before[*b].value.clone());
            match (ar.shape().len(), br.shape().len()) {
                (2, 2) => {
                    let (m, k) = (ar.shape()[0], ar.shape()[1]);
                    let n = br.shape()[1];
                    // dA = G . B^T ; dB = A^T . G
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * br.at(p, j);
                            }
                            before[*a].grad.data_mut()[i * k + p] += s;
                        }
                    }
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ar.at(i, p) * g[i * n + j];
                            }
                            before[*b].grad.data_mut()[p * n + j] += s;
                        }
                    }
                }
                (2, 1) => {
                    let (m, k) = (ar.shape()[0], ar.shape()[1]);
                    for i in 0..m {
                        for p in 0..k {
                            before[*a].grad.data_mut()[i * k + p] += g[i] * br.data()[p];
                            before[*b].grad.data_mut()[p] += ar.at(i, p) * g[i];
                        }
                    }
                }
                (1, 2) => {
                    let k = ar.shape()[0];
                    let n = br.shape()[1];
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += br.at(p, j) * g[j];
                            before[*b].grad.data_mut()[p * n + j] += ar.data()[p] * g[j];
                        }
                        before[*a].grad.data_mut()[p] += s;
                    }
                }
                _ => unreachable!("matmul rank checked at forward"),
            }
        }
        Op::Concat { parts, axis } => {
            let rank = node.value.shape().len();
            match (rank, axis) {
                (1, 0) | (2, 0) => {
                    let mut off = 0;
                    for p in parts {
                        let n = before[*p].value.len();
                        for i in 0..n {
                            before[*p].grad.data_mut()[i] += g[off + i];
                        }
                        off += n;
                    }
                }
                (2, 1) => {
                    let r = node.value.shape()[0];
                    let total_c = node.value.shape()[1];
                    let mut off = 0;
                    for p in parts {
                        let c = before[*p].value.shape()[1];
                        for i in 0..r {
                            for j in 0..c {
                                before[*p].grad.data_mut()[i * c + j] += g[i * total_c + off + j];
                            }
                        }
                        off += c;
                    }
                }
                _ => unreachable!("concat axis checked at forward"),
            }
        }
        Op::Slice {
            src,
            axis,
            start,
            len,
        } => {
            let st = before[*src].value.shape().to_vec();
            match (st.len(), axis) {
                (1, 0) => {
                    for i in 0..*len {
                        before[*src].grad.data_mut()[start + i] += g[i];
                    }
                }
                (2, 0) => {
                    let c = st[1];
                    for i in 0..*len {
                        for j in 0..c {
                            before[*src].grad.data_mut()[(start + i) * c + j] += g[i * c + j];
                        }
                    }
                }
                (2, 1) => {
                    let (r, c) = (st[0], st[1]);
                    for i in 0..r {
                        for j in 0..*len {
                            before[*src].grad.data_mut()[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
                _ => unreachable!("slice axis checked at forward"),
            }
        }
        Op::Flatten { x } => {
            for (i, gi) in g.iter().enumerate() {
                before[*x].grad.data_mut()[i] += gi;
            }
        }
        Op::StackRows { rows } => {
            let c = node.value.shape()[1];
            for (k, r) in rows.iter().enumerate() {
                for j in 0..c {
                    before[*r].grad.data_mut()[j] += g[k * c + j];
                }
            }
        }
        Op::Tanh { x } => {
            for i in 0..g.len() {
                let y = node.value.data()[i];
                before[*x].grad.data_mut()[i] += g[i] * (1.0 - y * y);
            }
        }
        Op::Sigmoid { x } => {
            for i in 0..g.len() {
                let y = node.value.data()[i];
                before[*x].grad.data_mut()[i] += g[i] * y * (1.0 - y);
            }
        }
        Op::Relu { x } => {
            for i in 0..g.len() {
                if node.value.data()[i] > 0.0 {
                    before[*x].grad.data_mut()[i] += g[i];
                }
            }
        }
        Op::Scale { x, c } => {
            for (i, gi) in g.iter().enumerate() {
                before[*x].grad.data_mut()[i] += c * gi;
            }
        }
        Op::MaxAxis { m, axis, argmax, .. } => {
            let c = before[*m].value.shape()[1];
            for (slot, &pos) in argmax.iter().enumerate() {
                let (i, j) = if *axis == 0 { (pos, slot) } else { (slot, pos) };
                before[*m].grad.data_mut()[i * c + j] += g[slot];
            }
        }
        Op::LogSumExpAxis { m, axis } => {
            let mv = before[*m].value.clone();
            let (r, c) = (mv.shape()[0], mv.shape()[1]);
            for i in 0..r {
                for j in 0..c {
                    let (slot, x) = if *axis == 0 { (j, mv.at(i, j)) } else { (i, mv.at(i, j)) };
                    let y = node.value.data()[slot];
                    before[*m].grad.data_mut()[i * c + j] += g[slot] * (x - y).exp();
                }
            }
        }
        Op::LogSumExpVec { v } => {
            let y = node.value.item();
            let n = before[*v].value.len();
            for i in 0..n {
                let x = before[*v].value.data()[i];
                before[*v].grad.data_mut()[i] += g[0] * (x - y).exp();
            }
        }
        Op::Dropout { x, mask } => {
            for i in 0..g.len() {
                before[*x].grad.data_mut()[i] += g[i] * mask[i];
            }
        }
        Op::Sum { x } => {
            let n = before[*x].value.len();
            for i in 0..n {
                before[*x].grad.data_mut()[i] += g[0];
            }
        }
        Op::GatherEntries { m, idx } => {
            let c = before[*m].value.shape()[1];
            for (k, &(i, j)) in idx.iter().enumerate() {
                before[*m].grad.data_mut()[i * c + j] += g[k];
            }
        }
    }
}

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences. `f` must be deterministic (dropout disabled) and scalar-valued.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    if !tape.value(y).is_scalar() {
        return Err(AutodiffError::NotScalar);
    }
    tape.backward(y)?;
    let analytic = tape.grad(xv).clone();
    let tie_flag = tape.has_max_tie();

    let mut max_rel = 0.0_f64;
    for i in 0..x.len() {
        let probe = |delta: f64| -> Result<f64> {
            let mut xt = x.clone();
            xt.data_mut()[i] += delta;
            let mut t = Tape::new();
            let v = t.leaf(xt);
            let out = f(&mut t, v)?;
            Ok(t.value(out).item())
        };
        let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (1e-8_f64).max(a.abs() + numeric.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        tie_flag,
    })
}

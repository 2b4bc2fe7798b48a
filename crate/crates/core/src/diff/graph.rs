use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the built-in set.
///
/// `backward` returns one entry per input; `None` means no gradient flows to
/// that input. Only inputs flagged in `needs` have to be filled in.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Reshape(Var),
    Take(Var, Arc<[usize]>),
    GroupSumRows(Var, Arc<[usize]>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RowNorm(Var),
    Custom(Arc<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Take(..) => "take",
            Op::GroupSumRows(..) => "group_sum_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::RowNorm(..) => "row_norm",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, which is a
/// topological order by construction; `backward` walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: HashMap<String, Var>,
    leaf_names: BTreeMap<usize, String>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("named", &self.leaf_names.len())
            .finish()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    names: BTreeMap<usize, String>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .find(|(_, n)| n.as_str() == name)
            .and_then(|(i, _)| self.grads[*i].as_ref())
    }

    /// Gradients of all named leaves that require grad. Leaves that received
    /// no gradient (unused in the output) get zeros.
    pub fn named(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, name) in &self.names {
            let node = &graph.nodes[*i];
            if !node.requires_grad {
                continue;
            }
            let g = self.grads[*i]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a (m×k) times b (n×k) transposed.
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// a (k×m) transposed times b (k×n).
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, av) in arow.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn row_len(op: &'static str, t: &Tensor, cols: usize) -> Result<()> {
    if t.len() != cols {
        return Err(shape_err(
            op,
            format!("row vector of {} values for {cols} columns", t.len()),
        ));
    }
    Ok(())
}

impl Graph {
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(node))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Untracked value.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Named input; a second call with the same name returns the first binding.
    pub fn input(&mut self, name: &str, value: Tensor, requires_grad: bool) -> Result<Var> {
        if let Some(v) = self.named.get(name) {
            return Ok(*v);
        }
        let v = self.push(value, Op::Leaf, requires_grad)?;
        self.named.insert(name.to_string(), v);
        self.leaf_names.insert(v.0, name.to_string());
        Ok(v)
    }

    /// Binds a trainable parameter from `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.named.get(name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))?
            .clone();
        self.input(name, t, true)
    }

    /// Copy of a value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = as_matrix("add_row", self.value(x))?;
        row_len("add_row", self.value(row), c)?;
        let rv = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for (d, b) in data[i * c..(i + 1) * c].iter_mut().zip(&rv) {
                *d += b;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(Tensor::new(vec![r, c], data)?, Op::AddRow(x, row), rg)
    }

    /// Multiplies every row of a matrix elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = as_matrix("mul_row", self.value(x))?;
        row_len("mul_row", self.value(row), c)?;
        let rv = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for (d, b) in data[i * c..(i + 1) * c].iter_mut().zip(&rv) {
                *d *= b;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(Tensor::new(vec![r, c], data)?, Op::MulRow(x, row), rg)
    }

    /// Scales row `i` of a matrix by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = as_matrix("scale_rows", self.value(x))?;
        if self.value(w).len() != r {
            return Err(shape_err(
                "scale_rows",
                format!("{} weights for {r} rows", self.value(w).len()),
            ));
        }
        let wv = self.value(w).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, s) in wv.iter().enumerate() {
            for d in &mut data[i * c..(i + 1) * c] {
                *d *= s;
            }
        }
        let rg = self.rg(&[x, w]);
        self.push(Tensor::new(vec![r, c], data)?, Op::ScaleRows(x, w), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.value(a))?;
        let (k2, n) = as_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul_nt", self.value(a))?;
        let (n, k2) = as_matrix("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let data = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMulNt(a, b), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Softmax over the last axis of a matrix (or over a whole vector).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = if t.shape().len() == 1 { t.len() } else { as_matrix("softmax_rows", t)?.1 };
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Gathers flattened elements: `out.flat[i] = x.flat[idx[i]]`.
    pub fn take(&mut self, x: Var, idx: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        let n: usize = shape.iter().product();
        if n != idx.len() {
            return Err(shape_err(
                "take",
                format!("{} indices for shape {shape:?}", idx.len()),
            ));
        }
        let mut data = Vec::with_capacity(n);
        for &i in idx.iter() {
            let v = *src.get(i).ok_or_else(|| {
                shape_err("take", format!("index {i} out of {} values", src.len()))
            })?;
            data.push(v);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape.to_vec(), data)?, Op::Take(x, idx), rg)
    }

    /// Selects whole rows of a matrix.
    pub fn take_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = as_matrix("take_rows", self.value(x))?;
        let mut idx = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(shape_err("take_rows", format!("row {i} of {r}")));
            }
            idx.extend(i * c..(i + 1) * c);
        }
        self.take(x, idx.into(), &[rows.len(), c])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = as_matrix("slice_cols", self.value(x))?;
        if start > end || end > c {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {c}")));
        }
        let w = end - start;
        let mut idx = Vec::with_capacity(r * w);
        for i in 0..r {
            idx.extend(i * c + start..i * c + end);
        }
        self.take(x, idx.into(), &[r, w])
    }

    /// Sums rows into `groups` buckets: `out[g] = Σ_{i: group[i]=g} x[i]`.
    pub fn group_sum_rows(&mut self, x: Var, group: Arc<[usize]>, groups: usize) -> Result<Var> {
        let (r, c) = as_matrix("group_sum_rows", self.value(x))?;
        if group.len() != r {
            return Err(shape_err(
                "group_sum_rows",
                format!("{} group ids for {r} rows", group.len()),
            ));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; groups * c];
        for (i, &g) in group.iter().enumerate() {
            if g >= groups {
                return Err(shape_err("group_sum_rows", format!("group {g} of {groups}")));
            }
            for (d, s) in data[g * c..(g + 1) * c].iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *d += s;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![groups, c], data)?, Op::GroupSumRows(x, group), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs"));
        }
        let c = as_matrix("concat_rows", self.value(parts[0]))?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c2) = as_matrix("concat_rows", self.value(*p))?;
            if c2 != c {
                return Err(shape_err("concat_rows", format!("{c2} columns vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs"));
        }
        let r = as_matrix("concat_cols", self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r2, c) = as_matrix("concat_cols", self.value(*p))?;
            if r2 != r {
                return Err(shape_err("concat_cols", format!("{r2} rows vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![r, total], data)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Euclidean norm of each row; `M×D → M`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix("row_norm", self.value(x))?;
        let src = self.value(x).data();
        let data = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![r], data)?, Op::RowNorm(x), rg)
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&vals)?;
        let rg = self.rg(inputs);
        self.push(out, Op::Custom(op, inputs.to_vec()), rg)
    }

    /// Dense layer `x·W + b` with `W` stored as `in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as output).
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if seed.shape() != out_node.value.shape() {
            return Err(shape_err(
                "backward",
                format!(
                    "seed {:?} for output {:?}",
                    seed.shape(),
                    out_node.value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            let contribs = self.node_backward(node, &g)?;
            grads[i] = Some(g);
            for (v, t) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(Gradients {
            grads,
            names: self.leaf_names.clone(),
        })
    }

    /// `backward` for a scalar output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        let seed = Tensor::full(self.value(output).shape(), 1.0);
        self.backward(output, &seed)
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let need = |v: &Var| self.nodes[v.0].requires_grad;
        let map = |t: &Tensor, f: &dyn Fn(usize, f64) -> f64| -> Tensor {
            let data = t.data().iter().enumerate().map(|(i, x)| f(i, *x)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
        };
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                if need(b) {
                    out.push((*b, map(g, &|_, x| -x)));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if need(a) {
                    out.push((*a, map(g, &|i, x| x * tb.data()[i])));
                }
                if need(b) {
                    out.push((*b, map(g, &|i, x| x * ta.data()[i])));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if need(a) {
                    out.push((*a, map(g, &|i, x| x / tb.data()[i])));
                }
                if need(b) {
                    out.push((
                        *b,
                        map(g, &|i, x| {
                            let d = tb.data()[i];
                            -x * ta.data()[i] / (d * d)
                        }),
                    ));
                }
            }
            Op::AddRow(x, row) => {
                out.push((*x, g.clone()));
                if need(row) {
                    let c = val(row).len();
                    let mut gr = vec![0.0; c];
                    for chunk in gd.chunks(c) {
                        for (a, b) in gr.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    out.push((*row, Tensor::new(val(row).shape().to_vec(), gr)?));
                }
            }
            Op::MulRow(x, row) => {
                let rv = val(row).data();
                let c = rv.len();
                if need(x) {
                    out.push((*x, map(g, &|i, v| v * rv[i % c])));
                }
                if need(row) {
                    let xd = val(x).data();
                    let mut gr = vec![0.0; c];
                    for (i, v) in gd.iter().enumerate() {
                        gr[i % c] += v * xd[i];
                    }
                    out.push((*row, Tensor::new(val(row).shape().to_vec(), gr)?));
                }
            }
            Op::ScaleRows(x, w) => {
                let wv = val(w).data();
                let c = val(x).cols();
                if need(x) {
                    out.push((*x, map(g, &|i, v| v * wv[i / c])));
                }
                if need(w) {
                    let xd = val(x).data();
                    let gw: Vec<f64> = (0..wv.len())
                        .map(|r| {
                            gd[r * c..(r + 1) * c]
                                .iter()
                                .zip(&xd[r * c..(r + 1) * c])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    out.push((*w, Tensor::new(val(w).shape().to_vec(), gw)?));
                }
            }
            Op::Scale(x, c) => out.push((*x, map(g, &|_, v| v * c))),
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix("matmul", val(a))?;
                let n = val(b).cols();
                if need(a) {
                    let d = matmul_nt_raw(gd, val(b).data(), m, n, k);
                    out.push((*a, Tensor::new(vec![m, k], d)?));
                }
                if need(b) {
                    let d = matmul_tn_raw(val(a).data(), gd, m, k, n);
                    out.push((*b, Tensor::new(vec![k, n], d)?));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = as_matrix("matmul_nt", val(a))?;
                let n = val(b).rows();
                if need(a) {
                    let d = matmul_raw(gd, val(b).data(), m, n, k);
                    out.push((*a, Tensor::new(vec![m, k], d)?));
                }
                if need(b) {
                    let d = matmul_tn_raw(gd, val(a).data(), m, n, k);
                    out.push((*b, Tensor::new(vec![n, k], d)?));
                }
            }
            Op::Relu(x) => {
                let xd = val(x).data();
                out.push((*x, map(g, &|i, v| if xd[i] > 0.0 { v } else { 0.0 })));
            }
            Op::Sigmoid(x) => {
                let yd = y.data();
                out.push((*x, map(g, &|i, v| v * yd[i] * (1.0 - yd[i]))));
            }
            Op::Tanh(x) => {
                let yd = y.data();
                out.push((*x, map(g, &|i, v| v * (1.0 - yd[i] * yd[i]))));
            }
            Op::Exp(x) => {
                let yd = y.data();
                out.push((*x, map(g, &|i, v| v * yd[i])));
            }
            Op::Log(x) => {
                let xd = val(x).data();
                out.push((*x, map(g, &|i, v| v / xd[i])));
            }
            Op::Abs(x) => {
                let xd = val(x).data();
                out.push((
                    *x,
                    map(g, &|i, v| {
                        if xd[i] > 0.0 {
                            v
                        } else if xd[i] < 0.0 {
                            -v
                        } else {
                            0.0
                        }
                    }),
                ));
            }
            Op::SoftmaxRows(x) => {
                let c = if y.shape().len() == 1 { y.len() } else { y.cols() };
                let yd = y.data();
                let mut d = vec![0.0; yd.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(yd.chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                out.push((*x, Tensor::new(y.shape().to_vec(), d)?));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(x).shape(), gd[0]))),
            Op::Reshape(x) => out.push((*x, g.clone().reshaped(val(x).shape())?)),
            Op::Take(x, idx) => {
                let mut d = vec![0.0; val(x).len()];
                for (gv, &i) in gd.iter().zip(idx.iter()) {
                    d[i] += gv;
                }
                out.push((*x, Tensor::new(val(x).shape().to_vec(), d)?));
            }
            Op::GroupSumRows(x, group) => {
                let c = y.cols();
                let mut d = Vec::with_capacity(group.len() * c);
                for &gi in group.iter() {
                    d.extend_from_slice(&gd[gi * c..(gi + 1) * c]);
                }
                out.push((*x, Tensor::new(val(x).shape().to_vec(), d)?));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(p).len();
                    if need(p) {
                        out.push((*p, Tensor::new(val(p).shape().to_vec(), gd[off..off + n].to_vec())?));
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let rows = y.rows();
                let mut off = 0;
                for p in parts {
                    let w = val(p).cols();
                    if need(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            d.extend_from_slice(&gd[i * total + off..i * total + off + w]);
                        }
                        out.push((*p, Tensor::new(val(p).shape().to_vec(), d)?));
                    }
                    off += w;
                }
            }
            Op::RowNorm(x) => {
                let c = val(x).cols();
                let xd = val(x).data();
                let yd = y.data();
                let d = xd
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let r = i / c;
                        if yd[r] > 0.0 {
                            gd[r] * v / yd[r]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                out.push((*x, Tensor::new(val(x).shape().to_vec(), d)?));
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| need(v)).collect();
                let gs = op.backward(&vals, y, g, &needs)?;
                for ((v, gi), n) in inputs.iter().zip(gs).zip(needs) {
                    if let (Some(gi), true) = (gi, n) {
                        if gi.shape() != val(v).shape() {
                            return Err(shape_err(
                                op.name(),
                                format!("gradient {:?} for input {:?}", gi.shape(), val(v).shape()),
                            ));
                        }
                        out.push((*v, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Builds a graph with `build`, evaluates it and runs the reverse sweep.
///
/// Returns the output value and gradients for every named leaf that requires
/// grad (parameters and flagged inputs).
pub fn eval_and_backward<F>(
    params: &ParamStore,
    inputs: &[(&str, Tensor, bool)],
    seed: &Tensor,
    build: F,
) -> Result<(Tensor, BTreeMap<String, Tensor>)>
where
    F: FnOnce(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|(name, t, rg)| g.input(name, t.clone(), *rg))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, params, &vars)?;
    let grads = g.backward(out, seed)?;
    Ok((g.value(out).clone(), grads.named(&g)))
}

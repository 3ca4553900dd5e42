//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the nodes in reverse creation order, which is always a valid
//! topological order. A graph is rebuilt for every forward pass.

use std::cell::RefCell;

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]: the differentiable tensor. Only valid for
/// the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Minimum(usize, usize),
    Concat(Vec<usize>),
    Gather { src: usize, index: Vec<usize> },
    Reshape(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        dims: AttnDims,
        weights: Vec<f64>,
    },
    SegmentMean { x: usize, segments: usize },
}

#[derive(Debug, Clone, Copy)]
struct AttnDims {
    batch: usize,
    q_len: usize,
    kv_len: usize,
    heads: usize,
    model: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.model / self.heads
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; vars the loss does not reach get zeros.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn for_vars(&self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| self.tensor(v)).collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|&v| nodes[v].requires_grad)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.borrow().len() {
            return Err(NnError::Usage(format!("var {} not in this graph", v.0)));
        }
        Ok(())
    }

    /// Constant input; receives no gradient.
    pub fn input(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers every tensor of `params` as a gradient-receiving leaf, in order.
    pub fn bind(&self, params: &ParamSet) -> Vec<Var> {
        params.tensors().iter().map(|t| self.variable(t.clone())).collect()
    }

    /// Registers `params` as constants.
    pub fn bind_frozen(&self, params: &ParamSet) -> Vec<Var> {
        params.tensors().iter().map(|t| self.input(t.clone())).collect()
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn dims2(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dims2()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Attention weights `[batch, heads, q_len, kv_len]` recorded by an
    /// attention node, if `v` is one.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        match &nodes[v.0].op {
            Op::Attention { dims, weights, .. } => Tensor::new(
                vec![dims.batch, dims.heads, dims.q_len, dims.kv_len],
                weights.clone(),
            )
            .ok(),
            _ => None,
        }
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let data = x.data().iter().map(|&v| f(v)).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.needs(&[a.0]);
        Ok(self.push(value, op, rg))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() {
                return Err(NnError::Shape(format!(
                    "{name}: shapes {:?} and {:?} differ",
                    x.shape(),
                    y.shape()
                )));
            }
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(value, op, rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (x, w) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = x.dims2();
            let (k2, n) = w.dims2();
            if k != k2 {
                return Err(NnError::Shape(format!(
                    "matmul: [{m}, {k}] x [{k2}, {n}]"
                )));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, x.data(), (k, 1), w.data(), (n, 1), &mut out, 0.0);
            Tensor::matrix(m, n, out)?
        };
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        self.check(a)?;
        self.check(bias)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (x, b) = (&nodes[a.0].value, &nodes[bias.0].value);
            let (_, n) = x.dims2();
            if b.len() != n {
                return Err(NnError::Shape(format!(
                    "add_row: row width {n}, bias length {}",
                    b.len()
                )));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.needs(&[a.0, bias.0]);
        Ok(self.push(value, Op::AddRow(a.0, bias.0), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul(a.0, b.0), "mul")
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, f64::min, Op::Minimum(a.0, b.0), "minimum")
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |v| v * c, Op::Scale(a.0, c))
    }

    pub fn offset(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |v| v + c, Op::Offset(a.0))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.max(0.0), Op::Relu(a.0))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(a, |v| v * v, Op::Square(a.0))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.nodes.borrow()[a.0].value.data().iter().sum();
        let rg = self.needs(&[a.0]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.0), rg))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let m = {
            let nodes = self.nodes.borrow();
            let d = nodes[a.0].value.data();
            d.iter().sum::<f64>() / d.len() as f64
        };
        let rg = self.needs(&[a.0]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a.0), rg))
    }

    /// Mean squared difference of two same-shape tensors.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NnError::Shape("concat of zero tensors".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let mut widths = Vec::with_capacity(parts.len());
            for &p in parts {
                let (r, c) = nodes[p.0].value.dims2();
                if r != rows {
                    return Err(NnError::Shape(format!(
                        "concat: row counts {rows} and {r} differ"
                    )));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (&p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.0].value.data()[r * w..(r + 1) * w]);
                }
            }
            Tensor::matrix(rows, total, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs(&ids);
        Ok(self.push(value, Op::Concat(ids), rg))
    }

    /// `out.flat[i] = src.flat[index[i]]`, reshaped to `shape`. Covers slicing,
    /// permutation, tiling, and embedding lookups.
    pub fn gather(&self, src: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        self.check(src)?;
        let value = {
            let nodes = self.nodes.borrow();
            let s = nodes[src.0].value.data();
            if let Some(&bad) = index.iter().find(|&&i| i >= s.len()) {
                return Err(NnError::Shape(format!(
                    "gather index {bad} out of range for {} values",
                    s.len()
                )));
            }
            Tensor::new(shape, index.iter().map(|&i| s[i]).collect())?
        };
        let rg = self.needs(&[src.0]);
        Ok(self.push(value, Op::Gather { src: src.0, index }, rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a);
        if len == 0 || start + len > cols {
            return Err(NnError::Shape(format!(
                "slice_cols {start}..{} of width {cols}",
                start + len
            )));
        }
        let index = (0..rows)
            .flat_map(|r| (start..start + len).map(move |c| r * cols + c))
            .collect();
        self.gather(a, index, vec![rows, len])
    }

    /// Rows selected by `rows` (repeats allowed).
    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let (_, cols) = self.dims2(a);
        let index = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
            .collect();
        self.gather(a, index, vec![rows.len(), cols])
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes.borrow()[a.0].value.clone().reshape(shape)?;
        let rg = self.needs(&[a.0]);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    /// Softmax over the last axis of every row.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let cols = x.cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(cols) {
                softmax_in_place(row)?;
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.needs(&[a.0]);
        Ok(self.push(value, Op::Softmax(a.0), rg))
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (rows, n) = t.dims2();
            let (g, b) = (nodes[gamma.0].value.data(), nodes[beta.0].value.data());
            if g.len() != n || b.len() != n {
                return Err(NnError::Shape(format!(
                    "layer_norm: width {n}, gain {} / shift {}",
                    g.len(),
                    b.len()
                )));
            }
            let mut out = vec![0.0; rows * n];
            let mut xhat = vec![0.0; rows * n];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &t.data()[r * n..(r + 1) * n];
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[r] = is;
                for c in 0..n {
                    let h = (row[c] - mu) * is;
                    xhat[r * n + c] = h;
                    out[r * n + c] = h * g[c] + b[c];
                }
            }
            (Tensor::new(t.shape().to_vec(), out)?, xhat, inv_std)
        };
        let rg = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Scaled dot-product multi-head attention core.
    ///
    /// `q` is `[batch * q_len, model]`, `k` and `v` are `[batch * kv_len, model]`;
    /// sequences of different batch entries never attend to each other. The
    /// output has the shape of `q` with heads concatenated along columns.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
    ) -> Result<Var> {
        self.check(q)?;
        self.check(k)?;
        self.check(v)?;
        let (value, weights, dims) = {
            let nodes = self.nodes.borrow();
            let (qt, kt, vt) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let (qr, model) = qt.dims2();
            let (kr, kc) = kt.dims2();
            if batch == 0 || heads == 0 {
                return Err(NnError::Shape("attention: zero batch or heads".into()));
            }
            if kt.dims2() != vt.dims2() || kc != model {
                return Err(NnError::Shape(format!(
                    "attention: q {:?}, k {:?}, v {:?}",
                    qt.shape(),
                    kt.shape(),
                    vt.shape()
                )));
            }
            if qr % batch != 0 || kr % batch != 0 || qr == 0 || kr == 0 {
                return Err(NnError::Shape(format!(
                    "attention: {qr} query rows / {kr} key rows not divisible by batch {batch}"
                )));
            }
            if model % heads != 0 {
                return Err(NnError::Shape(format!(
                    "attention: model dim {model} not divisible by {heads} heads"
                )));
            }
            let dims = AttnDims {
                batch,
                q_len: qr / batch,
                kv_len: kr / batch,
                heads,
                model,
            };
            let per_batch = par_map(batch, |b| attention_fwd(&dims, b, qt.data(), kt.data(), vt.data()));
            let mut out = Vec::with_capacity(qr * model);
            let mut weights = Vec::with_capacity(batch * heads * dims.q_len * dims.kv_len);
            for (o, w) in per_batch {
                out.extend_from_slice(&o);
                weights.extend_from_slice(&w);
            }
            (Tensor::matrix(qr, model, out)?, weights, dims)
        };
        let rg = self.needs(&[q.0, k.0, v.0]);
        Ok(self.push(
            value,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                dims,
                weights,
            },
            rg,
        ))
    }

    /// Mean over consecutive row groups: `[segments * len, d] -> [segments, d]`.
    pub fn segment_mean(&self, x: Var, segments: usize) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (rows, d) = t.dims2();
            if segments == 0 || rows % segments != 0 {
                return Err(NnError::Shape(format!(
                    "segment_mean: {rows} rows into {segments} segments"
                )));
            }
            let len = rows / segments;
            let mut out = vec![0.0; segments * d];
            for s in 0..segments {
                let o = &mut out[s * d..(s + 1) * d];
                for r in 0..len {
                    for (acc, v) in o.iter_mut().zip(t.row_slice(s * len + r)) {
                        *acc += v;
                    }
                }
                for acc in o.iter_mut() {
                    *acc /= len as f64;
                }
            }
            Tensor::matrix(segments, d, out)?
        };
        let rg = self.needs(&[x.0]);
        Ok(self.push(value, Op::SegmentMean { x: x.0, segments }, rg))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(NnError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop_node(&nodes, node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let shapes = nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = nodes[a].value.dims2();
            let (_, n) = nodes[b].value.dims2();
            if let Some(da) = slot(nodes, grads, a) {
                // dA += dC * B^T
                gemm(m, n, k, g, (n, 1), nodes[b].value.data(), (1, n), da, 1.0);
            }
            if let Some(db) = slot(nodes, grads, b) {
                // dB += A^T * dC
                gemm(k, m, n, nodes[a].value.data(), (1, k), g, (n, 1), db, 1.0);
            }
        }
        &Op::AddRow(a, bias) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, bias) {
                let n = db.len();
                for row in g.chunks(n) {
                    add_into(db, row);
                }
            }
        }
        &Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, b) {
                add_into(db, g);
            }
        }
        &Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, b) {
                for (d, gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            }
        }
        &Op::Mul(a, b) => {
            let (x, y) = (nodes[a].value.data(), nodes[b].value.data());
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(y) {
                    *d += gv * yv;
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for ((d, gv), xv) in db.iter_mut().zip(g).zip(x) {
                    *d += gv * xv;
                }
            }
        }
        &Op::Minimum(a, b) => {
            let (x, y) = (nodes[a].value.data(), nodes[b].value.data());
            if let Some(da) = slot(nodes, grads, a) {
                for i in 0..g.len() {
                    if x[i] <= y[i] {
                        da[i] += g[i];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for i in 0..g.len() {
                    if x[i] > y[i] {
                        db[i] += g[i];
                    }
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(da) = slot(nodes, grads, a) {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
        }
        &Op::Offset(a) | &Op::Reshape(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g);
            }
        }
        &Op::Tanh(a) => elementwise(nodes, grads, a, g, |i| 1.0 - out[i] * out[i]),
        &Op::Relu(a) => elementwise(nodes, grads, a, g, |i| if out[i] > 0.0 { 1.0 } else { 0.0 }),
        &Op::Sigmoid(a) => elementwise(nodes, grads, a, g, |i| out[i] * (1.0 - out[i])),
        &Op::Exp(a) => elementwise(nodes, grads, a, g, |i| out[i]),
        &Op::Square(a) => {
            let x = nodes[a].value.data();
            elementwise(nodes, grads, a, g, |i| 2.0 * x[i])
        }
        &Op::Sum(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        &Op::Mean(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                let s = g[0] / da.len() as f64;
                for d in da.iter_mut() {
                    *d += s;
                }
            }
        }
        Op::Concat(parts) => {
            let rows = node.value.rows();
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(dp) = slot(nodes, grads, p) {
                    for r in 0..rows {
                        add_into(
                            &mut dp[r * w..(r + 1) * w],
                            &g[r * total + offset..r * total + offset + w],
                        );
                    }
                }
                offset += w;
            }
        }
        Op::Gather { src, index } => {
            if let Some(ds) = slot(nodes, grads, *src) {
                for (&i, gv) in index.iter().zip(g) {
                    ds[i] += gv;
                }
            }
        }
        &Op::Softmax(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                let cols = node.value.cols();
                for ((d, y), gr) in da.chunks_mut(cols).zip(out.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        d[c] += y[c] * (gr[c] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let n = node.value.cols();
            let gam = nodes[*gamma].value.data();
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for (gr, h) in g.chunks(n).zip(xhat.chunks(n)) {
                    for c in 0..n {
                        dg[c] += gr[c] * h[c];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for gr in g.chunks(n) {
                    add_into(db, gr);
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut dh = vec![0.0; n];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let h = &xhat[r * n..(r + 1) * n];
                    for c in 0..n {
                        dh[c] = gr[c] * gam[c];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / n as f64;
                    let mean_dhh = dh.iter().zip(h).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                    let dxr = &mut dx[r * n..(r + 1) * n];
                    for c in 0..n {
                        dxr[c] += is * (dh[c] - mean_dh - h[c] * mean_dhh);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            dims,
            weights,
        } => {
            let (qd, kd, vd) = (nodes[*q].value.data(), nodes[*k].value.data(), nodes[*v].value.data());
            let parts = par_map(dims.batch, |b| attention_bwd(dims, b, qd, kd, vd, weights, g));
            let qs = dims.q_len * dims.model;
            let ks = dims.kv_len * dims.model;
            for (b, (dq, dk, dv)) in parts.iter().enumerate() {
                if let Some(s) = slot(nodes, grads, *q) {
                    add_into(&mut s[b * qs..(b + 1) * qs], dq);
                }
                if let Some(s) = slot(nodes, grads, *k) {
                    add_into(&mut s[b * ks..(b + 1) * ks], dk);
                }
                if let Some(s) = slot(nodes, grads, *v) {
                    add_into(&mut s[b * ks..(b + 1) * ks], dv);
                }
            }
        }
        &Op::SegmentMean { x, segments } => {
            if let Some(dx) = slot(nodes, grads, x) {
                let d = node.value.cols();
                let len = dx.len() / (segments * d);
                let inv = 1.0 / len as f64;
                for s in 0..segments {
                    let gs = &g[s * d..(s + 1) * d];
                    for r in 0..len {
                        let row = &mut dx[(s * len + r) * d..(s * len + r + 1) * d];
                        for c in 0..d {
                            row[c] += gs[c] * inv;
                        }
                    }
                }
            }
        }
    }
}

fn elementwise(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    g: &[f64],
    local: impl Fn(usize) -> f64,
) {
    if let Some(da) = slot(nodes, grads, a) {
        for (i, (d, gv)) in da.iter_mut().zip(g).enumerate() {
            *d += gv * local(i);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c = beta * c + a * b` with explicit (row, col) strides for `a` and `b`;
/// `c` is dense row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the assertion above bounds every index the strided views touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stable softmax of a slice, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    if row.iter().any(|v| v.is_nan()) {
        return Err(NnError::Numeric("softmax of NaN input".into()));
    }
    stable_softmax(row);
    Ok(())
}

fn stable_softmax(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Probability-simplex projection `exp(v_i - max) / sum`.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

fn attention_fwd(dims: &AttnDims, b: usize, q: &[f64], k: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let AttnDims {
        q_len,
        kv_len,
        heads,
        model,
        ..
    } = *dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let qb = &q[b * q_len * model..(b + 1) * q_len * model];
    let kb = &k[b * kv_len * model..(b + 1) * kv_len * model];
    let vb = &v[b * kv_len * model..(b + 1) * kv_len * model];
    let mut out = vec![0.0; q_len * model];
    let mut weights = vec![0.0; heads * q_len * kv_len];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..q_len {
            let qi = &qb[i * model + off..i * model + off + dh];
            let w = &mut weights[(h * q_len + i) * kv_len..(h * q_len + i + 1) * kv_len];
            for (j, wj) in w.iter_mut().enumerate() {
                let kj = &kb[j * model + off..j * model + off + dh];
                *wj = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
            }
            stable_softmax(w);
            let o = &mut out[i * model + off..i * model + off + dh];
            for (j, &wj) in w.iter().enumerate() {
                let vj = &vb[j * model + off..j * model + off + dh];
                for c in 0..dh {
                    o[c] += wj * vj[c];
                }
            }
        }
    }
    (out, weights)
}

#[allow(clippy::type_complexity)]
fn attention_bwd(
    dims: &AttnDims,
    b: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    weights: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnDims {
        q_len,
        kv_len,
        heads,
        model,
        ..
    } = *dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let qb = &q[b * q_len * model..(b + 1) * q_len * model];
    let kb = &k[b * kv_len * model..(b + 1) * kv_len * model];
    let vb = &v[b * kv_len * model..(b + 1) * kv_len * model];
    let gb = &g[b * q_len * model..(b + 1) * q_len * model];
    let wb = &weights[b * heads * q_len * kv_len..(b + 1) * heads * q_len * kv_len];
    let mut dq = vec![0.0; q_len * model];
    let mut dk = vec![0.0; kv_len * model];
    let mut dv = vec![0.0; kv_len * model];
    let mut da = vec![0.0; kv_len];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..q_len {
            let w = &wb[(h * q_len + i) * kv_len..(h * q_len + i + 1) * kv_len];
            let go = &gb[i * model + off..i * model + off + dh];
            for j in 0..kv_len {
                let vj = &vb[j * model + off..j * model + off + dh];
                da[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                let dvj = &mut dv[j * model + off..j * model + off + dh];
                for c in 0..dh {
                    dvj[c] += w[j] * go[c];
                }
            }
            let dot: f64 = w.iter().zip(&da).map(|(x, y)| x * y).sum();
            let qi = &qb[i * model + off..i * model + off + dh];
            for j in 0..kv_len {
                let ds = w[j] * (da[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &kb[j * model + off..j * model + off + dh];
                let dqi = &mut dq[i * model + off..i * model + off + dh];
                for c in 0..dh {
                    dqi[c] += ds * kj[c];
                }
                let dkj = &mut dk[j * model + off..j * model + off + dh];
                for c in 0..dh {
                    dkj[c] += ds * qi[c];
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(feature = "parallel")]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().with_min_len(8).map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

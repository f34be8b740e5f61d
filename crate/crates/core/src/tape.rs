//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node whose inputs were appended earlier, so a
//! single reverse sweep over node indices visits nodes in reverse
//! topological order.

use std::cell::RefCell;

use crate::error::{CalmError, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Rows with a norm below this are rejected by [`Var::cosine_rows`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    AddScalar(usize),
    Exp(usize),
    LogFloor(usize, f64),
    Tanh(usize),
    Relu(usize),
    Sum(usize),
    GroupMean(usize, usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    CosineRows(usize, usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an input tensor; it participates in gradients iff it
    /// requires them.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.detached(), Op::Leaf { param: None }, t.requires_grad())
    }

    /// Records a value that never receives gradients.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t.detached(), Op::Leaf { param: None }, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Records a parameter; gradients flow back into `store` on
    /// [`Tape::backward_into`].
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let t = store.get(id);
        self.push(
            t.detached(),
            Op::Leaf { param: Some(id) },
            t.requires_grad(),
        )
    }

    /// Gradient accumulated on a leaf by previous backward passes.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let grads = self.leaf_grads.borrow();
        let nodes = self.nodes.borrow();
        grads[v.id].as_ref().map(|g| {
            Tensor::new(nodes[v.id].value.shape().to_vec(), g.clone())
                .expect("gradient shape mirrors value")
        })
    }

    pub fn zero_grad(&self) {
        self.leaf_grads
            .borrow_mut()
            .iter_mut()
            .for_each(|g| *g = None);
    }

    /// Accumulates `d root / d leaf` into every gradient-requiring leaf.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        self.run_backward(root, None)
    }

    /// As [`Tape::backward`], additionally accumulating parameter gradients
    /// into the tensors of `store`.
    pub fn backward_into(&self, root: Var<'_>, store: &mut ParamStore) -> Result<()> {
        self.run_backward(root, Some(store))
    }

    fn run_backward(&self, root: Var<'_>, mut store: Option<&mut ParamStore>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if !root_val.is_scalar() {
            return Err(CalmError::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Leaf { param } => {
                    let slot = leaf_grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
                    add_into(slot, &g);
                    if let (Some(pid), Some(store)) = (param, store.as_deref_mut()) {
                        store.get_mut(pid).accumulate_grad(&g)?;
                    }
                }
                _ => backprop_node(&nodes, node, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match grads[id].as_mut() {
        Some(g) => add_into(g, &delta),
        None => grads[id] = Some(delta),
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2().expect("recorded nodes are rank 1 or 2")
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn row_norms(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            a[i * cols..(i + 1) * cols]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn softmax_row_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| &nodes[id].value;
    match node.op {
        Op::Leaf { .. } => unreachable!(),
        Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(grads, nodes, a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            accumulate(grads, nodes, b, g.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        Op::AddRow(a, bias) => {
            accumulate(grads, nodes, a, g.to_vec());
            let n = val(bias).numel();
            let mut db = vec![0.0; n];
            for row in g.chunks(n) {
                add_into(&mut db, row);
            }
            accumulate(grads, nodes, bias, db);
        }
        Op::MatMul(a, b) => {
            let (m, k) = dims(val(a));
            let (_, n) = dims(val(b));
            if nodes[a].requires_grad {
                let bt = transpose_raw(val(b).data(), k, n);
                accumulate(grads, nodes, a, matmul_raw(g, &bt, m, n, k));
            }
            if nodes[b].requires_grad {
                let at = transpose_raw(val(a).data(), m, k);
                accumulate(grads, nodes, b, matmul_raw(&at, g, k, m, n));
            }
        }
        Op::Transpose(a) => {
            let (m, n) = dims(val(a));
            accumulate(grads, nodes, a, transpose_raw(g, n, m));
        }
        Op::Scale(a, c) => accumulate(grads, nodes, a, g.iter().map(|v| v * c).collect()),
        Op::ScaleBy(a, s) => {
            let sv = val(s).item();
            accumulate(grads, nodes, a, g.iter().map(|v| v * sv).collect());
            let ds: f64 = g.iter().zip(val(a).data()).map(|(g, x)| g * x).sum();
            accumulate(grads, nodes, s, vec![ds]);
        }
        Op::AddScalar(a) => accumulate(grads, nodes, a, g.to_vec()),
        Op::Exp(a) => {
            let y = node.value.data();
            accumulate(grads, nodes, a, g.iter().zip(y).map(|(g, y)| g * y).collect());
        }
        Op::LogFloor(a, floor) => {
            let x = val(a).data();
            let d = g
                .iter()
                .zip(x)
                .map(|(g, &x)| if x > floor { g / x } else { 0.0 })
                .collect();
            accumulate(grads, nodes, a, d);
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            accumulate(
                grads,
                nodes,
                a,
                g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
            );
        }
        Op::Relu(a) => {
            let x = val(a).data();
            accumulate(
                grads,
                nodes,
                a,
                g.iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            );
        }
        Op::Sum(a) => accumulate(grads, nodes, a, vec![g[0]; val(a).numel()]),
        Op::GroupMean(a, group) => {
            let (_, c) = dims(val(a));
            let inv = 1.0 / group as f64;
            let mut d = Vec::with_capacity(val(a).numel());
            for out_row in g.chunks(c) {
                for _ in 0..group {
                    d.extend(out_row.iter().map(|v| v * inv));
                }
            }
            accumulate(grads, nodes, a, d);
        }
        Op::SoftmaxRows(a) => {
            let (_, c) = dims(&node.value);
            let y = node.value.data();
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = yv * (gv - dot);
                }
            }
            accumulate(grads, nodes, a, d);
        }
        Op::LogSoftmaxRows(a) => {
            let (_, c) = dims(&node.value);
            let y = node.value.data();
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                let total: f64 = gr.iter().sum();
                for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = gv - yv.exp() * total;
                }
            }
            accumulate(grads, nodes, a, d);
        }
        Op::CosineRows(a, b) => {
            let (m, dim) = dims(val(a));
            let (n, _) = dims(val(b));
            let (x, y) = (val(a).data(), val(b).data());
            let c = node.value.data();
            let nx = row_norms(x, m, dim);
            let ny = row_norms(y, n, dim);
            if nodes[a].requires_grad {
                let mut dx = vec![0.0; m * dim];
                for i in 0..m {
                    let xi = &x[i * dim..(i + 1) * dim];
                    let dxi = &mut dx[i * dim..(i + 1) * dim];
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let yj = &y[j * dim..(j + 1) * dim];
                        let s = gij / (nx[i] * ny[j]);
                        let t = gij * c[i * n + j] / (nx[i] * nx[i]);
                        for p in 0..dim {
                            dxi[p] += s * yj[p] - t * xi[p];
                        }
                    }
                }
                accumulate(grads, nodes, a, dx);
            }
            if nodes[b].requires_grad {
                let mut dy = vec![0.0; n * dim];
                for j in 0..n {
                    let yj = &y[j * dim..(j + 1) * dim];
                    let dyj = &mut dy[j * dim..(j + 1) * dim];
                    for i in 0..m {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let xi = &x[i * dim..(i + 1) * dim];
                        let s = gij / (nx[i] * ny[j]);
                        let t = gij * c[i * n + j] / (ny[j] * ny[j]);
                        for p in 0..dim {
                            dyj[p] += s * xi[p] - t * yj[p];
                        }
                    }
                }
                accumulate(grads, nodes, b, dy);
            }
        }
        Op::Reshape(a) => accumulate(grads, nodes, a, g.to_vec()),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id).item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.tape.value_of(self.id);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    fn zip_same(&self, other: &Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let a = self.tape.value_of(self.id);
        let b = self.tape.value_of(other.id);
        if a.shape() != b.shape() {
            return Err(CalmError::Dimension {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Adds a `1 × n` (or length-`n`) bias to every row of an `m × n` matrix.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(bias.id);
            let (m, n) = a.dims2()?;
            let (br, bc) = b.dims2()?;
            if br != 1 || bc != n {
                return Err(CalmError::Dimension {
                    op: "add_row",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n) {
                add_into(row, b.data());
            }
            Tensor::matrix(m, n, data)?
        };
        Ok(self.binary(bias, value, Op::AddRow(self.id, bias.id)))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 {
                return Err(CalmError::Dimension {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            Tensor::matrix(m, n, matmul_raw(a.data(), b.data(), m, k, n))?
        };
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let (m, n) = a.dims2()?;
            Tensor::matrix(n, m, transpose_raw(a.data(), m, n))?
        };
        Ok(self.unary(value, Op::Transpose(self.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    /// Multiplies every entry by a scalar node.
    pub fn scale_by(&self, s: &Var<'t>) -> Result<Var<'t>> {
        let sv = {
            let st = self.tape.value_of(s.id);
            if !st.is_scalar() {
                return Err(CalmError::Dimension {
                    op: "scale_by",
                    lhs: self.shape(),
                    rhs: st.shape().to_vec(),
                });
            }
            st.item()
        };
        let v = self.map(|x| x * sv);
        Ok(self.binary(s, v, Op::ScaleBy(self.id, s.id)))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// Natural log of `max(x, floor)`; zero gradient where the floor binds.
    pub fn log_floor(&self, floor: f64) -> Var<'t> {
        let v = self.map(|x| x.max(floor).ln());
        self.unary(v, Op::LogFloor(self.id, floor))
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = self.map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&self) -> Var<'t> {
        let total: f64 = self.tape.value_of(self.id).data().iter().sum();
        self.unary(Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.tape.value_of(self.id).numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Averages consecutive blocks of `group` rows: `(g·m) × n → m × n`.
    pub fn group_mean_rows(&self, group: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let (r, c) = a.dims2()?;
            if group == 0 || r == 0 {
                return Err(CalmError::EmptyInput("group_mean_rows"));
            }
            if r % group != 0 {
                return Err(CalmError::Dimension {
                    op: "group_mean_rows",
                    lhs: a.shape().to_vec(),
                    rhs: vec![group],
                });
            }
            let m = r / group;
            let inv = 1.0 / group as f64;
            let mut data = vec![0.0; m * c];
            for (i, row) in a.data().chunks(c).enumerate() {
                add_into(&mut data[(i / group) * c..(i / group + 1) * c], row);
            }
            data.iter_mut().for_each(|v| *v *= inv);
            Tensor::matrix(m, c, data)?
        };
        Ok(self.unary(value, Op::GroupMean(self.id, group)))
    }

    /// Mean over all rows: `m × n → 1 × n`.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let r = self.tape.value_of(self.id).dims2()?.0;
        self.group_mean_rows(r)
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.tape.value_of(self.id).all_finite() {
            Ok(())
        } else {
            Err(CalmError::NumericDomain(format!("{op}: non-finite input")))
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        self.check_finite("softmax_rows")?;
        let value = {
            let a = self.tape.value_of(self.id);
            let (r, c) = a.dims2()?;
            let mut out = vec![0.0; r * c];
            for (o, x) in out.chunks_mut(c).zip(a.data().chunks(c)) {
                softmax_row_into(x, o);
            }
            Tensor::matrix(r, c, out)?
        };
        Ok(self.unary(value, Op::SoftmaxRows(self.id)))
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        self.check_finite("log_softmax_rows")?;
        let value = {
            let a = self.tape.value_of(self.id);
            let (r, c) = a.dims2()?;
            let mut out = vec![0.0; r * c];
            for (o, x) in out.chunks_mut(c).zip(a.data().chunks(c)) {
                let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for (ov, xv) in o.iter_mut().zip(x) {
                    *ov = xv - lse;
                }
            }
            Tensor::matrix(r, c, out)?
        };
        Ok(self.unary(value, Op::LogSoftmaxRows(self.id)))
    }

    /// Pairwise cosine similarity between the rows of `self` (`m × d`) and
    /// `other` (`n × d`).
    pub fn cosine_rows(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let (m, d) = a.dims2()?;
            let (n, d2) = b.dims2()?;
            if d != d2 {
                return Err(CalmError::Dimension {
                    op: "cosine_rows",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            if !a.all_finite() || !b.all_finite() {
                return Err(CalmError::NumericDomain("cosine_rows: non-finite input".into()));
            }
            let na = row_norms(a.data(), m, d);
            let nb = row_norms(b.data(), n, d);
            for (row, &norm) in na.iter().chain(nb.iter()).enumerate() {
                if norm < MIN_NORM {
                    return Err(CalmError::DegenerateVector {
                        op: "cosine_rows",
                        row: if row < m { row } else { row - m },
                        norm,
                    });
                }
            }
            let bt = transpose_raw(b.data(), n, d);
            let mut dots = matmul_raw(a.data(), &bt, m, d, n);
            for i in 0..m {
                for j in 0..n {
                    let v = dots[i * n + j] / (na[i] * nb[j]);
                    dots[i * n + j] = v.clamp(-1.0, 1.0);
                }
            }
            Tensor::matrix(m, n, dots)?
        };
        Ok(self.binary(other, value, Op::CosineRows(self.id, other.id)))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let v = self.tape.value_of(self.id).reshape(shape)?.detached();
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}

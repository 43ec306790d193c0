//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node inputs always precede
//! the node itself, so a single reverse sweep visits each node once.
//! [`Tape::backward`] seeds the scalar loss with 1 and returns a [`Gradients`]
//! map covering every node that depends on a gradient-carrying leaf.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_into, softmax_in_place, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Transpose(Var),
    Sum(Var),
    MeanRows(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward evaluation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Dropout behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose parameters carry no gradient; used for decoding.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Bind a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let rg = self.grad_enabled;
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf,
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(dim_err(format!(
                "matmul shapes {:?} and {:?} do not agree",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(dim_err(format!("transpose needs rank 2, got {:?}", xv.shape())));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let d = xv.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), rg))
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a `[1 × n]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(dim_err(format!(
                "bias of {} values cannot broadcast over rows of {:?}",
                bv.len(),
                xv.shape()
            )));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    // ---- normalisation ----

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the last dimension. Entries with `mask[i] == true` act as
    /// `-inf` logits and come out exactly 0; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if n == 0 {
            return Err(dim_err("softmax over an empty last dimension"));
        }
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(dim_err(format!(
                    "mask of {} entries for tensor {:?}",
                    m.len(),
                    xv.shape()
                )));
            }
        }
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            match mask {
                None => softmax_in_place(row),
                Some(m) => {
                    let mrow = &m[r * n..(r + 1) * n];
                    if mrow.iter().all(|&b| b) {
                        row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let max = row
                        .iter()
                        .zip(mrow)
                        .filter(|(_, &b)| !b)
                        .map(|(&v, _)| v)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (v, &b) in row.iter_mut().zip(mrow) {
                        *v = if b { 0.0 } else { (*v - max).exp() };
                        sum += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= sum);
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Per-slice normalisation with population variance; `eps` sits inside
    /// the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != n || bv.len() != n {
            return Err(dim_err(format!(
                "layer_norm gamma/beta of {}/{} values for last dimension {n}",
                gv.len(),
                bv.len()
            )));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- structure ----

    /// Concatenate along the last dimension; leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat of zero tensors"))?;
        let lead: Vec<usize> = {
            let s = self.value(*first).shape();
            s[..s.len() - 1].to_vec()
        };
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(dim_err(format!(
                    "concat leading shapes differ: {:?} vs {:?}",
                    self.value(*first).shape(),
                    s
                )));
            }
        }
        let rows = self.value(*first).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Stack 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat of zero tensors"))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(dim_err(format!(
                    "row concat column counts differ: {} vs {}",
                    cols,
                    v.cols()
                )));
            }
            out.extend_from_slice(v.data());
        }
        let rows = out.len() / cols.max(1);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if start + len > n {
            return Err(dim_err(format!(
                "column slice {start}..{} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, n) = (xv.rows(), xv.cols());
        if start + len > rows {
            return Err(dim_err(format!(
                "row slice {start}..{} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let out = xv.data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![len, n], out)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Embedding lookup: row `i` of the result is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(dim_err(format!("gather table must be rank 2, got {:?}", tv.shape())));
        }
        let (v, e) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, size: v });
            }
            out.extend_from_slice(tv.row_slice(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), e], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over rows: `[m × n] -> [1 × n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if m == 0 {
            return Err(dim_err("mean over zero rows"));
        }
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(xv.row_slice(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::row(out), Op::MeanRows(x), rg))
    }

    /// Sum over rows of `-log softmax(logits[t])[targets[t]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, c) = (lv.rows(), lv.cols());
        if targets.len() != m {
            return Err(dim_err(format!(
                "{} targets for {m} rows of logits",
                targets.len()
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (t, row) in probs.chunks_mut(c).enumerate() {
            let y = targets[t];
            if y >= c {
                return Err(Error::Vocabulary { id: y, size: c });
            }
            let logp = crate::tensor::log_softmax(row);
            loss -= logp[y];
            for (p, l) in row.iter_mut().zip(logp) {
                *p = l.exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; eval mode is identity.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    // ---- reverse sweep ----

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = node.value.as_ref();
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                self.acc(grads, *a, |da| {
                    for r in 0..m {
                        let grow = &gd[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for r in 0..m {
                        let grow = &gd[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = av.data()[r * k + p];
                            if a_rp == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += a_rp * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, |d| add_into(d, gd));
                let n = out.cols();
                self.acc(grads, *b, |d| {
                    for row in gd.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((x, gv), y) in d.iter_mut().zip(gd).zip(bv) {
                        *x += gv * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((x, gv), y) in d.iter_mut().zip(gd).zip(av) {
                        *x += gv * y;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(a, b)| *a += s * b));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((a, b), v) in d.iter_mut().zip(gd).zip(xv) {
                        if *v > 0.0 {
                            *a += b;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, |d| {
                    for ((a, b), y) in d.iter_mut().zip(gd).zip(out.data()) {
                        *a += b * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => {
                self.acc(grads, *x, |d| {
                    for ((a, b), y) in d.iter_mut().zip(gd).zip(out.data()) {
                        *a += b * (1.0 - y * y);
                    }
                });
            }
            Op::Softmax(x) => {
                let n = out.cols();
                self.acc(grads, *x, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(gd.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gam = self.value(*gamma).data();
                self.acc(grads, *x, |d| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &gd[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let nf = n as f64;
                        for j in 0..n {
                            d[r * n + j] += is / nf * (nf * dh[j] - s1 - hrow[j] * s2);
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for (grow, hrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for ((dv, gv), hv) in d.iter_mut().zip(grow).zip(hrow) {
                            *dv += gv * hv;
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for grow in gd.chunks(n) {
                        add_into(d, grow);
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    self.acc(grads, *p, |d| {
                        for r in 0..rows {
                            add_into(&mut d[r * c..(r + 1) * c], &gd[r * total + off..r * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.acc(grads, *p, |d| add_into(d, &gd[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let len = out.cols();
                self.acc(grads, *x, |d| {
                    for (r, grow) in gd.chunks(len).enumerate() {
                        add_into(&mut d[r * n + start..r * n + start + len], grow);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = out.cols();
                self.acc(grads, *x, |d| add_into(&mut d[start * n..start * n + gd.len()], gd));
            }
            Op::Gather { table, ids } => {
                let e = out.cols();
                self.acc(grads, *table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * e..(id + 1) * e], &gd[r * e..(r + 1) * e]);
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                self.acc(grads, *x, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[j * m + i] += gd[i * n + j];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::MeanRows(x) => {
                let m = self.value(*x).rows() as f64;
                let n = out.cols();
                self.acc(grads, *x, |d| {
                    for row in d.chunks_mut(n) {
                        for (v, gv) in row.iter_mut().zip(gd) {
                            *v += gv / m;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, |d| {
                    for ((a, b), m) in d.iter_mut().zip(gd).zip(mask) {
                        *a += b * m;
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |d| add_into(d, gd));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let g0 = gd[0];
                let c = self.value(*logits).cols();
                self.acc(grads, *logits, |d| {
                    for (t, &y) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[t * c + j] += g0 * (probs[t * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like it when the loss does not reach it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

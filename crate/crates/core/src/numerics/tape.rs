//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. [`Tape::gradients`] walks the nodes in reverse recording order;
//! [`Tape::backward`] additionally folds the gradients of parameter leaves
//! into a [`ParamStore`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{self, Tensor};
use super::{NumericsError, ParamId, ParamStore};

const LAYER_NORM_EPS: f64 = 1e-5;
const PROB_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Prelu(usize, usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        rstd: Vec<f64>,
    },
    MeanRows(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    SumAll(usize),
    Bce {
        s: usize,
        y: Vec<f64>,
    },
    Margin {
        s: usize,
        pairs: Vec<(usize, usize)>,
        delta: f64,
    },
    CrossEntropyBag {
        logits: usize,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_leaves: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of one scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a parameter; repeated calls reuse the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_leaves.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.push(store.value(id).clone(), Op::Leaf);
        self.param_leaves.borrow_mut().insert(id, var.id);
        var
    }

    /// Reverse pass from a `1 × 1` loss.
    pub fn gradients(&self, loss: Var<'_>) -> Result<Gradients, NumericsError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::filled(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds `∂loss/∂value` into the `grad` of every reachable parameter.
    ///
    /// Fails when no parameter is reachable from `loss`.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<(), NumericsError> {
        let grads = self.gradients(loss)?;
        let leaves = self.param_leaves.borrow();
        let mut reached = 0;
        for (&pid, &node) in leaves.iter() {
            if let Some(g) = grads.grads.get(node).and_then(Option::as_ref) {
                let p = store.get_mut(pid);
                for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
                reached += 1;
            }
        }
        if reached == 0 {
            return Err(NumericsError::Usage("loss is detached from every parameter".into()));
        }
        Ok(())
    }
}

fn add_into(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let cols = g.cols();
    let mut out = vec![0.0; cols];
    for row in g.data().chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumericsError> {
    let node = &nodes[id];
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            add_into(grads, *a, tensor::matmul_nt(g, val(*b))?);
            add_into(grads, *b, tensor::matmul_tn(val(*a), g)?);
        }
        Op::MatMulNt(a, b) => {
            // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
            add_into(grads, *a, tensor::matmul(g, val(*b))?);
            add_into(grads, *b, tensor::matmul_tn(g, val(*a))?);
        }
        Op::Add(a, b) => {
            add_into(grads, *a, g.clone());
            add_into(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            add_into(grads, *a, g.clone());
            add_into(grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga: Vec<f64> = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
            let gb: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
            add_into(grads, *a, Tensor::new(g.shape().to_vec(), ga)?);
            add_into(grads, *b, Tensor::new(g.shape().to_vec(), gb)?);
        }
        Op::AddRow(a, bias) => {
            add_into(grads, *a, g.clone());
            add_into(grads, *bias, column_sums(g));
        }
        Op::MulRow(a, gain) => {
            let (av, gv) = (val(*a), val(*gain));
            let cols = g.cols();
            let mut ga = g.clone();
            let mut gg = vec![0.0; cols];
            for (r, row) in ga.data_mut().chunks_mut(cols).enumerate() {
                for c in 0..cols {
                    gg[c] += row[c] * av.data()[r * cols + c];
                    row[c] *= gv.data()[c];
                }
            }
            add_into(grads, *a, ga);
            add_into(grads, *gain, Tensor::row_vector(gg));
        }
        Op::Scale(a, f) => add_into(grads, *a, g.map(|v| v * f)),
        Op::Gelu(a) => {
            let x = val(*a);
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(gv, &xv)| gv * tensor::gelu_grad_scalar(xv))
                .collect();
            add_into(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
        }
        Op::Prelu(a, slope) => {
            let x = val(*a);
            let s = val(*slope).data()[0];
            let mut ds = 0.0;
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(gv, &xv)| {
                    if xv > 0.0 {
                        *gv
                    } else {
                        ds += gv * xv;
                        gv * s
                    }
                })
                .collect();
            add_into(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            add_into(grads, *slope, Tensor::scalar(ds));
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(gv, yv)| gv * yv * (1.0 - yv))
                .collect();
            add_into(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let cols = y.cols();
            let mut d = vec![0.0; y.len()];
            for ((drow, yrow), grow) in d.chunks_mut(cols).zip(y.data().chunks(cols)).zip(g.data().chunks(cols)) {
                let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    drow[c] = yrow[c] * (grow[c] - dot);
                }
            }
            add_into(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
        }
        Op::LayerNorm { x, rstd } => {
            let xhat = &node.value;
            let cols = xhat.cols();
            let n = cols as f64;
            let mut d = vec![0.0; xhat.len()];
            for (r, drow) in d.chunks_mut(cols).enumerate() {
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let hr = &xhat.data()[r * cols..(r + 1) * cols];
                let mean_g = gr.iter().sum::<f64>() / n;
                let mean_gh = gr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n;
                for c in 0..cols {
                    drow[c] = rstd[r] * (gr[c] - mean_g - hr[c] * mean_gh);
                }
            }
            add_into(grads, *x, Tensor::new(xhat.shape().to_vec(), d)?);
        }
        Op::MeanRows(a) => {
            let rows = val(*a).rows();
            let cols = g.cols();
            let mut d = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                d.extend(g.data().iter().map(|v| v / rows as f64));
            }
            add_into(grads, *a, Tensor::matrix(rows, cols, d)?);
        }
        Op::ConcatRows(parts) => {
            let cols = g.cols();
            let mut offset = 0;
            for &p in parts {
                let rows = val(p).rows();
                let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                add_into(grads, p, Tensor::matrix(rows, cols, slice)?);
                offset += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = g.rows();
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                let mut d = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                }
                add_into(grads, p, Tensor::matrix(rows, w, d)?);
                offset += w;
            }
        }
        Op::SliceCols(a, start) => {
            let src = val(*a);
            let (rows, total, w) = (src.rows(), src.cols(), g.cols());
            let mut d = vec![0.0; rows * total];
            for r in 0..rows {
                d[r * total + start..r * total + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            add_into(grads, *a, Tensor::matrix(rows, total, d)?);
        }
        Op::SliceRows(a, start) => {
            let src = val(*a);
            let cols = src.cols();
            let mut d = vec![0.0; src.len()];
            d[start * cols..start * cols + g.len()].copy_from_slice(g.data());
            add_into(grads, *a, Tensor::new(src.shape().to_vec(), d)?);
        }
        Op::SumAll(a) => {
            let gv = g.data()[0];
            add_into(grads, *a, Tensor::filled(val(*a).shape(), gv));
        }
        Op::Bce { s, y } => {
            let sv = val(*s);
            let n = y.len() as f64;
            let gv = g.data()[0];
            let d: Vec<f64> = sv
                .data()
                .iter()
                .zip(y)
                .map(|(&p, &t)| {
                    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                    gv * (-t / p + (1.0 - t) / (1.0 - p)) / n
                })
                .collect();
            add_into(grads, *s, Tensor::new(sv.shape().to_vec(), d)?);
        }
        Op::Margin { s, pairs, delta } => {
            let sv = val(*s);
            let n = pairs.len() as f64;
            let gv = g.data()[0];
            let mut d = vec![0.0; sv.len()];
            for &(p, q) in pairs {
                if delta - (sv.data()[p] - sv.data()[q]) > 0.0 {
                    d[p] -= gv / n;
                    d[q] += gv / n;
                }
            }
            add_into(grads, *s, Tensor::new(sv.shape().to_vec(), d)?);
        }
        Op::CrossEntropyBag { logits, targets } => {
            let z = val(*logits);
            let probs = tensor::softmax_rows(z)?;
            let n = targets.len() as f64;
            let gv = g.data()[0];
            let mut d: Vec<f64> = probs.data().iter().map(|p| gv * p).collect();
            for &t in targets {
                d[t] -= gv / n;
            }
            add_into(grads, *logits, Tensor::new(z.shape().to_vec(), d)?);
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Snapshot of the current value.
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, out: Tensor, op: Op, name: &'static str) -> Result<Var<'t>, NumericsError> {
        Ok(self.tape.push(out.ensure_finite(name)?, op))
    }

    fn same_shape(self, other: Var<'t>, what: &str) -> Result<(Rc<Tensor>, Rc<Tensor>), NumericsError> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(NumericsError::Shape(format!(
                "{what}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok((a, b))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let out = tensor::matmul(&self.value(), &other.value())?;
        self.unary(out, Op::MatMul(self.id, other.id), "matmul")
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let out = tensor::matmul_nt(&self.value(), &other.value())?;
        self.unary(out, Op::MatMulNt(self.id, other.id), "matmul_nt")
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = self.same_shape(other, "add")?;
        let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.unary(Tensor::new(a.shape().to_vec(), d)?, Op::Add(self.id, other.id), "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = self.same_shape(other, "sub")?;
        let d = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.unary(Tensor::new(a.shape().to_vec(), d)?, Op::Sub(self.id, other.id), "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = self.same_shape(other, "mul")?;
        let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.unary(Tensor::new(a.shape().to_vec(), d)?, Op::Mul(self.id, other.id), "mul")
    }

    fn row_operand(self, row: Var<'t>, what: &str) -> Result<(Rc<Tensor>, Rc<Tensor>), NumericsError> {
        let (a, r) = (self.value(), row.value());
        if r.shape() != [1, a.cols()] {
            return Err(NumericsError::Shape(format!(
                "{what}: row operand {:?} does not match width {}",
                r.shape(),
                a.cols()
            )));
        }
        Ok((a, r))
    }

    /// Adds a `1 × n` row to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = self.row_operand(bias, "add_row")?;
        let cols = a.cols();
        let d = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % cols])
            .collect();
        self.unary(
            Tensor::new(a.shape().to_vec(), d)?,
            Op::AddRow(self.id, bias.id),
            "add_row",
        )
    }

    /// Multiplies every row elementwise by a `1 × n` row.
    pub fn mul_row(self, gain: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = self.row_operand(gain, "mul_row")?;
        let cols = a.cols();
        let d = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * b.data()[i % cols])
            .collect();
        self.unary(
            Tensor::new(a.shape().to_vec(), d)?,
            Op::MulRow(self.id, gain.id),
            "mul_row",
        )
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>, NumericsError> {
        let out = self.value().map(|v| v * factor);
        self.unary(out, Op::Scale(self.id, factor), "scale")
    }

    pub fn gelu(self) -> Result<Var<'t>, NumericsError> {
        let out = tensor::gelu(&self.value());
        self.unary(out, Op::Gelu(self.id), "gelu")
    }

    /// PReLU with a learnable `1 × 1` slope.
    pub fn prelu(self, slope: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let s = slope.value();
        if s.len() != 1 {
            return Err(NumericsError::Shape("prelu slope must be a scalar".into()));
        }
        let out = tensor::prelu(&self.value(), s.data()[0]);
        self.unary(out, Op::Prelu(self.id, slope.id), "prelu")
    }

    pub fn sigmoid(self) -> Result<Var<'t>, NumericsError> {
        let out = tensor::sigmoid(&self.value());
        self.unary(out, Op::Sigmoid(self.id), "sigmoid")
    }

    pub fn softmax_rows(self) -> Result<Var<'t>, NumericsError> {
        let out = tensor::softmax_rows(&self.value())?;
        self.unary(out, Op::SoftmaxRows(self.id), "softmax_rows")
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(self) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let cols = x.cols();
        let mut out = x.data().to_vec();
        let mut rstd = Vec::with_capacity(x.rows());
        for row in out.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.unary(out, Op::LayerNorm { x: self.id, rstd }, "layer_norm")
    }

    /// Mean over rows: `r × c → 1 × c`.
    pub fn mean_rows(self) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let mut out = vec![0.0; x.cols()];
        for row in x.data().chunks(x.cols()) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = x.rows() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        self.unary(Tensor::row_vector(out), Op::MeanRows(self.id), "mean_rows")
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Shape("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_rows(&refs)?;
        first.unary(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), "concat_rows")
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Shape("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let rows = values[0].rows();
        if values.iter().any(|v| v.rows() != rows) {
            return Err(NumericsError::Shape("concat_cols height mismatch".into()));
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut d = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                d.extend_from_slice(v.row(r));
            }
        }
        let out = Tensor::matrix(rows, total, d)?;
        first.unary(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), "concat_cols")
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        if start >= end || end > x.cols() {
            return Err(NumericsError::Shape(format!(
                "slice_cols {start}..{end} out of width {}",
                x.cols()
            )));
        }
        let mut d = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            d.extend_from_slice(&x.row(r)[start..end]);
        }
        let out = Tensor::matrix(x.rows(), end - start, d)?;
        self.unary(out, Op::SliceCols(self.id, start), "slice_cols")
    }

    /// Rows `start..end`.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        if start >= end || end > x.rows() {
            return Err(NumericsError::Shape(format!(
                "slice_rows {start}..{end} out of height {}",
                x.rows()
            )));
        }
        let cols = x.cols();
        let out = Tensor::matrix(end - start, cols, x.data()[start * cols..end * cols].to_vec())?;
        self.unary(out, Op::SliceRows(self.id, start), "slice_rows")
    }

    pub fn sum_all(self) -> Result<Var<'t>, NumericsError> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id), "sum_all")
    }

    /// Mean binary cross-entropy of probabilities `self` against 0/1 labels.
    pub fn bce(self, labels: &[f64]) -> Result<Var<'t>, NumericsError> {
        let s = self.value();
        if s.len() != labels.len() || labels.is_empty() {
            return Err(NumericsError::Shape(format!(
                "bce: {} scores vs {} labels",
                s.len(),
                labels.len()
            )));
        }
        let loss = -s
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &t)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                t * p.ln() + (1.0 - t) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / labels.len() as f64;
        let op = Op::Bce {
            s: self.id,
            y: labels.to_vec(),
        };
        self.unary(Tensor::scalar(loss), op, "bce")
    }

    /// `mean over pairs (p, n) of max(0, delta − (s[p] − s[n]))` on the
    /// flattened entries of `self`.
    pub fn margin_ranking(self, pairs: &[(usize, usize)], delta: f64) -> Result<Var<'t>, NumericsError> {
        let s = self.value();
        if pairs.is_empty() {
            return Err(NumericsError::Usage("margin loss without pairs".into()));
        }
        if pairs.iter().any(|&(p, n)| p >= s.len() || n >= s.len()) {
            return Err(NumericsError::Shape("margin pair index out of range".into()));
        }
        let loss = pairs
            .iter()
            .map(|&(p, n)| (delta - (s.data()[p] - s.data()[n])).max(0.0))
            .sum::<f64>()
            / pairs.len() as f64;
        let op = Op::Margin {
            s: self.id,
            pairs: pairs.to_vec(),
            delta,
        };
        self.unary(Tensor::scalar(loss), op, "margin_ranking")
    }

    /// Mean negative log-likelihood of `targets` under `softmax(self)`, where
    /// `self` is a single `1 × vocab` row shared by every target position.
    pub fn cross_entropy_bag(self, targets: &[usize]) -> Result<Var<'t>, NumericsError> {
        let z = self.value();
        if z.rows() != 1 {
            return Err(NumericsError::Shape("cross_entropy_bag expects one logit row".into()));
        }
        if targets.is_empty() {
            return Err(NumericsError::Usage("cross entropy over zero targets".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= z.cols()) {
            return Err(NumericsError::Shape(format!(
                "target {t} outside vocabulary {}",
                z.cols()
            )));
        }
        let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = targets.iter().map(|&t| lse - z.data()[t]).sum::<f64>() / targets.len() as f64;
        let op = Op::CrossEntropyBag {
            logits: self.id,
            targets: targets.to_vec(),
        };
        self.unary(Tensor::scalar(loss), op, "cross_entropy_bag")
    }
}

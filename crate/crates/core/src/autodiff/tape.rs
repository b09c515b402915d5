//! Define-by-run reverse-mode differentiation.
//!
//! Every forward operation appends a node to a [`Tape`]; [`Tape::backward`]
//! walks the nodes once in reverse creation order. Nodes whose inputs all have
//! `requires_grad == false` are stored as constants and never visited.

use std::cell::RefCell;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias {
        input: usize,
        bias: usize,
        cols: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        input: usize,
        rows: usize,
        cols: usize,
    },
    /// Elementwise op with its local derivative saved at forward time.
    Unary { input: usize, local: Vec<f64> },
    LogSoftmax {
        input: usize,
        cols: usize,
    },
    CausalSoftmax {
        input: usize,
        n: usize,
    },
    Gather {
        input: usize,
        cols: usize,
        index: Vec<usize>,
    },
    IndexRows {
        table: usize,
        cols: usize,
        index: Vec<usize>,
    },
    SliceRows {
        input: usize,
        start: usize,
        cols: usize,
    },
    SliceCols {
        input: usize,
        in_cols: usize,
        start: usize,
    },
    ConcatCols {
        inputs: Vec<(usize, usize)>,
    },
    Stack(Vec<usize>),
    Sum(usize),
    Mean(usize),
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
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

    /// Records `tensor` as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push_raw(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a leaf that participates in differentiation.
    pub fn param(&self, tensor: &Tensor) -> Var<'_> {
        self.push_raw(tensor.shape().to_vec(), tensor.data().to_vec(), true, Op::Leaf)
    }

    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push_raw(tensor.shape().to_vec(), tensor.data().to_vec(), false, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push_raw(Vec::new(), vec![value], false, Op::Leaf)
    }

    /// Stacks scalar vars into a rank-1 tensor.
    pub fn stack<'t>(&'t self, items: &[Var<'t>]) -> Result<Var<'t>> {
        if items.is_empty() {
            return Err(Error::shape("stack", "no inputs"));
        }
        let mut value = Vec::with_capacity(items.len());
        {
            let nodes = self.nodes.borrow();
            for v in items {
                let node = &nodes[v.id];
                if node.value.len() != 1 {
                    return Err(Error::shape("stack", format!("non-scalar input {:?}", node.shape)));
                }
                value.push(node.value[0]);
            }
        }
        let ids: Vec<usize> = items.iter().map(|v| v.id).collect();
        Ok(self.push(vec![items.len()], value, &ids, Op::Stack(ids.clone())))
    }

    /// Concatenates 2-d vars with equal row counts along the column axis.
    pub fn concat_cols<'t>(&'t self, items: &[Var<'t>]) -> Result<Var<'t>> {
        if items.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let (rows, parts) = {
            let nodes = self.nodes.borrow();
            let mut rows = None;
            let mut parts = Vec::with_capacity(items.len());
            for v in items {
                let node = &nodes[v.id];
                let (r, c) = as_matrix("concat_cols", &node.shape)?;
                if *rows.get_or_insert(r) != r {
                    return Err(Error::shape("concat_cols", "row counts differ"));
                }
                parts.push((v.id, c));
            }
            (rows.unwrap_or(0), parts)
        };
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut value = vec![0.0; rows * total];
        {
            let nodes = self.nodes.borrow();
            let mut offset = 0;
            for &(id, c) in &parts {
                let src = &nodes[id].value;
                for r in 0..rows {
                    value[r * total + offset..r * total + offset + c]
                        .copy_from_slice(&src[r * c..(r + 1) * c]);
                }
                offset += c;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(vec![rows, total], value, &ids, Op::ConcatCols { inputs: parts }))
    }

    /// Back-propagates from a scalar `loss`, adding into the gradient buffers
    /// of every leaf that requires grad. Calling it again without
    /// [`Tape::zero_grad`] accumulates.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }

        for (id, g) in grads.into_iter().enumerate() {
            let (Some(g), node) = (g, &mut nodes[id]) else { continue };
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn push_raw(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, inputs: &[usize], op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(shape, value, requires_grad, op)
    }
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        [c] => Ok((1, c)),
        _ => Err(Error::shape(op, format!("expected a matrix, got {shape:?}"))),
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], id: usize, len: usize) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let wants = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &id in [a, b] {
                if wants(id) {
                    slot(grads, id, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                slot(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            if wants(*b) {
                slot(grads, *b, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d -= x);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if wants(*a) {
                let d = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * vb[i];
                }
            }
            if wants(*b) {
                let d = slot(grads, *b, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * va[i];
                }
            }
        }
        Op::Scale(a, c) => {
            slot(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
        }
        Op::AddBias { input, bias, cols } => {
            if wants(*input) {
                slot(grads, *input, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            if wants(*bias) {
                let d = slot(grads, *bias, *cols);
                for row in g.chunks(*cols) {
                    d.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if wants(*a) {
                let da = slot(grads, *a, m * k);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &vb[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        da[i * k + p] += acc;
                    }
                }
            }
            if wants(*b) {
                let db = slot(grads, *b, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = va[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let drow = &mut db[p * n..(p + 1) * n];
                        for j in 0..n {
                            drow[j] += aip * grow[j];
                        }
                    }
                }
            }
        }
        Op::Transpose { input, rows, cols } => {
            let d = slot(grads, *input, rows * cols);
            for r in 0..*rows {
                for c in 0..*cols {
                    d[r * cols + c] += g[c * rows + r];
                }
            }
        }
        Op::Unary { input, local } => {
            let d = slot(grads, *input, g.len());
            for i in 0..g.len() {
                d[i] += g[i] * local[i];
            }
        }
        Op::LogSoftmax { input, cols } => {
            let y = &node.value;
            let d = slot(grads, *input, g.len());
            for (r, grow) in g.chunks(*cols).enumerate() {
                let total: f64 = grow.iter().sum();
                for c in 0..*cols {
                    let i = r * cols + c;
                    d[i] += grow[c] - y[i].exp() * total;
                }
            }
        }
        Op::CausalSoftmax { input, n } => {
            let y = &node.value;
            let d = slot(grads, *input, g.len());
            for r in 0..*n {
                let base = r * n;
                let mut dot = 0.0;
                for c in 0..=r {
                    dot += y[base + c] * g[base + c];
                }
                for c in 0..=r {
                    d[base + c] += y[base + c] * (g[base + c] - dot);
                }
            }
        }
        Op::Gather { input, cols, index } => {
            let d = slot(grads, *input, index.len() * cols);
            for (r, &c) in index.iter().enumerate() {
                d[r * cols + c] += g[r];
            }
        }
        Op::IndexRows { table, cols, index } => {
            let len = nodes[*table].value.len();
            let d = slot(grads, *table, len);
            for (r, &t) in index.iter().enumerate() {
                let dst = &mut d[t * cols..(t + 1) * cols];
                dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(d, x)| *d += x);
            }
        }
        Op::SliceRows { input, start, cols } => {
            let len = nodes[*input].value.len();
            let d = slot(grads, *input, len);
            let off = start * cols;
            d[off..off + g.len()].iter_mut().zip(g).for_each(|(d, x)| *d += x);
        }
        Op::SliceCols {
            input,
            in_cols,
            start,
        } => {
            let out_cols = node.shape[1];
            let len = nodes[*input].value.len();
            let d = slot(grads, *input, len);
            for (r, grow) in g.chunks(out_cols).enumerate() {
                let dst = &mut d[r * in_cols + start..r * in_cols + start + out_cols];
                dst.iter_mut().zip(grow).for_each(|(d, x)| *d += x);
            }
        }
        Op::ConcatCols { inputs } => {
            let total = node.shape[1];
            let rows = node.shape[0];
            let mut offset = 0;
            for &(id, c) in inputs {
                if wants(id) {
                    let d = slot(grads, id, rows * c);
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + c];
                        d[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(d, x)| *d += x);
                    }
                }
                offset += c;
            }
        }
        Op::Stack(ids) => {
            for (&id, &x) in ids.iter().zip(g) {
                if wants(id) {
                    slot(grads, id, 1)[0] += x;
                }
            }
        }
        Op::Sum(a) => {
            let len = nodes[*a].value.len();
            slot(grads, *a, len).iter_mut().for_each(|d| *d += g[0]);
        }
        Op::Mean(a) => {
            let len = nodes[*a].value.len();
            let share = g[0] / len as f64;
            slot(grads, *a, len).iter_mut().for_each(|d| *d += share);
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            cols,
            xhat,
            inv_std,
        } => {
            let cols = *cols;
            let vg = &nodes[*gain].value;
            if wants(*gain) {
                let d = slot(grads, *gain, cols);
                for (grow, xrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for c in 0..cols {
                        d[c] += grow[c] * xrow[c];
                    }
                }
            }
            if wants(*bias) {
                let d = slot(grads, *bias, cols);
                for grow in g.chunks(cols) {
                    d.iter_mut().zip(grow).for_each(|(d, x)| *d += x);
                }
            }
            if wants(*input) {
                let d = slot(grads, *input, g.len());
                let nf = cols as f64;
                for (r, (grow, xrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                    let mut sum_dx = 0.0;
                    let mut sum_dx_x = 0.0;
                    for c in 0..cols {
                        let dxh = grow[c] * vg[c];
                        sum_dx += dxh;
                        sum_dx_x += dxh * xrow[c];
                    }
                    let scale = inv_std[r] / nf;
                    for c in 0..cols {
                        let dxh = grow[c] * vg[c];
                        d[r * cols + c] += scale * (nf * dxh - sum_dx - xrow[c] * sum_dx_x);
                    }
                }
            }
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("tape node shape is consistent")
    }

    /// The value of a single-element var.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        assert_eq!(node.value.len(), 1, "item() on var with shape {:?}", node.shape);
        node.value[0]
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.shape.clone(), g.clone()).expect("grad matches shape"))
    }

    fn with_value<R>(&self, f: impl FnOnce(&[usize], &[f64]) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        f(&node.shape, &node.value)
    }

    fn binary_same_shape(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape, b.shape)));
            }
            let value = a.value.iter().zip(&b.value).map(|(x, y)| f(*x, *y)).collect();
            (a.shape.clone(), value)
        };
        Ok(self.tape.push(shape, value, &[self.id, other.id], op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let (shape, value) = self.with_value(|s, v| (s.to_vec(), v.iter().map(|x| x * c).collect()));
        self.tape.push(shape, value, &[self.id], Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let (shape, value) = self.with_value(|s, v| (s.to_vec(), v.iter().map(|x| x + c).collect()));
        self.tape.push(shape, value, &[self.id], Op::Scale(self.id, 1.0))
    }

    /// `self[r, c] + bias[c]` for a `[rows, cols]` input and `[cols]` bias.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (shape, value, cols) = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            let (_, cols) = as_matrix("add_bias", &x.shape)?;
            if b.value.len() != cols || b.shape.len() != 1 {
                return Err(Error::shape("add_bias", format!("{:?} + {:?}", x.shape, b.shape)));
            }
            let mut value = x.value.clone();
            for row in value.chunks_mut(cols) {
                row.iter_mut().zip(&b.value).for_each(|(v, b)| *v += b);
            }
            (x.shape.clone(), value, cols)
        };
        Ok(self.tape.push(
            shape,
            value,
            &[self.id, bias.id],
            Op::AddBias {
                input: self.id,
                bias: bias.id,
                cols,
            },
        ))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (m, k, n, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let ([m, k], [k2, n]) = (a.shape.as_slice(), b.shape.as_slice()) else {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
            };
            if k != k2 {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
            }
            let (m, k, n) = (*m, *k, *n);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a.value[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b.value[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
            (m, k, n, out)
        };
        Ok(self.tape.push(
            vec![m, n],
            value,
            &[self.id, other.id],
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (rows, cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let [rows, cols] = *x.shape.as_slice() else {
                return Err(Error::shape("transpose", format!("expected a matrix, got {:?}", x.shape)));
            };
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = x.value[r * cols + c];
                }
            }
            (rows, cols, out)
        };
        Ok(self.tape.push(
            vec![cols, rows],
            value,
            &[self.id],
            Op::Transpose {
                input: self.id,
                rows,
                cols,
            },
        ))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value, local) = self.with_value(|s, v| {
            (
                s.to_vec(),
                v.iter().map(|&x| f(x)).collect::<Vec<_>>(),
                v.iter().map(|&x| df(x)).collect::<Vec<_>>(),
            )
        });
        self.tape.push(shape, value, &[self.id], Op::Unary { input: self.id, local })
    }

    pub fn exp(self) -> Var<'t> {
        let (shape, value) = self.with_value(|s, v| (s.to_vec(), v.iter().map(|x| x.exp()).collect::<Vec<_>>()));
        let local = value.clone();
        self.tape.push(shape, value, &[self.id], Op::Unary { input: self.id, local })
    }

    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.with_value(|_, v| v.iter().copied().find(|x| !(*x > 0.0))) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.map(f64::ln, |x| 1.0 / x))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let (shape, value) =
            self.with_value(|s, v| (s.to_vec(), v.iter().map(|&x| sigmoid_scalar(x)).collect::<Vec<_>>()));
        let local = value.iter().map(|s| s * (1.0 - s)).collect();
        self.tape.push(shape, value, &[self.id], Op::Unary { input: self.id, local })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.map(
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            sigmoid_scalar,
        )
    }

    /// `ln σ(x) = -softplus(-x)`.
    pub fn log_sigmoid(self) -> Var<'t> {
        self.neg().softplus().neg()
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn max_with_zero(self) -> Var<'t> {
        self.map(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(self) -> Var<'t> {
        self.map(
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            |x| {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            },
        )
    }

    /// Value-equal constant with no gradient path back to `self`.
    pub fn detach(self) -> Var<'t> {
        let (shape, value) = self.with_value(|s, v| (s.to_vec(), v.to_vec()));
        self.tape.push_raw(shape, value, false, Op::Leaf)
    }

    /// Row-wise log-softmax over the last axis, max-shifted.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let (shape, value, cols) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (_, cols) = as_matrix("log_softmax", &x.shape)?;
            let mut out = Vec::with_capacity(x.value.len());
            for row in x.value.chunks(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    return Err(Error::Domain {
                        op: "log_softmax",
                        detail: format!("non-finite logit {max}"),
                    });
                }
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            (x.shape.clone(), out, cols)
        };
        Ok(self
            .tape
            .push(shape, value, &[self.id], Op::LogSoftmax { input: self.id, cols }))
    }

    /// Row-wise softmax of a square `[n, n]` score matrix with entries above
    /// the diagonal masked out.
    pub fn causal_softmax(self) -> Result<Var<'t>> {
        let (n, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let [r, c] = *x.shape.as_slice() else {
                return Err(Error::shape("causal_softmax", format!("{:?}", x.shape)));
            };
            if r != c {
                return Err(Error::shape("causal_softmax", format!("non-square {:?}", x.shape)));
            }
            let mut out = vec![0.0; r * r];
            for i in 0..r {
                let row = &x.value[i * r..i * r + i + 1];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..=i {
                    let e = (row[j] - max).exp();
                    out[i * r + j] = e;
                    total += e;
                }
                for j in 0..=i {
                    out[i * r + j] /= total;
                }
            }
            (r, out)
        };
        Ok(self
            .tape
            .push(vec![n, n], value, &[self.id], Op::CausalSoftmax { input: self.id, n }))
    }

    /// `out[r] = self[r, index[r]]`.
    pub fn gather(self, index: &[usize]) -> Result<Var<'t>> {
        let (cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (rows, cols) = as_matrix("gather", &x.shape)?;
            if index.len() != rows {
                return Err(Error::shape("gather", format!("{} indices for {rows} rows", index.len())));
            }
            if let Some(bad) = index.iter().find(|&&c| c >= cols) {
                return Err(Error::shape("gather", format!("index {bad} out of {cols} columns")));
            }
            (cols, index.iter().enumerate().map(|(r, &c)| x.value[r * cols + c]).collect())
        };
        Ok(self.tape.push(
            vec![index.len()],
            value,
            &[self.id],
            Op::Gather {
                input: self.id,
                cols,
                index: index.to_vec(),
            },
        ))
    }

    /// Embedding lookup: selects rows of a `[n, cols]` table.
    pub fn index_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let (cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (rows, cols) = as_matrix("index_rows", &x.shape)?;
            let mut out = Vec::with_capacity(index.len() * cols);
            for &r in index {
                if r >= rows {
                    return Err(Error::shape("index_rows", format!("row {r} out of {rows}")));
                }
                out.extend_from_slice(&x.value[r * cols..(r + 1) * cols]);
            }
            (cols, out)
        };
        if index.is_empty() {
            return Err(Error::shape("index_rows", "empty index"));
        }
        Ok(self.tape.push(
            vec![index.len(), cols],
            value,
            &[self.id],
            Op::IndexRows {
                table: self.id,
                cols,
                index: index.to_vec(),
            },
        ))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (rows, cols) = as_matrix("slice_rows", &x.shape)?;
            if len == 0 || start + len > rows {
                return Err(Error::shape("slice_rows", format!("rows {start}..{} of {rows}", start + len)));
            }
            (cols, x.value[start * cols..(start + len) * cols].to_vec())
        };
        Ok(self.tape.push(
            vec![len, cols],
            value,
            &[self.id],
            Op::SliceRows {
                input: self.id,
                start,
                cols,
            },
        ))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (rows, in_cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (rows, cols) = as_matrix("slice_cols", &x.shape)?;
            if len == 0 || start + len > cols {
                return Err(Error::shape("slice_cols", format!("cols {start}..{} of {cols}", start + len)));
            }
            let mut out = Vec::with_capacity(rows * len);
            for row in x.value.chunks(cols) {
                out.extend_from_slice(&row[start..start + len]);
            }
            (rows, cols, out)
        };
        Ok(self.tape.push(
            vec![rows, len],
            value,
            &[self.id],
            Op::SliceCols {
                input: self.id,
                in_cols,
                start,
            },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.with_value(|_, v| v.iter().sum());
        self.tape.push(Vec::new(), vec![total], &[self.id], Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let mean = self.with_value(|_, v| v.iter().sum::<f64>() / v.len() as f64);
        self.tape.push(Vec::new(), vec![mean], &[self.id], Op::Mean(self.id))
    }

    /// Row-wise layer normalisation followed by `gain * x + bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (shape, value, cols, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            let (_, cols) = as_matrix("layer_norm", &x.shape)?;
            if g.value.len() != cols || b.value.len() != cols {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{:?} with gain {:?} bias {:?}", x.shape, g.shape, b.shape),
                ));
            }
            let mut out = Vec::with_capacity(x.value.len());
            let mut xhat = Vec::with_capacity(x.value.len());
            let mut inv_std = Vec::new();
            for row in x.value.chunks(cols) {
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                for c in 0..cols {
                    let h = (row[c] - mean) * inv;
                    xhat.push(h);
                    out.push(h * g.value[c] + b.value[c]);
                }
            }
            (x.shape.clone(), out, cols, xhat, inv_std)
        };
        Ok(self.tape.push(
            shape,
            value,
            &[self.id, gain.id, bias.id],
            Op::LayerNorm {
                input: self.id,
                gain: gain.id,
                bias: bias.id,
                cols,
                xhat,
                inv_std,
            },
        ))
    }
}

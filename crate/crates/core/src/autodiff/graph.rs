//! Define-then-run computation graph with reverse-mode gradients.
//!
//! Nodes are appended in construction order, which is always a valid
//! topological order; `backward` walks the node list in reverse.

use std::collections::HashMap;

use super::params::ParamSet;
use super::tensor::{
    matmul_into, matmul_nt_into, matmul_tn_into, shape_str, softmax_in_place, Real, Tensor,
};
use crate::error::{Error, Result};

/// Added to row norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Param(String),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Matrix plus a row vector broadcast over rows.
    BiasAdd(NodeId, NodeId),
    Relu(NodeId),
    L2NormalizeRows(NodeId),
    RowSoftmax(NodeId),
    /// Each row divided by its sum.
    RowNormalize(NodeId),
    Log(NodeId),
    /// Picks `(row, col)` entries of a matrix into a vector.
    Gather(NodeId, Vec<(usize, usize)>),
    Scale(NodeId, f64),
    /// Where `mask` is nonzero the output holds `value`.
    MaskFill {
        input: NodeId,
        mask: NodeId,
        value: f64,
    },
    SliceRows {
        input: NodeId,
        start: usize,
        len: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    /// Mean over rows of `-log softmax(logits)[row, target]`.
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::BiasAdd(..) => "bias-add",
            Op::Relu(_) => "relu",
            Op::L2NormalizeRows(_) => "l2-normalize-rows",
            Op::RowSoftmax(_) => "row-softmax",
            Op::RowNormalize(_) => "row-normalize",
            Op::Log(_) => "log",
            Op::Gather(..) => "gather",
            Op::Scale(..) => "scale",
            Op::MaskFill { .. } => "mask-fill",
            Op::SliceRows { .. } => "slice-rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::BiasAdd(a, b) => vec![*a, *b],
            Op::MaskFill { input, mask, .. } => vec![*input, *mask],
            Op::Transpose(a)
            | Op::Relu(a)
            | Op::L2NormalizeRows(a)
            | Op::RowSoftmax(a)
            | Op::RowNormalize(a)
            | Op::Log(a)
            | Op::Gather(a, _)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::SliceRows { input, .. } => vec![*input],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// Named input tensors for one forward evaluation.
pub type Bindings<F> = HashMap<String, Tensor<F>>;

#[derive(Debug, Clone)]
pub struct Graph<F> {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor<F>>>,
    requires_grad: Vec<bool>,
    bound_params: Vec<(String, Vec<usize>)>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            values: Vec::new(),
            requires_grad: Vec::new(),
            bound_params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for o in op.operands() {
            assert!(o.0 < self.nodes.len(), "operand {o:?} is not in this graph");
        }
        self.nodes.push(Node { op, label: None });
        self.values.clear();
        NodeId(self.nodes.len() - 1)
    }

    /// Attaches a human-readable name used in error messages.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id.0].label = Some(label.into());
        id
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Param(name.into()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::BiasAdd(x, bias))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L2NormalizeRows(a))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSoftmax(a))
    }

    pub fn row_normalize(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowNormalize(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn gather(&mut self, a: NodeId, entries: Vec<(usize, usize)>) -> NodeId {
        self.push(Op::Gather(a, entries))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn mask_fill(&mut self, input: NodeId, mask: NodeId, value: f64) -> NodeId {
        self.push(Op::MaskFill { input, mask, value })
    }

    pub fn slice_rows(&mut self, input: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceRows { input, start, len })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, targets })
    }

    fn describe(&self, id: NodeId) -> String {
        match &self.nodes[id.0].label {
            Some(l) => format!("#{} {l:?}", id.0),
            None => format!("#{}", id.0),
        }
    }

    fn shape_err(&self, id: NodeId, expected: impl Into<String>, actual: impl Into<String>) -> Error {
        Error::Shape {
            node: self.describe(id),
            op: self.nodes[id.0].op.kind(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    /// Evaluates every node, caching outputs for [`Graph::backward`].
    pub fn forward_eval(&mut self, inputs: &Bindings<F>, params: &ParamSet<F>) -> Result<()> {
        self.values.clear();
        self.requires_grad.clear();
        self.bound_params = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        let mut values: Vec<Option<Tensor<F>>> = Vec::with_capacity(self.nodes.len());
        for i in 0..self.nodes.len() {
            let id = NodeId(i);
            let out = self.eval_node(id, &values, inputs, params)?;
            if !out.is_finite() {
                return Err(Error::NonFinite(format!(
                    "node {} ({})",
                    self.describe(id),
                    self.nodes[i].op.kind()
                )));
            }
            let rg = match &self.nodes[i].op {
                Op::Input(_) => false,
                Op::Param(_) => true,
                op => op.operands().iter().any(|o| self.requires_grad[o.0]),
            };
            self.requires_grad.push(rg);
            values.push(Some(out));
        }
        self.values = values;
        Ok(())
    }

    pub fn is_evaluated(&self) -> bool {
        !self.nodes.is_empty() && self.values.len() == self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<F>> {
        self.values
            .get(id.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Usage(format!("node {} has not been evaluated", self.describe(id))))
    }

    /// Fingerprint of the sign pattern of every relu input; two evaluations
    /// with equal signatures lie on the same linear piece of the network.
    pub fn relu_signature(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for &v in self.value(a)?.data() {
                    h ^= u64::from(v > F::ZERO);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        Ok(h)
    }

    fn eval_node(
        &self,
        id: NodeId,
        values: &[Option<Tensor<F>>],
        inputs: &Bindings<F>,
        params: &ParamSet<F>,
    ) -> Result<Tensor<F>> {
        let val = |n: &NodeId| values[n.0].as_ref().expect("operands evaluated first");
        let op = &self.nodes[id.0].op;
        let out = match op {
            Op::Input(name) => inputs
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Usage(format!("input {name:?} is not bound")))?,
            Op::Param(name) => params
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Usage(format!("parameter {name:?} is not bound")))?,
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                let (m, k) = self.matrix(id, a)?;
                let (k2, n) = self.matrix(id, b)?;
                if k != k2 {
                    return Err(self.shape_err(
                        id,
                        format!("right operand with {k} rows"),
                        shape_str(b.shape()),
                    ));
                }
                let mut out = vec![F::ZERO; m * n];
                matmul_into(a.data(), b.data(), &mut out, m, k, n);
                Tensor::from_parts(vec![m, n], out)
            }
            Op::Transpose(a) => {
                let a = val(a);
                self.matrix(id, a)?;
                a.transpose()?
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.shape() != b.shape() {
                    return Err(self.shape_err(id, shape_str(a.shape()), shape_str(b.shape())));
                }
                let data = if matches!(op, Op::Add(..)) {
                    a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect()
                } else {
                    a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect()
                };
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Op::BiasAdd(x, b) => {
                let (x, b) = (val(x), val(b));
                let (_, c) = self.matrix(id, x)?;
                if b.len() != c || !(b.rank() == 1 || b.shape() == [1, c]) {
                    return Err(self.shape_err(id, format!("bias [{c}]"), shape_str(b.shape())));
                }
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(c) {
                    for (o, &bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), out)
            }
            // written so NaN passes through and is reported rather than clipped to zero
            Op::Relu(a) => val(a).map(|v| if v <= F::ZERO { F::ZERO } else { v }),
            Op::L2NormalizeRows(a) => {
                let a = val(a);
                self.matrix(id, a)?;
                a.l2_normalize_rows(F::from_f64(NORM_EPS))
            }
            Op::RowSoftmax(a) => {
                let a = val(a);
                self.matrix(id, a)?;
                a.row_softmax()
            }
            Op::RowNormalize(a) => {
                let a = val(a);
                let (_, c) = self.matrix(id, a)?;
                let mut out = a.data().to_vec();
                for row in out.chunks_mut(c) {
                    let s: F = row.iter().copied().sum();
                    for v in row.iter_mut() {
                        *v = *v / s;
                    }
                }
                Tensor::from_parts(a.shape().to_vec(), out)
            }
            Op::Log(a) => val(a).map(Real::ln),
            Op::Gather(a, entries) => {
                let a = val(a);
                let (r, c) = self.matrix(id, a)?;
                if entries.is_empty() {
                    return Err(self.shape_err(id, "at least one entry", "none"));
                }
                let mut out = Vec::with_capacity(entries.len());
                for &(i, j) in entries {
                    if i >= r || j >= c {
                        return Err(self.shape_err(
                            id,
                            format!("index inside [{r}x{c}]"),
                            format!("({i}, {j})"),
                        ));
                    }
                    out.push(a.get(i, j));
                }
                Tensor::from_parts(vec![entries.len()], out)
            }
            Op::Scale(a, c) => {
                let c = F::from_f64(*c);
                val(a).map(|v| v * c)
            }
            Op::MaskFill { input, mask, value } => {
                let (x, m) = (val(input), val(mask));
                if x.shape() != m.shape() {
                    return Err(self.shape_err(id, shape_str(x.shape()), shape_str(m.shape())));
                }
                let fill = F::from_f64(*value);
                let data = x
                    .data()
                    .iter()
                    .zip(m.data())
                    .map(|(&v, &mv)| if mv != F::ZERO { fill } else { v })
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::SliceRows { input, start, len } => {
                let x = val(input);
                let (r, c) = self.matrix(id, x)?;
                if *len == 0 || start + len > r {
                    return Err(self.shape_err(
                        id,
                        format!("rows {start}..{} within {r}", start + len),
                        shape_str(x.shape()),
                    ));
                }
                Tensor::from_parts(vec![*len, c], x.data()[start * c..(start + len) * c].to_vec())
            }
            Op::Sum(a) => Tensor::scalar(val(a).sum()),
            Op::Mean(a) => {
                let a = val(a);
                Tensor::scalar(a.sum() / F::from_f64(a.len() as f64))
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let z = val(logits);
                let (r, c) = self.matrix(id, z)?;
                if targets.len() != r {
                    return Err(self.shape_err(id, format!("{r} targets"), targets.len().to_string()));
                }
                let mut total = F::ZERO;
                for (row, &t) in z.rows().zip(targets) {
                    if t >= c {
                        return Err(self.shape_err(id, format!("target < {c}"), t.to_string()));
                    }
                    let max = row.iter().copied().fold(row[0], |a, b| a.max(b));
                    let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
                    total += lse - row[t];
                }
                Tensor::scalar(total / F::from_f64(r as f64))
            }
        };
        Ok(out)
    }

    fn matrix(&self, id: NodeId, t: &Tensor<F>) -> Result<(usize, usize)> {
        t.dims2()
            .map_err(|_| self.shape_err(id, "rank-2 operand", shape_str(t.shape())))
    }

    /// Gradients of a scalar node with respect to every bound parameter.
    ///
    /// Parameters with no path to `loss` get exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<ParamSet<F>> {
        if !self.is_evaluated() {
            return Err(Error::Usage("backward called before forward_eval".into()));
        }
        let loss_val = self.value(loss)?;
        if loss_val.len() != 1 {
            return Err(self.shape_err(loss, "scalar loss", shape_str(loss_val.shape())));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_val.shape(), F::ONE));

        let mut out = ParamSet::new();
        for (name, shape) in &self.bound_params {
            out.insert(name.clone(), Tensor::zeros(shape))?;
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.requires_grad[i] {
                continue;
            }
            let id = NodeId(i);
            match &self.nodes[i].op {
                Op::Param(name) => {
                    if let Some(t) = out.get_mut(name) {
                        t.add_assign(&g);
                    }
                }
                Op::Input(_) => {}
                op => self.backprop_node(id, op, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        id: NodeId,
        op: &Op,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let val = |n: NodeId| self.values[n.0].as_ref().expect("evaluated");
        let out = val(id);
        let rg = |n: NodeId| self.requires_grad[n.0];
        let mut acc = |n: NodeId, t: Tensor<F>| match &mut grads[n.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match op {
            Op::Input(_) | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if rg(*a) {
                    let mut da = vec![F::ZERO; m * k];
                    matmul_nt_into(g.data(), bv.data(), &mut da, m, k, n);
                    acc(*a, Tensor::from_parts(vec![m, k], da));
                }
                if rg(*b) {
                    let mut db = vec![F::ZERO; k * n];
                    matmul_tn_into(av.data(), g.data(), &mut db, m, k, n);
                    acc(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Transpose(a) => {
                if rg(*a) {
                    acc(*a, g.transpose()?);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    acc(*a, g.clone());
                }
                if rg(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if rg(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    acc(*a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if rg(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    acc(*b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::BiasAdd(x, b) => {
                if rg(*x) {
                    acc(*x, g.clone());
                }
                if rg(*b) {
                    let bshape = val(*b).shape().to_vec();
                    let c = bshape.iter().product();
                    let mut db = vec![F::ZERO; c];
                    for row in g.data().chunks(c) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    acc(*b, Tensor::from_parts(bshape, db));
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > F::ZERO { gv } else { F::ZERO })
                    .collect();
                acc(*a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let (_, c) = x.dims2()?;
                let eps = F::from_f64(NORM_EPS);
                let mut d = vec![F::ZERO; x.len()];
                for ((xr, gr), dr) in x.rows().zip(g.data().chunks(c)).zip(d.chunks_mut(c)) {
                    let norm = xr.iter().map(|&v| v * v).sum::<F>().sqrt();
                    let s = norm + eps;
                    let dot: F = xr.iter().zip(gr).map(|(&xv, &gv)| xv * gv).sum();
                    let coef = if norm > F::ZERO {
                        dot / (s * s * norm)
                    } else {
                        F::ZERO
                    };
                    for ((dv, &xv), &gv) in dr.iter_mut().zip(xr).zip(gr) {
                        *dv = gv / s - xv * coef;
                    }
                }
                acc(*a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::RowSoftmax(a) => {
                let (_, c) = out.dims2()?;
                let mut d = vec![F::ZERO; out.len()];
                for ((yr, gr), dr) in out.rows().zip(g.data().chunks(c)).zip(d.chunks_mut(c)) {
                    let dot: F = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                    for ((dv, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = y * (gv - dot);
                    }
                }
                acc(*a, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::RowNormalize(a) => {
                let x = val(*a);
                let (_, c) = x.dims2()?;
                let mut d = vec![F::ZERO; x.len()];
                for (((xr, yr), gr), dr) in x
                    .rows()
                    .zip(out.rows())
                    .zip(g.data().chunks(c))
                    .zip(d.chunks_mut(c))
                {
                    let s: F = xr.iter().copied().sum();
                    let dot: F = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                    for (dv, &gv) in dr.iter_mut().zip(gr) {
                        *dv = (gv - dot) / s;
                    }
                }
                acc(*a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::Log(a) => {
                let x = val(*a);
                let d = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv / xv).collect();
                acc(*a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::Gather(a, entries) => {
                let x = val(*a);
                let mut d = Tensor::zeros(x.shape());
                for (&(i, j), &gv) in entries.iter().zip(g.data()) {
                    let cur = d.get(i, j);
                    d.set(i, j, cur + gv);
                }
                acc(*a, d);
            }
            Op::Scale(a, c) => {
                let c = F::from_f64(*c);
                acc(*a, g.map(|v| v * c));
            }
            Op::MaskFill { input, mask, .. } => {
                if rg(*input) {
                    let m = val(*mask);
                    let d = g
                        .data()
                        .iter()
                        .zip(m.data())
                        .map(|(&gv, &mv)| if mv != F::ZERO { F::ZERO } else { gv })
                        .collect();
                    acc(*input, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::SliceRows { input, start, .. } => {
                let x = val(*input);
                let (_, c) = x.dims2()?;
                let mut d = Tensor::zeros(x.shape());
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*input, d);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                acc(*a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let gv = g.data()[0] / F::from_f64(x.len() as f64);
                acc(*a, Tensor::full(x.shape(), gv));
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                // fused: d/dz = (softmax(z) - onehot) / rows
                let z = val(*logits);
                let (r, c) = z.dims2()?;
                let scale = g.data()[0] / F::from_f64(r as f64);
                let mut d = z.data().to_vec();
                for (row, &t) in d.chunks_mut(c).zip(targets) {
                    softmax_in_place(row);
                    row[t] -= F::ONE;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, Tensor::from_parts(z.shape().to_vec(), d));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(entries: &[(&str, Tensor<f64>)]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        for (n, t) in entries {
            p.insert(*n, t.clone()).unwrap();
        }
        p
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param("x");
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        let p = params(&[("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]);
        g.forward_eval(&Bindings::new(), &p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x");
        let _unused = g.param("y");
        let loss = g.sum(x);
        let p = params(&[
            ("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()),
            ("y", Tensor::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap()),
        ]);
        g.forward_eval(&Bindings::new(), &p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("y").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_before_forward_is_usage_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x");
        let loss = g.sum(x);
        assert!(matches!(g.backward(loss), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_error_names_the_node() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        g.label(c, "product");
        let mut inputs = Bindings::new();
        inputs.insert("a".into(), Tensor::zeros(&[2, 3]));
        inputs.insert("b".into(), Tensor::zeros(&[2, 3]));
        let err = g.forward_eval(&inputs, &ParamSet::new()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("product") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn log_of_zero_is_reported_as_non_finite() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a");
        g.log(a);
        let mut inputs = Bindings::new();
        inputs.insert("a".into(), Tensor::zeros(&[1, 2]));
        assert!(matches!(
            g.forward_eval(&inputs, &ParamSet::new()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn fused_cross_entropy_gradient_is_probabilities_minus_target() {
        let z = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 1.0, -0.5]]).unwrap();
        let mut g = Graph::new();
        let zn = g.param("z");
        let loss = g.softmax_cross_entropy(zn, vec![2, 0]);
        g.forward_eval(&Bindings::new(), &params(&[("z", z.clone())])).unwrap();
        let grad = g.backward(loss).unwrap();
        let grad = grad.get("z").unwrap();
        let p = z.row_softmax();
        for (i, t) in [2usize, 0].into_iter().enumerate() {
            let mut row_sum = 0.0;
            for j in 0..3 {
                let expected = (p.get(i, j) - if j == t { 1.0 } else { 0.0 }) / 2.0;
                assert!((grad.get(i, j) - expected).abs() < 1e-15);
                row_sum += grad.get(i, j);
            }
            assert!(row_sum.abs() < 1e-10);
        }
    }

    #[test]
    fn mask_fill_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param("x");
        let m = g.input("m");
        let y = g.mask_fill(x, m, -1e10);
        let s = g.row_softmax(y);
        let pick = g.gather(s, vec![(0, 1)]);
        let loss = g.sum(pick);
        let mut inputs = Bindings::new();
        inputs.insert("m".into(), Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let p = params(&[("x", Tensor::new(vec![1, 2], vec![5.0, 0.0]).unwrap())]);
        g.forward_eval(&inputs, &p).unwrap();
        assert!((g.value(s).unwrap().get(0, 1) - 1.0).abs() < 1e-15);
        let grad = g.backward(loss).unwrap();
        assert_eq!(grad.get("x").unwrap().data()[0], 0.0);
    }
}

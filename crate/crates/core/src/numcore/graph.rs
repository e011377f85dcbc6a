use std::borrow::Cow;
use std::collections::HashMap;

use super::matrix::{dot4, Matrix};
use super::NumError;

pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The fixed operator set. Every operator has a hand-derived backward rule.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `a · b`, or `a · bᵀ` when `transpose_rhs` is set.
    MatMul { transpose_rhs: bool },
    Add,
    /// `factor · x`, or `factor · s · x` when a second 1x1 input `s` is given.
    Scale(f64),
    /// Elementwise product.
    Mul,
    SoftmaxRows,
    /// Inputs `(x, gain 1xd, bias 1xd)`, normalized per row.
    LayerNorm,
    /// tanh approximation.
    Gelu,
    /// Gathers rows of the table input.
    EmbeddingLookup(Vec<usize>),
    /// Mean over the rows whose mask entry is set; yields 1 x cols.
    MaskedMeanRows(Vec<bool>),
    ConcatRows,
    SliceRow(usize),
    /// Sum of elementwise products of two equally shaped inputs; yields 1x1.
    Dot,
    Log,
    Exp,
    L2NormalizeRows,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Scale,
    Mul,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    EmbeddingLookup,
    MaskedMeanRows,
    ConcatRows,
    SliceRow,
    Dot,
    Log,
    Exp,
    L2NormalizeRows,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Scale,
        OpKind::Mul,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::EmbeddingLookup,
        OpKind::MaskedMeanRows,
        OpKind::ConcatRows,
        OpKind::SliceRow,
        OpKind::Dot,
        OpKind::Log,
        OpKind::Exp,
        OpKind::L2NormalizeRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Mul => "elementwise-mul",
            OpKind::SoftmaxRows => "softmax-rows",
            OpKind::LayerNorm => "layernorm",
            OpKind::Gelu => "gelu",
            OpKind::EmbeddingLookup => "embedding-lookup",
            OpKind::MaskedMeanRows => "masked-mean-rows",
            OpKind::ConcatRows => "concat-rows",
            OpKind::SliceRow => "slice-row",
            OpKind::Dot => "dot",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::L2NormalizeRows => "l2-normalize-rows",
        }
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Scale(_) => OpKind::Scale,
            Op::Mul => OpKind::Mul,
            Op::SoftmaxRows => OpKind::SoftmaxRows,
            Op::LayerNorm => OpKind::LayerNorm,
            Op::Gelu => OpKind::Gelu,
            Op::EmbeddingLookup(_) => OpKind::EmbeddingLookup,
            Op::MaskedMeanRows(_) => OpKind::MaskedMeanRows,
            Op::ConcatRows => OpKind::ConcatRows,
            Op::SliceRow(_) => OpKind::SliceRow,
            Op::Dot => OpKind::Dot,
            Op::Log => OpKind::Log,
            Op::Exp => OpKind::Exp,
            Op::L2NormalizeRows => OpKind::L2NormalizeRows,
        }
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Constant,
    Param { trainable: bool },
    Op(Op),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Matrix>,
    kind: NodeKind,
    inputs: Vec<NodeId>,
    requires_grad: bool,
    /// Per-op forward intermediates reused by backward.
    cache: Vec<f64>,
}

/// Append-only computation graph. Values are computed eagerly when a node is
/// added; `backward` walks the nodes in reverse insertion order, which is a
/// valid reverse topological order because inputs always precede outputs.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    fault: Option<(OpKind, f64)>,
}

/// Parameter gradients produced by a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    computed: HashMap<NodeId, Matrix>,
    shapes: HashMap<NodeId, (usize, usize)>,
}

impl Gradients {
    /// Gradient for a parameter node. Frozen or unreachable parameters get zeros.
    pub fn get(&self, id: NodeId) -> Option<Cow<'_, Matrix>> {
        if let Some(g) = self.computed.get(&id) {
            return Some(Cow::Borrowed(g));
        }
        self.shapes
            .get(&id)
            .map(|&(r, c)| Cow::Owned(Matrix::zeros(r, c)))
    }

    /// Whether a nonzero contribution was propagated to the parameter.
    pub fn reached(&self, id: NodeId) -> bool {
        self.computed.contains_key(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        match self.computed.remove(&id) {
            Some(g) => Some(g),
            None => self.shapes.get(&id).map(|&(r, c)| Matrix::zeros(r, c)),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.shapes.keys().copied()
    }
}

fn shape_err(op: OpKind, detail: impl Into<String>) -> NumError {
    NumError::Shape(format!("{}: {}", op.name(), detail.into()))
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the backward contribution of every `kind` node by `factor`.
    /// Exists only to give gradient checks a negative control.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    fn leaf(&mut self, value: Cow<'a, Matrix>, kind: NodeKind) -> Result<NodeId, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite("leaf"));
        }
        let requires_grad = matches!(kind, NodeKind::Param { trainable: true });
        self.nodes.push(Node {
            value,
            kind,
            inputs: Vec::new(),
            requires_grad,
            cache: Vec::new(),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: impl Into<Cow<'a, Matrix>>) -> Result<NodeId, NumError> {
        self.leaf(value.into(), NodeKind::Constant)
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, value: impl Into<Cow<'a, Matrix>>) -> Result<NodeId, NumError> {
        self.leaf(value.into(), NodeKind::Param { trainable: true })
    }

    /// Frozen parameter leaf: participates in forward, always gets a zero gradient.
    pub fn frozen(&mut self, value: impl Into<Cow<'a, Matrix>>) -> Result<NodeId, NumError> {
        self.leaf(value.into(), NodeKind::Param { trainable: false })
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Applies `op` to `inputs` and appends the result.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, NumError> {
        for &i in inputs {
            if i.0 >= self.nodes.len() {
                return Err(NumError::Contract(format!("unknown node {}", i.0)));
            }
        }
        let (value, cache) = self.forward(&op, inputs)?;
        if !value.is_finite() {
            return Err(NumError::NonFinite(op.kind().name()));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            kind: NodeKind::Op(op),
            inputs: inputs.to_vec(),
            requires_grad,
            cache,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn forward(&self, op: &Op, inputs: &[NodeId]) -> Result<(Matrix, Vec<f64>), NumError> {
        let kind = op.kind();
        let arity = |n: usize| -> Result<(), NumError> {
            if inputs.len() != n {
                Err(shape_err(kind, format!("expected {n} inputs, got {}", inputs.len())))
            } else {
                Ok(())
            }
        };
        let v = |k: usize| -> &Matrix { &self.nodes[inputs[k].0].value };
        let none = Vec::new();
        match op {
            Op::MatMul { transpose_rhs } => {
                arity(2)?;
                let out = if *transpose_rhs {
                    v(0).matmul_nt(v(1))
                } else {
                    v(0).matmul(v(1))
                };
                Ok((out.map_err(|e| shape_err(kind, e.to_string()))?, none))
            }
            Op::Add | Op::Mul | Op::Dot => {
                arity(2)?;
                let (a, b) = (v(0), v(1));
                if a.shape() != b.shape() {
                    return Err(shape_err(kind, format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let out = match op {
                    Op::Add => elementwise(a, b, |x, y| x + y),
                    Op::Mul => elementwise(a, b, |x, y| x * y),
                    _ => Matrix::scalar(dot4(a.data(), b.data())),
                };
                Ok((out, none))
            }
            Op::Scale(factor) => {
                let factor = match inputs.len() {
                    1 => *factor,
                    2 => {
                        if v(1).shape() != (1, 1) {
                            return Err(shape_err(kind, "scalar input must be 1x1"));
                        }
                        *factor * v(1).item()
                    }
                    n => return Err(shape_err(kind, format!("expected 1 or 2 inputs, got {n}"))),
                };
                Ok((v(0).scaled(factor), none))
            }
            Op::SoftmaxRows => {
                arity(1)?;
                Ok((softmax_rows(v(0)), none))
            }
            Op::LayerNorm => {
                arity(3)?;
                let (x, gain, bias) = (v(0), v(1), v(2));
                let d = x.cols();
                if gain.shape() != (1, d) || bias.shape() != (1, d) {
                    return Err(shape_err(kind, "gain/bias must be 1 x cols"));
                }
                Ok(layernorm(x, gain, bias))
            }
            Op::Gelu => {
                arity(1)?;
                Ok((v(0).map(gelu), none))
            }
            Op::EmbeddingLookup(ids) => {
                arity(1)?;
                let table = v(0);
                let mut out = Matrix::zeros(ids.len(), table.cols());
                for (r, &id) in ids.iter().enumerate() {
                    if id >= table.rows() {
                        return Err(NumError::Index {
                            index: id,
                            len: table.rows(),
                        });
                    }
                    out.row_mut(r).copy_from_slice(table.row(id));
                }
                Ok((out, none))
            }
            Op::MaskedMeanRows(mask) => {
                arity(1)?;
                let x = v(0);
                if mask.len() != x.rows() {
                    return Err(shape_err(kind, "mask length must equal row count"));
                }
                let count = mask.iter().filter(|&&m| m).count();
                if count == 0 {
                    return Err(NumError::Empty(kind.name()));
                }
                let mut out = Matrix::zeros(1, x.cols());
                for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for (o, &a) in out.data_mut().iter_mut().zip(x.row(r)) {
                        *o += a;
                    }
                }
                let inv = 1.0 / count as f64;
                Ok((out.scaled(inv), none))
            }
            Op::ConcatRows => {
                if inputs.is_empty() {
                    return Err(shape_err(kind, "needs at least one input"));
                }
                let cols = v(0).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for k in 0..inputs.len() {
                    if v(k).cols() != cols {
                        return Err(shape_err(kind, "column counts differ"));
                    }
                    rows += v(k).rows();
                    data.extend_from_slice(v(k).data());
                }
                Ok((Matrix::new(rows, cols, data)?, none))
            }
            Op::SliceRow(r) => {
                arity(1)?;
                let x = v(0);
                if *r >= x.rows() {
                    return Err(NumError::Index {
                        index: *r,
                        len: x.rows(),
                    });
                }
                Ok((Matrix::row_vector(x.row(*r)), none))
            }
            Op::Log => {
                arity(1)?;
                if v(0).data().iter().any(|&x| x <= 0.0) {
                    return Err(NumError::NonFinite(kind.name()));
                }
                Ok((v(0).map(f64::ln), none))
            }
            Op::Exp => {
                arity(1)?;
                Ok((v(0).map(f64::exp), none))
            }
            Op::L2NormalizeRows => {
                arity(1)?;
                let x = v(0);
                let mut out = x.clone();
                let mut norms = Vec::with_capacity(x.rows());
                for r in 0..x.rows() {
                    let n = dot4(x.row(r), x.row(r)).sqrt();
                    if n == 0.0 {
                        return Err(NumError::Degenerate(kind.name()));
                    }
                    out.row_mut(r).iter_mut().for_each(|e| *e /= n);
                    norms.push(n);
                }
                Ok((out, norms))
            }
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumError> {
        let shape = self.nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(NumError::Contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        self.backward_from(loss, &Matrix::scalar(1.0))
    }

    /// Reverse pass seeded with an upstream gradient for `output`
    /// (a vector-Jacobian product).
    pub fn backward_from(&self, output: NodeId, seed: &Matrix) -> Result<Gradients, NumError> {
        if seed.shape() != self.nodes[output.0].value.shape() {
            return Err(NumError::Contract("seed shape differs from output".into()));
        }
        let mut result = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let NodeKind::Param { .. } = node.kind {
                result.shapes.insert(NodeId(i), node.value.shape());
            }
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.clone());
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.kind {
                NodeKind::Constant => {}
                NodeKind::Param { trainable } => {
                    if *trainable {
                        result.computed.insert(NodeId(i), g);
                    }
                }
                NodeKind::Op(op) => {
                    let mut contributions = self.op_backward(op, node, &g)?;
                    if let Some((kind, factor)) = self.fault {
                        if kind == op.kind() {
                            for c in contributions.iter_mut().flatten() {
                                *c = c.scaled(factor);
                            }
                        }
                    }
                    for (k, c) in contributions.into_iter().enumerate() {
                        let Some(c) = c else { continue };
                        let target = node.inputs[k].0;
                        match &mut grads[target] {
                            Some(acc) => acc.add_assign(&c),
                            slot => *slot = Some(c),
                        }
                    }
                }
            }
        }
        Ok(result)
    }

    fn op_backward(&self, op: &Op, node: &Node<'a>, g: &Matrix) -> Result<Vec<Option<Matrix>>, NumError> {
        let need = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let v = |k: usize| -> &Matrix { &self.nodes[node.inputs[k].0].value };
        let y: &Matrix = &node.value;
        let out = match op {
            Op::MatMul { transpose_rhs } => {
                let (a, b) = (v(0), v(1));
                if *transpose_rhs {
                    vec![
                        need(0).then(|| g.matmul(b)).transpose()?,
                        need(1).then(|| g.matmul_tn(a)).transpose()?,
                    ]
                } else {
                    vec![
                        need(0).then(|| g.matmul_nt(b)).transpose()?,
                        need(1).then(|| a.matmul_tn(g)).transpose()?,
                    ]
                }
            }
            Op::Add => vec![need(0).then(|| g.clone()), need(1).then(|| g.clone())],
            Op::Mul => vec![
                need(0).then(|| elementwise(g, v(1), |a, b| a * b)),
                need(1).then(|| elementwise(g, v(0), |a, b| a * b)),
            ],
            Op::Dot => {
                let s = g.item();
                vec![
                    need(0).then(|| v(1).scaled(s)),
                    need(1).then(|| v(0).scaled(s)),
                ]
            }
            Op::Scale(factor) => {
                if node.inputs.len() == 1 {
                    vec![need(0).then(|| g.scaled(*factor))]
                } else {
                    let s = v(1).item();
                    vec![
                        need(0).then(|| g.scaled(factor * s)),
                        need(1).then(|| Matrix::scalar(factor * dot4(g.data(), v(0).data()))),
                    ]
                }
            }
            Op::SoftmaxRows => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot4(yr, gr);
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - inner);
                    }
                }
                vec![Some(dx)]
            }
            Op::LayerNorm => layernorm_backward(v(0), v(1), &node.cache, g, [need(0), need(1), need(2)]),
            Op::Gelu => {
                let x = v(0);
                vec![Some(elementwise(g, x, |gv, xv| gv * gelu_grad(xv)))]
            }
            Op::EmbeddingLookup(ids) => {
                let table = v(0);
                let mut dt = Matrix::zeros(table.rows(), table.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &gv) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                vec![Some(dt)]
            }
            Op::MaskedMeanRows(mask) => {
                let x = v(0);
                let inv = 1.0 / mask.iter().filter(|&&m| m).count() as f64;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                        *d = gv * inv;
                    }
                }
                vec![Some(dx)]
            }
            Op::ConcatRows => {
                let mut offset = 0;
                let mut parts = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let (rows, cols) = v(k).shape();
                    parts.push(need(k).then(|| {
                        Matrix::new(rows, cols, g.data()[offset * cols..(offset + rows) * cols].to_vec())
                            .expect("concat slice shape")
                    }));
                    offset += rows;
                }
                parts
            }
            Op::SliceRow(r) => {
                let x = v(0);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                dx.row_mut(*r).copy_from_slice(g.row(0));
                vec![Some(dx)]
            }
            Op::Log => vec![Some(elementwise(g, v(0), |gv, xv| gv / xv))],
            Op::Exp => vec![Some(elementwise(g, y, |gv, yv| gv * yv))],
            Op::L2NormalizeRows => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot4(yr, gr);
                    let n = node.cache[r];
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * inner) / n;
                    }
                }
                vec![Some(dx)]
            }
        };
        Ok(out)
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::new(a.rows(), a.cols(), data).expect("elementwise shapes checked")
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for e in row.iter_mut() {
            *e = (*e - max).exp();
            sum += *e;
        }
        for e in row.iter_mut() {
            *e /= sum;
        }
    }
    out
}

/// Returns the normalized output and a cache of `[xhat (rows*cols), rstd (rows)]`.
fn layernorm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    let mut cache = vec![0.0; rows * cols + rows];
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
        cache[rows * cols + r] = rstd;
        let out_row = out.row_mut(r);
        for c in 0..cols {
            let xhat = (xr[c] - mean) * rstd;
            cache[r * cols + c] = xhat;
            out_row[c] = xhat * gain.data()[c] + bias.data()[c];
        }
    }
    (out, cache)
}

fn layernorm_backward(
    x: &Matrix,
    gain: &Matrix,
    cache: &[f64],
    g: &Matrix,
    need: [bool; 3],
) -> Vec<Option<Matrix>> {
    let (rows, cols) = x.shape();
    let xhat = &cache[..rows * cols];
    let rstd = &cache[rows * cols..];
    let mut dgain = Matrix::zeros(1, cols);
    let mut dbias = Matrix::zeros(1, cols);
    let mut dx = Matrix::zeros(rows, cols);
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let gr = g.row(r);
        let xh = &xhat[r * cols..(r + 1) * cols];
        for c in 0..cols {
            dgain.data_mut()[c] += gr[c] * xh[c];
            dbias.data_mut()[c] += gr[c];
            dxhat[c] = gr[c] * gain.data()[c];
        }
        if need[0] {
            let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
            let mean_dx = dot4(&dxhat, xh) / cols as f64;
            for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                *d = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
    }
    vec![
        need[0].then_some(dx),
        need[1].then_some(dgain),
        need[2].then_some(dbias),
    ]
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Shorthand builders for each operator.
impl<'a> Graph<'a> {
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.apply(Op::MatMul { transpose_rhs: false }, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.apply(Op::MatMul { transpose_rhs: true }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, NumError> {
        self.apply(Op::Scale(factor), &[x])
    }

    /// `factor · s · x` for a 1x1 node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId, factor: f64) -> Result<NodeId, NumError> {
        self.apply(Op::Scale(factor), &[x, s])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        self.apply(Op::SoftmaxRows, &[x])
    }

    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, NumError> {
        self.apply(Op::LayerNorm, &[x, gain, bias])
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        self.apply(Op::Gelu, &[x])
    }

    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId, NumError> {
        self.apply(Op::EmbeddingLookup(ids), &[table])
    }

    pub fn masked_mean_rows(&mut self, x: NodeId, mask: Vec<bool>) -> Result<NodeId, NumError> {
        self.apply(Op::MaskedMeanRows(mask), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumError> {
        self.apply(Op::ConcatRows, parts)
    }

    pub fn slice_row(&mut self, x: NodeId, row: usize) -> Result<NodeId, NumError> {
        self.apply(Op::SliceRow(row), &[x])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.apply(Op::Dot, &[a, b])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        self.apply(Op::Log, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        self.apply(Op::Exp, &[x])
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        self.apply(Op::L2NormalizeRows, &[x])
    }
}

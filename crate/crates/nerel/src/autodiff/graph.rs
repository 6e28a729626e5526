use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::{stable_sigmoid, DiffError};

/// A value plus its gradient accumulator. `values` and `grad` always have
/// `shape.iter().product()` elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "tensor shape {:?} does not match {} values",
            shape,
            values.len()
        );
        let grad = vec![0.0; values.len()];
        Tensor { shape, values, grad }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product::<usize>();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Handle to a node in one [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// out = W·x + b, W: [m,n], x: [n], b: [m]
    Affine { x: NodeId, w: NodeId, b: NodeId },
    /// out = W·x
    MatVec { w: NodeId, x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddN { xs: Vec<NodeId> },
    /// elementwise product
    Mul { a: NodeId, b: NodeId },
    Concat { xs: Vec<NodeId> },
    Slice { x: NodeId, start: usize, len: usize },
    /// row of a [r,c] matrix as a [c] vector
    RowSelect { m: NodeId, row: usize },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Softmax { x: NodeId },
    /// out = -log(p[gold]), p a probability vector
    CrossEntropy { p: NodeId, gold: usize },
    /// out = max(x,0) - x*y + ln(1 + e^{-|x|}) for scalar logit x
    BceWithLogit { logit: NodeId, target: f64 },
    /// elementwise mean of same-shaped vectors
    MeanOf { xs: Vec<NodeId> },
    /// out = Σ_k weights[k] · xs[k]
    WeightedSum { weights: NodeId, xs: Vec<NodeId> },
    /// scalars gathered into a vector
    StackScalars { xs: Vec<NodeId> },
    Dot { a: NodeId, b: NodeId },
    /// mask entries are 0.0 or 1/(1-ratio)
    Dropout { x: NodeId, mask: Vec<f64> },
}

struct Record {
    op: Op,
    out: NodeId,
}

/// Append-order tape of operations over tensors.
///
/// Confined to one thread for the duration of a forward/backward pass; a new
/// graph is built per document.
#[derive(Default)]
pub struct Graph {
    tensors: Vec<Tensor>,
    records: Vec<Record>,
    lease_index: HashMap<ParamId, NodeId>,
    leases: Vec<(ParamId, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push_tensor(&mut self, t: Tensor) -> NodeId {
        let id = NodeId(self.tensors.len());
        self.tensors.push(t);
        id
    }

    fn record(&mut self, op: Op, out: Tensor) -> NodeId {
        let id = self.push_tensor(out);
        self.records.push(Record { op, out: id });
        id
    }

    /// Leaf node with no inputs. Gradient is tracked but flows nowhere.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        self.push_tensor(Tensor::new(shape, values))
    }

    pub fn vector(&mut self, values: Vec<f64>) -> NodeId {
        let n = values.len();
        self.constant(vec![n], values)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(vec![], vec![v])
    }

    pub fn zero_vector(&mut self, dim: usize) -> NodeId {
        self.vector(vec![0.0; dim])
    }

    /// Lease a persistent parameter into this graph. The first call copies
    /// the parameter values; later calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.lease_index.get(&id) {
            return node;
        }
        let t = store.tensor(id);
        let node = self.push_tensor(Tensor::new(t.shape().to_vec(), t.values.clone()));
        self.lease_index.insert(id, node);
        self.leases.push((id, node));
        node
    }

    /// Parameters leased into this graph, in first-use order, paired with
    /// their gradient accumulated by `backward`.
    pub fn leased_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.leases
            .iter()
            .map(move |&(pid, node)| (pid, self.tensors[node.0].grad.as_slice()))
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.tensors[id.0].values
    }

    pub fn value_scalar(&self, id: NodeId) -> f64 {
        debug_assert!(self.tensors[id.0].is_scalar());
        self.tensors[id.0].values[0]
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.tensors[id.0].grad
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.tensors[id.0].shape()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn want_rank(&self, op: &'static str, id: NodeId, rank: usize) -> Result<(), DiffError> {
        let shape = self.shape(id);
        if shape.len() != rank {
            return Err(DiffError::RankMismatch {
                op,
                expected: rank,
                shape: shape.to_vec(),
            });
        }
        Ok(())
    }

    fn want_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── Operations ──────────────────────────────────────────────────

    /// out = W·x + b
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.want_rank("affine", w, 2)?;
        self.want_rank("affine", x, 1)?;
        self.want_rank("affine", b, 1)?;
        let (m, n) = (self.shape(w)[0], self.shape(w)[1]);
        if self.shape(x)[0] != n {
            return Err(DiffError::ShapeMismatch {
                op: "affine",
                lhs: self.shape(w).to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        if self.shape(b)[0] != m {
            return Err(DiffError::ShapeMismatch {
                op: "affine",
                lhs: self.shape(w).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = self.value(b).to_vec();
        let wv = self.value(w);
        let xv = self.value(x);
        for i in 0..m {
            let row = &wv[i * n..(i + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += row[j] * xv[j];
            }
            out[i] += s;
        }
        Ok(self.record(Op::Affine { x, w, b }, Tensor::new(vec![m], out)))
    }

    /// out = W·x (no bias)
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId, DiffError> {
        self.want_rank("matvec", w, 2)?;
        self.want_rank("matvec", x, 1)?;
        let (m, n) = (self.shape(w)[0], self.shape(w)[1]);
        if self.shape(x)[0] != n {
            return Err(DiffError::ShapeMismatch {
                op: "matvec",
                lhs: self.shape(w).to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        let wv = self.value(w);
        let xv = self.value(x);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wv[i * n..(i + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += row[j] * xv[j];
            }
            out[i] = s;
        }
        Ok(self.record(Op::MatVec { w, x }, Tensor::new(vec![m], out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.want_same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(Op::Add { a, b }, Tensor::new(shape, out)))
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId, DiffError> {
        if xs.is_empty() {
            return Err(DiffError::EmptyInput { op: "add_n" });
        }
        for &x in &xs[1..] {
            self.want_same_shape("add_n", xs[0], x)?;
        }
        let mut out = self.value(xs[0]).to_vec();
        for &x in &xs[1..] {
            for (o, v) in out.iter_mut().zip(self.value(x)) {
                *o += v;
            }
        }
        let shape = self.shape(xs[0]).to_vec();
        Ok(self.record(Op::AddN { xs: xs.to_vec() }, Tensor::new(shape, out)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.want_same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(Op::Mul { a, b }, Tensor::new(shape, out)))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId, DiffError> {
        if xs.is_empty() {
            return Err(DiffError::EmptyInput { op: "concat" });
        }
        let mut out = Vec::new();
        for &x in xs {
            self.want_rank("concat", x, 1)?;
            out.extend_from_slice(self.value(x));
        }
        let n = out.len();
        Ok(self.record(Op::Concat { xs: xs.to_vec() }, Tensor::new(vec![n], out)))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        self.want_rank("slice", x, 1)?;
        let total = self.shape(x)[0];
        if start + len > total {
            return Err(DiffError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                len: total,
            });
        }
        let out = self.value(x)[start..start + len].to_vec();
        Ok(self.record(Op::Slice { x, start, len }, Tensor::new(vec![len], out)))
    }

    pub fn row(&mut self, m: NodeId, row: usize) -> Result<NodeId, DiffError> {
        self.want_rank("row", m, 2)?;
        let (rows, cols) = (self.shape(m)[0], self.shape(m)[1]);
        if row >= rows {
            return Err(DiffError::IndexOutOfRange {
                op: "row",
                index: row,
                len: rows,
            });
        }
        let out = self.value(m)[row * cols..(row + 1) * cols].to_vec();
        Ok(self.record(Op::RowSelect { m, row }, Tensor::new(vec![cols], out)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.record(Op::Sigmoid { x }, Tensor::new(shape, out)))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.record(Op::Tanh { x }, Tensor::new(shape, out)))
    }

    /// Shift-invariant softmax over a rank-1 vector.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.want_rank("softmax", x, 1)?;
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(DiffError::EmptyInput { op: "softmax" });
        }
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = xv.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= sum);
        let n = out.len();
        Ok(self.record(Op::Softmax { x }, Tensor::new(vec![n], out)))
    }

    /// out = -log(p[gold]) for a probability vector p.
    pub fn cross_entropy(&mut self, p: NodeId, gold: usize) -> Result<NodeId, DiffError> {
        self.want_rank("cross_entropy", p, 1)?;
        let pv = self.value(p);
        if gold >= pv.len() {
            return Err(DiffError::GoldIndexOutOfRange {
                gold,
                len: pv.len(),
            });
        }
        let out = -pv[gold].ln();
        Ok(self.record(Op::CrossEntropy { p, gold }, Tensor::scalar(out)))
    }

    /// Binary cross-entropy of sigmoid(logit) against `target`, fused for
    /// stability. Same value as `-(y ln σ(x) + (1-y) ln(1-σ(x)))`.
    pub fn bce_with_logit(&mut self, logit: NodeId, target: f64) -> Result<NodeId, DiffError> {
        if self.tensor(logit).len() != 1 {
            return Err(DiffError::RankMismatch {
                op: "bce_with_logit",
                expected: 0,
                shape: self.shape(logit).to_vec(),
            });
        }
        let x = self.value(logit)[0];
        let out = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
        Ok(self.record(Op::BceWithLogit { logit, target }, Tensor::scalar(out)))
    }

    /// Elementwise mean of same-shaped vectors.
    pub fn mean_of(&mut self, xs: &[NodeId]) -> Result<NodeId, DiffError> {
        if xs.is_empty() {
            return Err(DiffError::EmptyInput { op: "mean_of" });
        }
        for &x in &xs[1..] {
            self.want_same_shape("mean_of", xs[0], x)?;
        }
        let n = xs.len() as f64;
        let mut out = self.value(xs[0]).to_vec();
        for &x in &xs[1..] {
            for (o, v) in out.iter_mut().zip(self.value(x)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
        let shape = self.shape(xs[0]).to_vec();
        Ok(self.record(Op::MeanOf { xs: xs.to_vec() }, Tensor::new(shape, out)))
    }

    /// out = Σ_k weights[k]·xs[k]; `weights` is a vector of length `xs.len()`.
    pub fn weighted_sum(&mut self, weights: NodeId, xs: &[NodeId]) -> Result<NodeId, DiffError> {
        self.want_rank("weighted_sum", weights, 1)?;
        if xs.is_empty() {
            return Err(DiffError::EmptyInput { op: "weighted_sum" });
        }
        if self.shape(weights)[0] != xs.len() {
            return Err(DiffError::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.shape(weights).to_vec(),
                rhs: vec![xs.len()],
            });
        }
        for &x in &xs[1..] {
            self.want_same_shape("weighted_sum", xs[0], x)?;
        }
        let dim = self.tensor(xs[0]).len();
        let mut out = vec![0.0; dim];
        let wv = self.value(weights).to_vec();
        for (k, &x) in xs.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.value(x)) {
                *o += wv[k] * v;
            }
        }
        Ok(self.record(
            Op::WeightedSum {
                weights,
                xs: xs.to_vec(),
            },
            Tensor::new(vec![dim], out),
        ))
    }

    /// Gather scalar nodes into one vector.
    pub fn stack_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId, DiffError> {
        if xs.is_empty() {
            return Err(DiffError::EmptyInput { op: "stack_scalars" });
        }
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            if self.tensor(x).len() != 1 {
                return Err(DiffError::RankMismatch {
                    op: "stack_scalars",
                    expected: 0,
                    shape: self.shape(x).to_vec(),
                });
            }
            out.push(self.value(x)[0]);
        }
        let n = out.len();
        Ok(self.record(Op::StackScalars { xs: xs.to_vec() }, Tensor::new(vec![n], out)))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.want_rank("dot", a, 1)?;
        self.want_same_shape("dot", a, b)?;
        let out: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.record(Op::Dot { a, b }, Tensor::scalar(out)))
    }

    /// Inverted dropout. In training each element survives with probability
    /// `1 - ratio` and is scaled by `1/(1-ratio)`; in eval mode (or ratio 0)
    /// the input node is returned unchanged.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        ratio: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId, DiffError> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(DiffError::InvalidDropoutRatio(ratio));
        }
        if !training || ratio == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - ratio;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..self.tensor(x).len())
            .map(|_| if rng.gen::<f64>() < ratio { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.record(Op::Dropout { x, mask }, Tensor::new(shape, out)))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate into each
    /// tensor's `grad`; running backward twice without zeroing doubles them.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), DiffError> {
        if !self.tensor(loss).is_scalar() {
            return Err(DiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        // Scratch adjoints keep repeated backward passes linear: each pass
        // computes d(loss)/d(node) from a fresh seed, then adds into grad.
        let mut adj: Vec<Vec<f64>> = self.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        adj[loss.0][0] = 1.0;

        for rec in self.records.iter().rev() {
            let d = std::mem::take(&mut adj[rec.out.0]);
            if d.iter().all(|&v| v == 0.0) {
                adj[rec.out.0] = d;
                continue;
            }
            match &rec.op {
                Op::Affine { x, w, b } => {
                    let (m, n) = (self.tensors[w.0].shape()[0], self.tensors[w.0].shape()[1]);
                    let xv = &self.tensors[x.0].values;
                    let wv = &self.tensors[w.0].values;
                    {
                        let (dx, rest) = split_two(&mut adj, x.0, w.0);
                        for i in 0..m {
                            let di = d[i];
                            let row = &wv[i * n..(i + 1) * n];
                            for j in 0..n {
                                dx[j] += row[j] * di;
                                rest[i * n + j] += di * xv[j];
                            }
                        }
                    }
                    for (g, di) in adj[b.0].iter_mut().zip(&d) {
                        *g += di;
                    }
                }
                Op::MatVec { w, x } => {
                    let (m, n) = (self.tensors[w.0].shape()[0], self.tensors[w.0].shape()[1]);
                    let xv = &self.tensors[x.0].values;
                    let wv = &self.tensors[w.0].values;
                    let (dx, dw) = split_two(&mut adj, x.0, w.0);
                    for i in 0..m {
                        let di = d[i];
                        let row = &wv[i * n..(i + 1) * n];
                        for j in 0..n {
                            dx[j] += row[j] * di;
                            dw[i * n + j] += di * xv[j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (g, di) in adj[a.0].iter_mut().zip(&d) {
                        *g += di;
                    }
                    for (g, di) in adj[b.0].iter_mut().zip(&d) {
                        *g += di;
                    }
                }
                Op::AddN { xs } => {
                    for &x in xs {
                        for (g, di) in adj[x.0].iter_mut().zip(&d) {
                            *g += di;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.tensors[a.0].values.clone();
                    let bv = self.tensors[b.0].values.clone();
                    for ((g, di), v) in adj[a.0].iter_mut().zip(&d).zip(&bv) {
                        *g += di * v;
                    }
                    for ((g, di), v) in adj[b.0].iter_mut().zip(&d).zip(&av) {
                        *g += di * v;
                    }
                }
                Op::Concat { xs } => {
                    let mut offset = 0;
                    for &x in xs {
                        let len = self.tensors[x.0].len();
                        for (g, di) in adj[x.0].iter_mut().zip(&d[offset..offset + len]) {
                            *g += di;
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, start, len } => {
                    for (g, di) in adj[x.0][*start..start + len].iter_mut().zip(&d) {
                        *g += di;
                    }
                }
                Op::RowSelect { m, row } => {
                    let cols = self.tensors[m.0].shape()[1];
                    for (g, di) in adj[m.0][row * cols..(row + 1) * cols].iter_mut().zip(&d) {
                        *g += di;
                    }
                }
                Op::Sigmoid { x } => {
                    let out = &self.tensors[rec.out.0].values;
                    for ((g, di), s) in adj[x.0].iter_mut().zip(&d).zip(out) {
                        *g += di * s * (1.0 - s);
                    }
                }
                Op::Tanh { x } => {
                    let out = &self.tensors[rec.out.0].values;
                    for ((g, di), t) in adj[x.0].iter_mut().zip(&d).zip(out) {
                        *g += di * (1.0 - t * t);
                    }
                }
                Op::Softmax { x } => {
                    let p = &self.tensors[rec.out.0].values;
                    let inner: f64 = d.iter().zip(p).map(|(di, pi)| di * pi).sum();
                    for ((g, di), pi) in adj[x.0].iter_mut().zip(&d).zip(p) {
                        *g += pi * (di - inner);
                    }
                }
                Op::CrossEntropy { p, gold } => {
                    let pg = self.tensors[p.0].values[*gold];
                    adj[p.0][*gold] += -d[0] / pg;
                }
                Op::BceWithLogit { logit, target } => {
                    let x = self.tensors[logit.0].values[0];
                    adj[logit.0][0] += d[0] * (stable_sigmoid(x) - target);
                }
                Op::MeanOf { xs } => {
                    let inv = 1.0 / xs.len() as f64;
                    for &x in xs {
                        for (g, di) in adj[x.0].iter_mut().zip(&d) {
                            *g += di * inv;
                        }
                    }
                }
                Op::WeightedSum { weights, xs } => {
                    let wv = self.tensors[weights.0].values.clone();
                    for (k, &x) in xs.iter().enumerate() {
                        let xv = &self.tensors[x.0].values;
                        let dw: f64 = d.iter().zip(xv).map(|(di, vi)| di * vi).sum();
                        adj[weights.0][k] += dw;
                        for (g, di) in adj[x.0].iter_mut().zip(&d) {
                            *g += wv[k] * di;
                        }
                    }
                }
                Op::StackScalars { xs } => {
                    for (k, &x) in xs.iter().enumerate() {
                        adj[x.0][0] += d[k];
                    }
                }
                Op::Dot { a, b } => {
                    let av = self.tensors[a.0].values.clone();
                    let bv = self.tensors[b.0].values.clone();
                    for (g, v) in adj[a.0].iter_mut().zip(&bv) {
                        *g += d[0] * v;
                    }
                    for (g, v) in adj[b.0].iter_mut().zip(&av) {
                        *g += d[0] * v;
                    }
                }
                Op::Dropout { x, mask } => {
                    for ((g, di), m) in adj[x.0].iter_mut().zip(&d).zip(mask) {
                        *g += di * m;
                    }
                }
            }
            adj[rec.out.0] = d;
        }

        for (t, a) in self.tensors.iter_mut().zip(&adj) {
            for (g, v) in t.grad.iter_mut().zip(a) {
                *g += v;
            }
        }
        Ok(())
    }
}

/// Disjoint mutable views of two adjoint buffers.
fn split_two(adj: &mut [Vec<f64>], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(i, j, "operation reads and writes the same node");
    if i < j {
        let (lo, hi) = adj.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = adj.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar function of a flat input.
    fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            g[i] = (up - down) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn affine_identity() {
        let mut g = Graph::new();
        let w = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = g.vector(vec![0.0, 0.0]);
        let x = g.vector(vec![3.0, 4.0]);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y), &[3.0, 4.0]);
    }

    #[test]
    fn affine_hand_sum() {
        let mut g = Graph::new();
        let w = g.constant(vec![1, 2], vec![1.0, 1.0]);
        let b = g.vector(vec![1.0]);
        let x = g.vector(vec![2.0, 3.0]);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y), &[6.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let w = g.constant(vec![2, 3], vec![0.0; 6]);
        let b = g.vector(vec![0.0, 0.0]);
        let x = g.vector(vec![1.0, 2.0]);
        let err = g.affine(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn affine_matches_finite_difference_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let wv: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xv: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Scalar probe: loss = Σ_i c_i out_i, with fixed probe weights c.
        let probe = [0.3, -0.7, 1.1, 0.5, -0.2];

        // Full parameter vector: [w, b, x]
        let flat: Vec<f64> = wv.iter().chain(&bv).chain(&xv).cloned().collect();
        let mut eval = |p: &[f64]| {
            let mut g = Graph::new();
            let w = g.constant(vec![5, 3], p[0..15].to_vec());
            let b = g.vector(p[15..20].to_vec());
            let x = g.vector(p[20..23].to_vec());
            let y = g.affine(x, w, b).unwrap();
            let c = g.vector(probe.to_vec());
            let loss = g.dot(y, c).unwrap();
            g.value_scalar(loss)
        };
        let fd = finite_diff(&mut eval, &flat, 1e-5);

        let mut g = Graph::new();
        let w = g.constant(vec![5, 3], wv);
        let b = g.vector(bv);
        let x = g.vector(xv);
        let y = g.affine(x, w, b).unwrap();
        let c = g.vector(probe.to_vec());
        let loss = g.dot(y, c).unwrap();
        g.backward(loss).unwrap();
        let analytic: Vec<f64> = g
            .grad(w)
            .iter()
            .chain(g.grad(b))
            .chain(g.grad(x))
            .cloned()
            .collect();
        for (a, f) in analytic.iter().zip(&fd) {
            assert!(rel_err(*a, *f) < 1e-6, "analytic {a} vs fd {f}");
        }
    }

    #[test]
    fn softmax_symmetry_and_definition() {
        let mut g = Graph::new();
        let x = g.vector(vec![0.0, 0.0, 0.0]);
        let p = g.softmax(x).unwrap();
        for v in g.value(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let y = g.vector(vec![2.0f64.ln(), 0.0, 0.0]);
        let p2 = g.softmax(y).unwrap();
        let got = g.value(p2);
        assert!((got[0] - 0.5).abs() < 1e-15);
        assert!((got[1] - 0.25).abs() < 1e-15);
        assert!((got[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_inputs_no_overflow() {
        let mut g = Graph::new();
        let x = g.vector(vec![1000.0, 1000.0]);
        let p = g.softmax(x).unwrap();
        assert_eq!(g.value(p), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::new();
        let x = g.vector(vec![0.3, -1.2, 2.5]);
        let p1 = g.softmax(x).unwrap();
        let shifted = g.vector(vec![0.3 + 7.0, -1.2 + 7.0, 2.5 + 7.0]);
        let p2 = g.softmax(shifted).unwrap();
        for (a, b) in g.value(p1).iter().zip(g.value(p2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        let mut g = Graph::new();
        let x = g.vector(vec![]);
        assert!(g.softmax(x).is_err());
    }

    #[test]
    fn cross_entropy_certainty_and_uniform() {
        let mut g = Graph::new();
        let p = g.vector(vec![1.0, 0.0, 0.0]);
        let l = g.cross_entropy(p, 0).unwrap();
        assert_eq!(g.value_scalar(l), 0.0);

        let u = g.vector(vec![0.25; 4]);
        for gold in 0..4 {
            let l = g.cross_entropy(u, gold).unwrap();
            assert!((g.value_scalar(l) - 4.0f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_gold_out_of_range() {
        let mut g = Graph::new();
        let p = g.vector(vec![0.5, 0.5]);
        assert_eq!(
            g.cross_entropy(p, 2).unwrap_err(),
            DiffError::GoldIndexOutOfRange { gold: 2, len: 2 }
        );
    }

    #[test]
    fn cross_entropy_logit_gradient_is_p_minus_onehot() {
        let logits = [0.7, -0.4, 1.3, 0.1];
        let gold = 2;
        let mut g = Graph::new();
        let z = g.vector(logits.to_vec());
        let p = g.softmax(z).unwrap();
        let l = g.cross_entropy(p, gold).unwrap();
        g.backward(l).unwrap();
        let pv = g.value(p).to_vec();
        for (i, dz) in g.grad(z).iter().enumerate() {
            let expect = pv[i] - if i == gold { 1.0 } else { 0.0 };
            assert!((dz - expect).abs() < 1e-12, "dz[{i}]={dz} expect {expect}");
        }

        // Independent finite-difference oracle on the same composite.
        let mut eval = |z: &[f64]| {
            let mut g = Graph::new();
            let zn = g.vector(z.to_vec());
            let p = g.softmax(zn).unwrap();
            let l = g.cross_entropy(p, gold).unwrap();
            g.value_scalar(l)
        };
        let fd = finite_diff(&mut eval, &logits, 1e-5);
        for (a, f) in g.grad(z).iter().zip(&fd) {
            assert!(rel_err(*a, *f) < 1e-6);
        }
    }

    #[test]
    fn sigmoid_midpoint_saturation_gradient() {
        let mut g = Graph::new();
        let zero = g.scalar(0.0);
        let s = g.sigmoid(zero).unwrap();
        assert_eq!(g.value_scalar(s), 0.5);

        let big = g.scalar(50.0);
        let s2 = g.sigmoid(big).unwrap();
        assert!((g.value_scalar(s2) - 1.0).abs() < 1e-12);

        g.backward(s).unwrap();
        assert!((g.grad(zero)[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn bce_with_logit_matches_direct_formula() {
        for (x, y) in [(0.8, 1.0), (-1.4, 0.0), (3.0, 1.0), (0.0, 0.0)] {
            let mut g = Graph::new();
            let l = g.scalar(x);
            let loss = g.bce_with_logit(l, y).unwrap();
            let p = stable_sigmoid(x);
            let direct = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((g.value_scalar(loss) - direct).abs() < 1e-12);
            g.backward(loss).unwrap();
            assert!((g.grad(l)[0] - (p - y)).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_ratio_zero_and_eval_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.vector(vec![1.0, 2.0, 3.0]);
        let same = g.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(same, x);
        let same2 = g.dropout(x, 0.3, false, &mut rng).unwrap();
        assert_eq!(same2, x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_empirical_zero_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut g = Graph::new();
        let x = g.vector(vec![1.0; n]);
        let y = g.dropout(x, 0.3, true, &mut rng).unwrap();
        let zeros = g.value(y).iter().filter(|&&v| v == 0.0).count();
        let rate = zeros as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.01, "rate {rate}");
        // Survivors are scaled by 1/(1-ratio).
        let survivor = g.value(y).iter().find(|&&v| v != 0.0).unwrap();
        assert!((survivor - 1.0 / 0.7).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_accumulates_exactly_double() {
        let mut g = Graph::new();
        let x = g.vector(vec![0.4, -0.9]);
        let y = g.tanh(x).unwrap();
        let c = g.vector(vec![1.0, 2.0]);
        let loss = g.dot(y, c).unwrap();
        g.backward(loss).unwrap();
        let first = g.grad(x).to_vec();
        assert_eq!(g.grad(loss), &[1.0]);
        g.backward(loss).unwrap();
        for (once, twice) in first.iter().zip(g.grad(x)) {
            assert_eq!(*twice, 2.0 * once);
        }
        assert_eq!(g.grad(loss), &[2.0]);
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        // mean_of, weighted_sum, stack_scalars, mul, concat, slice, row in
        // one composite graph against the FD oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flat: Vec<f64> = (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let build = |p: &[f64]| -> (Graph, NodeId, Vec<NodeId>) {
            let mut g = Graph::new();
            let a = g.vector(p[0..3].to_vec());
            let b = g.vector(p[3..6].to_vec());
            let c = g.vector(p[6..9].to_vec());
            let m = g.constant(vec![2, 3], p[9..15].to_vec());
            let w2 = g.vector(p[15..17].to_vec());
            let mean = g.mean_of(&[a, b, c]).unwrap();
            let r0 = g.row(m, 0).unwrap();
            let r1 = g.row(m, 1).unwrap();
            let alpha = g.softmax(w2).unwrap();
            let ws = g.weighted_sum(alpha, &[r0, r1]).unwrap();
            let prod = g.mul(mean, ws).unwrap();
            let cat = g.concat(&[prod, mean]).unwrap();
            let sl = g.slice(cat, 1, 4).unwrap();
            let s0 = g.dot(sl, sl).unwrap();
            let tanh = g.tanh(s0).unwrap();
            let stack = g.stack_scalars(&[s0, tanh]).unwrap();
            let ones = g.vector(vec![1.0, 0.5]);
            let loss = g.dot(stack, ones).unwrap();
            (g, loss, vec![a, b, c, m, w2])
        };
        let mut eval = |p: &[f64]| {
            let (g, loss, _) = build(p);
            g.value_scalar(loss)
        };
        let fd = finite_diff(&mut eval, &flat, 1e-5);
        let (mut g, loss, nodes) = build(&flat);
        g.backward(loss).unwrap();
        let analytic: Vec<f64> = nodes.iter().flat_map(|&n| g.grad(n).to_vec()).collect();
        for (i, (a, f)) in analytic.iter().zip(&fd).enumerate() {
            assert!(rel_err(*a, *f) < 1e-4, "grad[{i}]: analytic {a} vs fd {f}");
        }
    }

    #[test]
    fn tensor_shape_invariant() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.len(), 6);
        assert_eq!(t.grad.len(), 6);
        let s = Tensor::scalar(4.2);
        assert!(s.is_scalar());
        assert_eq!(s.len(), 1);
    }
}

//! Reverse-mode differentiation over a recorded computation.
//!
//! Every forward operation appends one step to the tape and allocates a
//! node holding the output value. `backward` replays the steps in reverse,
//! accumulating vector-Jacobian products into per-node gradient slots.
//! A tape belongs to a single forward/backward pass on one thread.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{self, Tensor, TensorError, COSINE_NORM_FLOOR};

#[derive(Debug, Error)]
pub enum TapeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Probability floor used inside the negative-log-likelihood op.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    /// out = A @ B
    Matmul { a: NodeId, b: NodeId },
    /// out = X + 1 b^T (bias broadcast over rows)
    AddRowBias { x: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    RowSoftmax { x: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    /// out_ij = cosine(row_i(a), row_j(b)) with a zero-norm guard
    CosineSim { a: NodeId, b: NodeId },
    /// out row i = s_i * x row i (per-row scalar gate)
    ScaleRows { x: NodeId, s: NodeId },
    MeanRows { x: NodeId },
    RepeatRows { x: NodeId, n: usize },
    /// out row t = table row ids[t]
    EmbedLookup { table: NodeId, ids: Vec<usize> },
    /// out = -ln(max(p[label], floor)) for a 1-by-C probability row
    Nll { probs: NodeId, label: usize },
    /// out = sum(x^2), scalar
    SumSquares { x: NodeId },
    /// out = (1/k) * sum of k same-shaped inputs
    MeanOf { xs: Vec<NodeId> },
    /// out = a + c * b
    AddScaled { a: NodeId, b: NodeId, c: f64 },
    Reshape { x: NodeId },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
}

struct Step {
    op: Op,
    out: NodeId,
}

/// Gradients of a scalar loss with respect to named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    steps: Vec<Step>,
    params: Vec<(String, NodeId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, grad: None });
        id
    }

    fn record(&mut self, op: Op, value: Tensor) -> NodeId {
        let out = self.push(value);
        self.steps.push(Step { op, out });
        out
    }

    /// Register a constant input (no gradient tracking back to a name).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value)
    }

    /// Register a named trainable parameter; the value is copied in.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        let id = self.push(value.clone());
        self.params.push((name.to_string(), id));
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Values feeding every relu recorded so far, in recording order.
    /// Finite-difference checks use these to detect kink crossings.
    pub fn relu_inputs(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for step in &self.steps {
            if let Op::Relu { x } = step.op {
                out.extend_from_slice(self.nodes[x.0].value.data());
            }
        }
        out
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.record(Op::Matmul { a, b }, v))
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TapeError> {
        let v = tensor::add_row_bias(self.value(x), self.value(bias))?;
        Ok(self.record(Op::AddRowBias { x, bias }, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.record(Op::Add { a, b }, v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let v = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.record(Op::Sub { a, b }, v))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = tensor::relu(self.value(x));
        self.record(Op::Relu { x }, v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = tensor::sigmoid(self.value(x));
        self.record(Op::Sigmoid { x }, v)
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let v = tensor::row_softmax(self.value(x))?;
        Ok(self.record(Op::RowSoftmax { x }, v))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let v = tensor::concat_cols(self.value(a), self.value(b))?;
        Ok(self.record(Op::ConcatCols { a, b }, v))
    }

    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let v = tensor::cosine_similarity(self.value(a), self.value(b))?;
        Ok(self.record(Op::CosineSim { a, b }, v))
    }

    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TapeError> {
        let v = tensor::scale_rows(self.value(x), self.value(s))?;
        Ok(self.record(Op::ScaleRows { x, s }, v))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let v = tensor::mean_rows(self.value(x))?;
        Ok(self.record(Op::MeanRows { x }, v))
    }

    pub fn repeat_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId, TapeError> {
        let v = tensor::repeat_rows(self.value(x), n)?;
        Ok(self.record(Op::RepeatRows { x, n }, v))
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TapeError> {
        let (vocab, d) = self.value(table).dims2("embed_lookup")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TapeError::TokenOutOfVocab { id, vocab });
            }
            data.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let v = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.record(
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
            v,
        ))
    }

    pub fn nll(&mut self, probs: NodeId, label: usize) -> Result<NodeId, TapeError> {
        let (rows, classes) = self.value(probs).dims2("nll")?;
        if rows != 1 {
            return Err(TensorError::BadRank {
                op: "nll",
                expected: 2,
                shape: self.value(probs).shape().to_vec(),
            }
            .into());
        }
        if label >= classes {
            return Err(TapeError::LabelOutOfRange { label, classes });
        }
        let p = self.value(probs).data()[label].max(PROB_FLOOR);
        let v = Tensor::scalar(-p.ln());
        Ok(self.record(Op::Nll { probs, label }, v))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).data().iter().map(|a| a * a).sum());
        self.record(Op::SumSquares { x }, v)
    }

    pub fn mean_of(&mut self, xs: &[NodeId]) -> Result<NodeId, TapeError> {
        assert!(!xs.is_empty(), "mean_of needs at least one input");
        let shape = self.value(xs[0]).shape().to_vec();
        let mut acc = vec![0.0; self.value(xs[0]).numel()];
        for &x in xs {
            let t = self.value(x);
            if t.shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "mean_of",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                }
                .into());
            }
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        let inv = 1.0 / xs.len() as f64;
        for a in acc.iter_mut() {
            *a *= inv;
        }
        let v = Tensor::new(shape, acc)?;
        Ok(self.record(Op::MeanOf { xs: xs.to_vec() }, v))
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> Result<NodeId, TapeError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add_scaled",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            }
            .into());
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + c * y)
            .collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(Op::AddScaled { a, b, c }, v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TapeError> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.record(Op::Reshape { x }, v))
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, id: NodeId, grad: Tensor) {
        match &mut self.nodes[id.0].grad {
            Some(existing) => {
                let sum = tensor::add(existing, &grad).expect("gradient shape drift");
                *existing = sum;
            }
            None => self.nodes[id.0].grad = Some(grad),
        }
    }

    fn out_grad(&self, id: NodeId) -> Option<Tensor> {
        self.nodes[id.0].grad.clone()
    }

    /// Run reverse accumulation from a scalar loss node (seed 1.0) and
    /// return gradients for every registered parameter. Parameters the
    /// loss does not reach get zero gradients of matching shape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, TapeError> {
        if !self.value(loss).is_scalar() {
            return Err(TapeError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.nodes[loss.0].grad = Some(self.value(loss).map(|_| 1.0));

        for idx in (0..self.steps.len()).rev() {
            let op = self.steps[idx].op.clone();
            let out = self.steps[idx].out;
            let Some(d_out) = self.out_grad(out) else {
                continue;
            };
            self.backward_step(&op, out, &d_out)?;
        }

        let mut grads = BTreeMap::new();
        for (name, id) in &self.params {
            let g = match &self.nodes[id.0].grad {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
            };
            grads.insert(name.clone(), g);
        }
        Ok(Gradients(grads))
    }

    fn backward_step(&mut self, op: &Op, out: NodeId, d_out: &Tensor) -> Result<(), TapeError> {
        match op {
            Op::Matmul { a, b } => {
                let bt = tensor::transpose(self.value(*b))?;
                let d_a = tensor::matmul(d_out, &bt)?;
                let at = tensor::transpose(self.value(*a))?;
                let d_b = tensor::matmul(&at, d_out)?;
                self.accumulate(*a, d_a);
                self.accumulate(*b, d_b);
            }
            Op::AddRowBias { x, bias } => {
                let (r, c) = d_out.dims2("add_row_bias_grad")?;
                let mut d_bias = vec![0.0; c];
                for i in 0..r {
                    for (db, &g) in d_bias.iter_mut().zip(&d_out.data()[i * c..(i + 1) * c]) {
                        *db += g;
                    }
                }
                self.accumulate(*x, d_out.clone());
                self.accumulate(*bias, Tensor::new(vec![c], d_bias)?);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, d_out.clone());
                self.accumulate(*b, d_out.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, d_out.clone());
                self.accumulate(*b, d_out.map(|g| -g));
            }
            Op::Relu { x } => {
                let mask: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(d_out.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(*x, Tensor::new(shape, mask)?);
            }
            Op::Sigmoid { x } => {
                let y = self.value(out).clone();
                let data: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(d_out.data())
                    .map(|(&yi, &g)| g * yi * (1.0 - yi))
                    .collect();
                self.accumulate(*x, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::RowSoftmax { x } => {
                let y = self.value(out).clone();
                let (r, c) = y.dims2("row_softmax_grad")?;
                let mut d_x = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &d_out.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d_x[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(*x, Tensor::new(vec![r, c], d_x)?);
            }
            Op::ConcatCols { a, b } => {
                let (r, ca) = self.value(*a).dims2("concat_grad")?;
                let (_, cb) = self.value(*b).dims2("concat_grad")?;
                let mut d_a = vec![0.0; r * ca];
                let mut d_b = vec![0.0; r * cb];
                let c = ca + cb;
                for i in 0..r {
                    d_a[i * ca..(i + 1) * ca].copy_from_slice(&d_out.data()[i * c..i * c + ca]);
                    d_b[i * cb..(i + 1) * cb]
                        .copy_from_slice(&d_out.data()[i * c + ca..(i + 1) * c]);
                }
                self.accumulate(*a, Tensor::new(vec![r, ca], d_a)?);
                self.accumulate(*b, Tensor::new(vec![r, cb], d_b)?);
            }
            Op::CosineSim { a, b } => {
                let u = self.value(*a).clone();
                let v = self.value(*b).clone();
                let s = self.value(out).clone();
                let (p, d) = u.dims2("cosine_grad")?;
                let (q, _) = v.dims2("cosine_grad")?;
                let norm = |t: &Tensor, i: usize| -> f64 {
                    t.data()[i * d..(i + 1) * d]
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        .sqrt()
                };
                let mut d_u = vec![0.0; p * d];
                let mut d_v = vec![0.0; q * d];
                let un: Vec<f64> = (0..p).map(|i| norm(&u, i)).collect();
                let vn: Vec<f64> = (0..q).map(|j| norm(&v, j)).collect();
                for i in 0..p {
                    if un[i] < COSINE_NORM_FLOOR {
                        continue;
                    }
                    for j in 0..q {
                        if vn[j] < COSINE_NORM_FLOOR {
                            continue;
                        }
                        let g = d_out.data()[i * q + j];
                        if g == 0.0 {
                            continue;
                        }
                        let sij = s.data()[i * q + j];
                        let urow = &u.data()[i * d..(i + 1) * d];
                        let vrow = &v.data()[j * d..(j + 1) * d];
                        for k in 0..d {
                            d_u[i * d + k] +=
                                g * (vrow[k] / (un[i] * vn[j]) - sij * urow[k] / (un[i] * un[i]));
                            d_v[j * d + k] +=
                                g * (urow[k] / (un[i] * vn[j]) - sij * vrow[k] / (vn[j] * vn[j]));
                        }
                    }
                }
                self.accumulate(*a, Tensor::new(vec![p, d], d_u)?);
                self.accumulate(*b, Tensor::new(vec![q, d], d_v)?);
            }
            Op::ScaleRows { x, s } => {
                let xv = self.value(*x).clone();
                let sv = self.value(*s).clone();
                let (n, d) = xv.dims2("scale_rows_grad")?;
                let mut d_x = vec![0.0; n * d];
                let mut d_s = vec![0.0; n];
                for i in 0..n {
                    let si = sv.data()[i];
                    for j in 0..d {
                        let g = d_out.data()[i * d + j];
                        d_x[i * d + j] = g * si;
                        d_s[i] += g * xv.data()[i * d + j];
                    }
                }
                self.accumulate(*x, Tensor::new(vec![n, d], d_x)?);
                self.accumulate(*s, Tensor::new(vec![n, 1], d_s)?);
            }
            Op::MeanRows { x } => {
                let (n, d) = self.value(*x).dims2("mean_rows_grad")?;
                let inv = 1.0 / n as f64;
                let mut d_x = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        d_x[i * d + j] = d_out.data()[j] * inv;
                    }
                }
                self.accumulate(*x, Tensor::new(vec![n, d], d_x)?);
            }
            Op::RepeatRows { x, n } => {
                let (_, d) = self.value(*x).dims2("repeat_rows_grad")?;
                let mut d_x = vec![0.0; d];
                for i in 0..*n {
                    for j in 0..d {
                        d_x[j] += d_out.data()[i * d + j];
                    }
                }
                self.accumulate(*x, Tensor::new(vec![1, d], d_x)?);
            }
            Op::EmbedLookup { table, ids } => {
                let (vocab, d) = self.value(*table).dims2("embed_grad")?;
                let mut d_t = vec![0.0; vocab * d];
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        d_t[id * d + j] += d_out.data()[t * d + j];
                    }
                }
                self.accumulate(*table, Tensor::new(vec![vocab, d], d_t)?);
            }
            Op::Nll { probs, label } => {
                let pv = self.value(*probs).clone();
                let (_, c) = pv.dims2("nll_grad")?;
                let mut d_p = vec![0.0; c];
                let p = pv.data()[*label];
                if p > PROB_FLOOR {
                    d_p[*label] = -d_out.item() / p;
                }
                self.accumulate(*probs, Tensor::new(vec![1, c], d_p)?);
            }
            Op::SumSquares { x } => {
                let g = d_out.item();
                let d_x = self.value(*x).map(|v| 2.0 * v * g);
                self.accumulate(*x, d_x);
            }
            Op::MeanOf { xs } => {
                let inv = 1.0 / xs.len() as f64;
                let share = d_out.map(|g| g * inv);
                for &x in xs {
                    self.accumulate(x, share.clone());
                }
            }
            Op::AddScaled { a, b, c } => {
                self.accumulate(*a, d_out.clone());
                self.accumulate(*b, d_out.map(|g| g * c));
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(*x, d_out.reshaped(shape)?);
            }
        }
        Ok(())
    }
}

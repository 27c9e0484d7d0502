use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionRecord, AttentionRole};
use crate::error::{Error, Result};

use super::kernels::{matmul_nt_into, matmul_tn_into, ordered_sum};
use super::{Gradients, ParamId, ParamStore, Real, Tensor, NEG_INF};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Attend(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Dropout(Var, Vec<T>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        bias: Var,
    },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        pad: Option<usize>,
    },
    MeanRows(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in execution order so gradients can be replayed in
/// strict reverse order. One tape serves one forward pass.
pub struct Tape<'p, T: Real> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
    train: bool,
    rng: ChaCha8Rng,
    records: Option<Vec<AttentionRecord>>,
    context: (AttentionRole, usize, Option<usize>),
}

/// Gradients produced by [`Tape::backward`], kept for leaves only.
pub struct Grads<T> {
    by_node: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a leaf; leaves the loss does not depend on get zeros.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.by_node[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<'p, T: Real> Tape<'p, T> {
    /// An inference tape: no gradient bookkeeping, dropout disabled.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self::build(Some(store), false, false, 0)
    }

    /// A differentiable tape. `train` enables dropout, driven by `seed`.
    pub fn training(store: &'p ParamStore<T>, train: bool, seed: u64) -> Self {
        Self::build(Some(store), true, train, seed)
    }

    /// A tape with no parameter store, for free-standing computations.
    pub fn standalone(train: bool, seed: u64) -> Tape<'static, T> {
        Tape::build(None, true, train, seed)
    }

    fn build(store: Option<&'p ParamStore<T>>, grad_enabled: bool, train: bool, seed: u64) -> Self {
        Tape {
            param_vars: vec![None; store.map_or(0, ParamStore::len)],
            store,
            nodes: Vec::new(),
            grad_enabled,
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            records: None,
            context: (AttentionRole::EncoderSelf, 0, None),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("param node implies store").value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.grad_enabled;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf detached from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// The node for a stored parameter; created once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let trainable = self.store.expect("tape has a parameter store").get(id).trainable;
        let needs_grad = trainable && self.grad_enabled;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- attention recording -------------------------------------------

    pub fn enable_recording(&mut self) {
        self.records = Some(Vec::new());
    }

    pub fn is_recording(&self) -> bool {
        self.records.is_some()
    }

    pub fn set_attention_context(&mut self, role: AttentionRole, block: usize) {
        self.context = (role, block, None);
    }

    /// Context for guided attention over a secondary view.
    pub fn set_view_attention_context(&mut self, role: AttentionRole, block: usize, view: usize) {
        self.context = (role, block, Some(view));
    }

    pub(crate) fn record_attention(&mut self, head: usize, weights: Var) {
        if self.records.is_none() {
            return;
        }
        let w = self.value(weights).cast::<f64>();
        let (role, block, view) = self.context;
        if let Some(r) = self.records.as_mut() {
            r.push(AttentionRecord {
                role,
                block,
                head,
                view,
                weights: w,
            });
        }
    }

    pub fn take_records(&mut self) -> Vec<AttentionRecord> {
        self.records.take().unwrap_or_default()
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `weights (p×n) · values (n×q)` with each output entry summed over the
    /// n keys in value order, making the result independent of how the keys
    /// are arranged.
    pub fn attend(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (w, v) = (self.value(weights), self.value(values));
        let (p, n) = (w.rows(), w.cols());
        if v.rows() != n || w.shape().len() != 2 {
            return Err(Error::shape("attend", w.shape(), v.shape()));
        }
        let q = v.cols();
        let mut out = vec![T::zero(); p * q];
        let mut terms = vec![T::zero(); n];
        let (wd, vd) = (w.data(), v.data());
        for i in 0..p {
            for j in 0..q {
                for k in 0..n {
                    terms[k] = wd[i * n + k] * vd[k * q + j];
                }
                out[i * q + j] = ordered_sum(&mut terms);
            }
        }
        let out = Tensor::matrix(p, q, out)?;
        let ng = self.needs(weights) || self.needs(values);
        Ok(self.push(out, Op::Attend(weights, values), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(out, Op::Transpose(a), ng)
    }

    // ---- elementwise ------------------------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(name, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a length-q vector to every row of a p×q matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let c = xv.cols();
        let b = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * s).collect())
            .expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| T::one() / (T::one() + (-v).exp()));
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.tanh());
        let ng = self.needs(x);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Inverted dropout. Identity (the same handle) when the tape is not in
    /// training mode or `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mult: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mult).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout(x, mult), ng))
    }

    // ---- normalisation ----------------------------------------------------

    /// Row-wise softmax of `x + mask`. Rows whose every mask entry is the
    /// negative-infinity surrogate are rejected.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let xv = self.value(x);
        let (p, q) = (xv.rows(), xv.cols());
        if let Some(m) = mask {
            if m.rows() != p || m.cols() != q {
                return Err(Error::shape("softmax_rows mask", xv.shape(), m.shape()));
            }
        }
        let half_inf = T::of(NEG_INF / 2.0);
        let mut out = vec![T::zero(); p * q];
        let mut scratch = vec![T::zero(); q];
        for i in 0..p {
            let row = xv.row(i);
            let mrow = mask.map(|m| m.row(i));
            if let Some(mr) = mrow {
                if mr.iter().all(|&v| v <= half_inf) {
                    return Err(Error::DegenerateRow { row: i });
                }
            }
            let logit = |j: usize| row[j] + mrow.map_or(T::zero(), |mr| mr[j]);
            let max = (0..q).map(logit).fold(T::neg_infinity(), T::max);
            for j in 0..q {
                scratch[j] = (logit(j) - max).exp();
            }
            let dst = &mut out[i * q..(i + 1) * q];
            dst.copy_from_slice(&scratch);
            let z = ordered_sum(&mut scratch);
            for v in dst.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Per-row standardisation with population variance, then `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if d < 2 {
            return Err(Error::Config("layer_norm needs at least 2 features".into()));
        }
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let p = xv.rows();
        let df = T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); p * d];
        let mut inv_std = vec![T::zero(); p];
        let mut out = vec![T::zero(); p * d];
        for i in 0..p {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            },
            ng,
        ))
    }

    // ---- structural -------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_cols(&tensors)?;
        let ng = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.cols() {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, len]));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Data("concat of zero tensors".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let ng = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.rows() {
            return Err(Error::shape("slice_rows", xv.shape(), &[start, len]));
        }
        let c = xv.cols();
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::matrix(len, c, data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    /// Gathers table rows. The `pad` id, when given, maps to a zero row and
    /// never receives gradient.
    pub fn embedding(&mut self, table: Var, ids: &[usize], pad: Option<usize>) -> Result<Var> {
        let t = self.value(table);
        let (v, e) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::Data("embedding lookup of zero ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, size: v });
            }
            if Some(id) == pad {
                data.extend(std::iter::repeat_n(T::zero(), e));
            } else {
                data.extend_from_slice(t.row(id));
            }
        }
        let out = Tensor::matrix(ids.len(), e, data)?;
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                pad,
            },
            ng,
        ))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (p, q) = (xv.rows(), xv.cols());
        let mut out = vec![T::zero(); q];
        for i in 0..p {
            for (o, &v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let pf = T::of(p as f64);
        for o in &mut out {
            *o /= pf;
        }
        let out = Tensor::matrix(1, q, out).expect("q > 0");
        let ng = self.needs(x);
        self.push(out, Op::MeanRows(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// `Σ_i weights[i] · (−log softmax(logits_i)[targets[i]])` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let (p, v) = (lv.rows(), lv.cols());
        if targets.len() != p || weights.len() != p {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len(), weights.len()]));
        }
        let mut probs = vec![T::zero(); p * v];
        let mut loss = T::zero();
        for i in 0..p {
            let row = lv.row(i);
            let t = targets[i];
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, size: v });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[i * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[i * v + j] /= z;
            }
            let nll = z.ln() + max - row[t];
            loss += weights[i] * nll;
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagates d(loss)/d(node) through every recorded operation in strict
    /// reverse order.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                grads[i] = Some(g);
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        Ok(Grads {
            by_node: grads,
            shapes: (0..n).map(|i| self.value(Var(i)).shape().to_vec()).collect(),
        })
    }

    /// Adds the gradients of every trainable parameter used on this tape.
    pub fn accumulate_param_grads(&self, grads: &Grads<T>, into: &mut Gradients<T>) {
        for (pid, var) in self.param_vars.iter().enumerate() {
            let Some(v) = var else { continue };
            if let Some(g) = &grads.by_node[v.0] {
                for (dst, &src) in into.bufs[pid].iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Attend(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q, r) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_nt_into(g, bv.data(), ga, p, q, r);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_tn_into(av.data(), g, gb, p, q, r);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    for x in 0..r {
                        for y in 0..c {
                            ga[y * r + x] += g[x * c + y];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                let c = out.cols();
                if let Some(gb) = self.slot(grads, *b) {
                    for (k, &s) in g.iter().enumerate() {
                        gb[k % c] += s;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (d, &v) in gx.iter_mut().zip(g) {
                        *d += v * *s;
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &v), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                        if y > T::zero() {
                            *d += v;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &v), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += v * y * (T::one() - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &v), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += v * (T::one() - y * y);
                    }
                }
            }
            Op::Dropout(x, mult) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &v), &m) in gx.iter_mut().zip(g).zip(mult) {
                        *d += v * m;
                    }
                }
            }
            Op::Softmax(x) => {
                let (p, q) = (out.rows(), out.cols());
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..p {
                        let y = out.row(r);
                        let gr = &g[r * q..(r + 1) * q];
                        let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..q {
                            gx[r * q + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            } => {
                let (p, d) = (out.rows(), out.cols());
                let gain_v = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for r in 0..p {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for r in 0..p {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let df = T::of(d as f64);
                    for r in 0..p {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gain_v[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g[r * d + j] * gain_v[j];
                            gx[r * d + j] += inv_std[r] / df
                                * (df * dh - sum_dh - xhat[r * d + j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for &part in parts {
                    let c = self.value(part).cols();
                    if let Some(gp) = self.slot(grads, part) {
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = (out.rows(), out.cols());
                let c = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        for j in 0..len {
                            gx[r * c + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &part in parts {
                    let n = self.value(part).len();
                    if let Some(gp) = self.slot(grads, part) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::Embedding { table, ids, pad } => {
                let e = out.cols();
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) == *pad {
                            continue;
                        }
                        add_into(&mut gt[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (p, q) = (xv.rows(), xv.cols());
                let pf = T::of(p as f64);
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..p {
                        for j in 0..q {
                            gx[r * q + j] += g[j] / pf;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.value(*logits).cols();
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let scale = g[0] * w;
                        for j in 0..v {
                            let ind = if j == t { T::one() } else { T::zero() };
                            gl[r * v + j] += scale * (probs[r * v + j] - ind);
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

//! The Wengert tape: forward ops are recorded in execution order, backward
//! replays them in reverse. Gradients accumulate (`+=`) where a tensor feeds
//! several ops; accumulation order is the reverse tape order, so runs are
//! bitwise reproducible for a given seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    NumericsError, Result, Scalar, GELU_COEF_A, GELU_COEF_B, LAYER_NORM_EPS,
};

/// Handle to a tensor living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

struct Node<S> {
    data: Vec<S>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<S>,
}

enum Op<S> {
    Leaf,
    Matmul {
        a: TensorRef,
        b: TensorRef,
    },
    Transpose {
        a: TensorRef,
    },
    Add {
        a: TensorRef,
        b: TensorRef,
    },
    Mul {
        a: TensorRef,
        b: TensorRef,
    },
    Scale {
        a: TensorRef,
        factor: S,
    },
    BiasAdd {
        a: TensorRef,
        bias: TensorRef,
    },
    LayerNorm {
        x: TensorRef,
        gain: TensorRef,
        shift: TensorRef,
        /// (x - mean) * rstd, saved per element.
        normalized: Vec<S>,
        /// 1 / sqrt(var + eps), saved per row.
        rstd: Vec<S>,
    },
    Softmax {
        x: TensorRef,
    },
    Gelu {
        x: TensorRef,
    },
    EmbeddingLookup {
        table: TensorRef,
        ids: Vec<usize>,
    },
    Dropout {
        x: TensorRef,
        /// Per-element keep mask, already scaled by 1/(1-p).
        mask: Vec<S>,
    },
    CrossEntropy {
        logits: TensorRef,
        golds: Vec<usize>,
        /// Softmax probabilities saved from the forward pass.
        probs: Vec<S>,
    },
    Concat {
        parts: Vec<TensorRef>,
        axis: usize,
    },
    Slice {
        x: TensorRef,
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum {
        x: TensorRef,
    },
}

/// Records a forward computation and replays it in reverse for gradients.
///
/// One tape = one forward recording = at most one backward pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// Number of tensors recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Register a tensor that does not need gradients (inputs, masks, frozen
    /// parameters).
    pub fn input(&mut self, data: Vec<S>, shape: &[usize]) -> Result<TensorRef> {
        self.leaf(data, shape, false)
    }

    /// Register a tensor that participates in gradient computation.
    pub fn variable(&mut self, data: Vec<S>, shape: &[usize]) -> Result<TensorRef> {
        self.leaf(data, shape, true)
    }

    fn leaf(&mut self, data: Vec<S>, shape: &[usize], requires_grad: bool) -> Result<TensorRef> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} does not describe {} elements", shape, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "leaf" });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool, op: Op<S>) -> TensorRef {
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        self.grads.push(None);
        TensorRef(id)
    }

    pub fn value(&self, t: TensorRef) -> &[S] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn requires_grad(&self, t: TensorRef) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, t: TensorRef) -> Result<S> {
        let node = &self.nodes[t.0];
        if node.data.len() != 1 {
            return Err(NumericsError::NonScalarLoss(node.shape.clone()));
        }
        Ok(node.data[0])
    }

    /// Gradient of `t`, if any flowed to it during [`Tape::backward`].
    pub fn grad(&self, t: TensorRef) -> Option<&[S]> {
        self.grads[t.0].as_deref()
    }

    fn finish(&mut self, op_name: &'static str, data: Vec<S>, shape: Vec<usize>, requires_grad: bool, op: Op<S>) -> Result<TensorRef> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        Ok(self.push(data, shape, requires_grad, op))
    }

    fn needs_grad(&self, ts: &[TensorRef]) -> bool {
        ts.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    // ---------------------------------------------------------------------
    // Forward ops
    // ---------------------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.needs_grad(&[a, b]);
        self.finish("matmul", out, vec![m, n], rg, Op::Matmul { a, b })
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "transpose",
                detail: format!("expected 2-D, got {:?}", sa),
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let out = transpose_raw(self.value(a), r, c);
        let rg = self.needs_grad(&[a]);
        self.finish("transpose", out, vec![c, r], rg, Op::Transpose { a })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        self.finish("add", out, shape, rg, Op::Add { a, b })
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        self.finish("mul", out, shape, rg, Op::Mul { a, b })
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: TensorRef, factor: S) -> Result<TensorRef> {
        let out: Vec<S> = self.value(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a]);
        self.finish("scale", out, shape, rg, Op::Scale { a, factor })
    }

    /// Broadcast-add a 1-D bias over the last axis.
    pub fn bias_add(&mut self, a: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        let d = *sa.last().unwrap();
        if sb.len() != 1 || sb[0] != d {
            return Err(NumericsError::ShapeMismatch {
                op: "bias_add",
                detail: format!("{:?} + bias {:?}", sa, sb),
            });
        }
        let bv = self.value(bias).to_vec();
        let out: Vec<S> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % d])
            .collect();
        let shape = sa.to_vec();
        let rg = self.needs_grad(&[a, bias]);
        self.finish("bias_add", out, shape, rg, Op::BiasAdd { a, bias })
    }

    /// Layer normalization over the last axis with learnable gain/shift.
    pub fn layer_norm(&mut self, x: TensorRef, gain: TensorRef, shift: TensorRef) -> Result<TensorRef> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap();
        for (name, t) in [("gain", gain), ("shift", shift)] {
            let st = self.shape(t);
            if st.len() != 1 || st[0] != n {
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("{} {:?} does not match last axis {}", name, st, n),
                });
            }
        }
        let eps = S::from_f64(LAYER_NORM_EPS);
        let inv_n = S::from_f64(1.0 / n as f64);
        let rows = self.value(x).len() / n;
        let xv = self.value(x);
        let gv = self.value(gain);
        let sv = self.value(shift);
        let mut out = vec![S::zero(); xv.len()];
        let mut normalized = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mut mean = S::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for i in 0..n {
                let xhat = (row[i] - mean) * rs;
                normalized[r * n + i] = xhat;
                out[r * n + i] = gv[i] * xhat + sv[i];
            }
        }
        let rg = self.needs_grad(&[x, gain, shift]);
        self.finish(
            "layer_norm",
            out,
            sx,
            rg,
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                rstd,
            },
        )
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: TensorRef) -> Result<TensorRef> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap();
        let xv = self.value(x);
        let rows = xv.len() / n;
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(row[0], S::max);
            let mut sum = S::zero();
            for i in 0..n {
                let e = (row[i] - max).exp();
                out[r * n + i] = e;
                sum = sum + e;
            }
            let inv = sum.recip();
            for i in 0..n {
                out[r * n + i] = out[r * n + i] * inv;
            }
        }
        let rg = self.needs_grad(&[x]);
        self.finish("softmax", out, sx, rg, Op::Softmax { x })
    }

    /// Gelu activation (tanh approximation).
    pub fn gelu(&mut self, x: TensorRef) -> Result<TensorRef> {
        let a = S::from_f64(GELU_COEF_A);
        let b = S::from_f64(GELU_COEF_B);
        let half = S::from_f64(0.5);
        let out: Vec<S> = self
            .value(x)
            .iter()
            .map(|&v| {
                let u = a * (v + b * v * v * v);
                half * v * (S::one() + u.tanh())
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.finish("gelu", out, shape, rg, Op::Gelu { x })
    }

    /// Gather rows of a `[vocab, d]` table: `ids -> [len(ids), d]`.
    pub fn embedding_lookup(&mut self, table: TensorRef, ids: &[usize]) -> Result<TensorRef> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "embedding_lookup",
                detail: format!("table must be 2-D, got {:?}", st),
            });
        }
        let (vocab, d) = (st[0], st[1]);
        if ids.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "embedding_lookup",
                detail: "empty id list".into(),
            });
        }
        for &id in ids {
            if id >= vocab {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    size: vocab,
                });
            }
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.needs_grad(&[table]);
        self.finish(
            "embedding_lookup",
            out,
            vec![ids.len(), d],
            rg,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Train-mode dropout: Bernoulli keep mask scaled by `1/(1-p)`.
    /// `p = 0` is the identity (the input tensor is returned unchanged).
    pub fn dropout(&mut self, x: TensorRef, p: f64, rng: &mut ChaCha8Rng) -> Result<TensorRef> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidArgument {
                op: "dropout",
                detail: format!("p = {} not in [0, 1)", p),
            });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep_scale = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let out: Vec<S> = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.finish("dropout", out, shape, rg, Op::Dropout { x, mask })
    }

    /// Softmax + negative log-likelihood of the gold indices, averaged over
    /// the batch. `logits: [batch, classes]`, one gold per row.
    pub fn cross_entropy(&mut self, logits: TensorRef, golds: &[usize]) -> Result<TensorRef> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != golds.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {:?} vs {} gold labels", sl, golds.len()),
            });
        }
        let (batch, classes) = (sl[0], sl[1]);
        for &g in golds {
            if g >= classes {
                return Err(NumericsError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: g,
                    size: classes,
                });
            }
        }
        let lv = self.value(logits);
        let mut probs = vec![S::zero(); lv.len()];
        let mut total = S::zero();
        for r in 0..batch {
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(row[0], S::max);
            let mut sum = S::zero();
            for i in 0..classes {
                let e = (row[i] - max).exp();
                probs[r * classes + i] = e;
                sum = sum + e;
            }
            let inv = sum.recip();
            for i in 0..classes {
                probs[r * classes + i] = probs[r * classes + i] * inv;
            }
            let log_z = max + sum.ln();
            total = total + (log_z - row[golds[r]]);
        }
        let loss = total * S::from_f64(1.0 / batch as f64);
        let rg = self.needs_grad(&[logits]);
        self.finish(
            "cross_entropy",
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropy {
                logits,
                golds: golds.to_vec(),
                probs,
            },
        )
    }

    /// Concatenate tensors along `axis`. All other dimensions must agree.
    pub fn concat(&mut self, parts: &[TensorRef], axis: usize) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "concat",
                detail: "no tensors to concatenate".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(NumericsError::InvalidArgument {
                op: "concat",
                detail: format!("axis {} out of range for rank {}", axis, first.len()),
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let sp = self.shape(p);
            let compatible = sp.len() == first.len()
                && sp
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} along axis {}", sp, first, axis),
                });
            }
            axis_total += sp[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let out_chunk = axis_total * inner;
        let mut out = vec![S::zero(); outer * out_chunk];
        let mut offset = 0;
        for &p in parts {
            let chunk = self.shape(p)[axis] * inner;
            let pv = self.value(p);
            for o in 0..outer {
                out[o * out_chunk + offset..o * out_chunk + offset + chunk]
                    .copy_from_slice(&pv[o * chunk..(o + 1) * chunk]);
            }
            offset += chunk;
        }
        let rg = self.needs_grad(parts);
        self.finish(
            "concat",
            out,
            out_shape,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Take `len` indices starting at `start` along `axis`.
    pub fn slice(&mut self, x: TensorRef, axis: usize, start: usize, len: usize) -> Result<TensorRef> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(NumericsError::InvalidArgument {
                op: "slice",
                detail: format!("axis {} out of range for rank {}", axis, sx.len()),
            });
        }
        if len == 0 || start + len > sx[axis] {
            return Err(NumericsError::InvalidArgument {
                op: "slice",
                detail: format!("range {}..{} out of bounds for axis size {}", start, start + len, sx[axis]),
            });
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let x_chunk = sx[axis] * inner;
        let out_chunk = len * inner;
        let xv = self.value(x);
        let mut out = vec![S::zero(); outer * out_chunk];
        for o in 0..outer {
            out[o * out_chunk..(o + 1) * out_chunk].copy_from_slice(
                &xv[o * x_chunk + start * inner..o * x_chunk + (start + len) * inner],
            );
        }
        let mut out_shape = sx;
        out_shape[axis] = len;
        let rg = self.needs_grad(&[x]);
        self.finish("slice", out, out_shape, rg, Op::Slice { x, axis, start, len })
    }

    /// Sum all elements into a scalar.
    pub fn sum(&mut self, x: TensorRef) -> Result<TensorRef> {
        let mut total = S::zero();
        for &v in self.value(x) {
            total = total + v;
        }
        let rg = self.needs_grad(&[x]);
        self.finish("sum", vec![total], vec![1], rg, Op::Sum { x })
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Consumes the tape; a second call
    /// is an error. After this returns, every `requires_grad` leaf has a
    /// gradient buffer (zeros when no gradient flowed to it).
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        self.consumed = true;
        if self.nodes[loss.0].data.len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.grads[loss.0] = Some(vec![S::one()]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let d_out = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backward_node(i, &d_out);
        }

        // Materialize zero gradients for variables the loss never touched.
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![S::zero(); node.data.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, t: TensorRef, delta: &[S]) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        match &mut self.grads[t.0] {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta) {
                    *gi = *gi + d;
                }
            }
            None => self.grads[t.0] = Some(delta.to_vec()),
        }
    }

    fn backward_node(&mut self, i: usize, d_out: &[S]) {
        // Ops only reference earlier nodes, so reading inputs while writing
        // their gradients is safe; values are copied where the borrow demands.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a.0].shape[0];
                let k = self.nodes[a.0].shape[1];
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(&self.nodes[b.0].data, k, n);
                    let da = matmul_raw(d_out, &bt, m, n, k);
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(&self.nodes[a.0].data, m, k);
                    let db = matmul_raw(&at, d_out, k, m, n);
                    self.accumulate(b, &db);
                }
            }
            Op::Transpose { a } => {
                let a = *a;
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let da = transpose_raw(d_out, c, r);
                self.accumulate(a, &da);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, d_out);
                self.accumulate(b, d_out);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let da: Vec<S> = d_out
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<S> = d_out
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale { a, factor } => {
                let (a, f) = (*a, *factor);
                let da: Vec<S> = d_out.iter().map(|&d| d * f).collect();
                self.accumulate(a, &da);
            }
            Op::BiasAdd { a, bias } => {
                let (a, bias) = (*a, *bias);
                let d = self.nodes[bias.0].data.len();
                self.accumulate(a, d_out);
                if self.nodes[bias.0].requires_grad {
                    let mut db = vec![S::zero(); d];
                    for (i, &g) in d_out.iter().enumerate() {
                        db[i % d] = db[i % d] + g;
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                rstd,
            } => {
                let (x, gain, shift) = (*x, *gain, *shift);
                let n = self.nodes[gain.0].data.len();
                let rows = d_out.len() / n;
                let inv_n = S::from_f64(1.0 / n as f64);
                let xhat = normalized.clone();
                let rstd = rstd.clone();
                let gv = self.nodes[gain.0].data.clone();

                if self.nodes[gain.0].requires_grad {
                    let mut dg = vec![S::zero(); n];
                    for r in 0..rows {
                        for i in 0..n {
                            dg[i] = dg[i] + d_out[r * n + i] * xhat[r * n + i];
                        }
                    }
                    self.accumulate(gain, &dg);
                }
                if self.nodes[shift.0].requires_grad {
                    let mut ds = vec![S::zero(); n];
                    for r in 0..rows {
                        for i in 0..n {
                            ds[i] = ds[i] + d_out[r * n + i];
                        }
                    }
                    self.accumulate(shift, &ds);
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![S::zero(); d_out.len()];
                    for r in 0..rows {
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for i in 0..n {
                            let dxh = d_out[r * n + i] * gv[i];
                            mean_dxhat = mean_dxhat + dxh;
                            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[r * n + i];
                        }
                        mean_dxhat = mean_dxhat * inv_n;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
                        for i in 0..n {
                            let dxh = d_out[r * n + i] * gv[i];
                            dx[r * n + i] =
                                rstd[r] * (dxh - mean_dxhat - xhat[r * n + i] * mean_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::Softmax { x } => {
                let x = *x;
                let shape = &self.nodes[i].shape;
                let n = *shape.last().unwrap();
                let rows = d_out.len() / n;
                let y = self.nodes[i].data.clone();
                let mut dx = vec![S::zero(); d_out.len()];
                for r in 0..rows {
                    let mut dot = S::zero();
                    for c in 0..n {
                        dot = dot + d_out[r * n + c] * y[r * n + c];
                    }
                    for c in 0..n {
                        dx[r * n + c] = y[r * n + c] * (d_out[r * n + c] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Gelu { x } => {
                let x = *x;
                let a = S::from_f64(GELU_COEF_A);
                let b = S::from_f64(GELU_COEF_B);
                let half = S::from_f64(0.5);
                let three = S::from_f64(3.0);
                let dx: Vec<S> = d_out
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&d, &v)| {
                        let u = a * (v + b * v * v * v);
                        let t = u.tanh();
                        let sech2 = S::one() - t * t;
                        let du = a * (S::one() + three * b * v * v);
                        d * (half * (S::one() + t) + half * v * sech2 * du)
                    })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::EmbeddingLookup { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[table.0].shape[1];
                let mut dt = vec![S::zero(); self.nodes[table.0].data.len()];
                for (pos, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] = dt[id * d + c] + d_out[pos * d + c];
                    }
                }
                self.accumulate(table, &dt);
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let dx: Vec<S> = d_out.iter().zip(mask.clone().iter()).map(|(&d, &m)| d * m).collect();
                self.accumulate(x, &dx);
            }
            Op::CrossEntropy { logits, golds, probs } => {
                let logits = *logits;
                let golds = golds.clone();
                let probs = probs.clone();
                let classes = self.nodes[logits.0].shape[1];
                let batch = golds.len();
                let scale = d_out[0] * S::from_f64(1.0 / batch as f64);
                let mut dl = vec![S::zero(); probs.len()];
                for r in 0..batch {
                    for c in 0..classes {
                        let indicator = if c == golds[r] { S::one() } else { S::zero() };
                        dl[r * classes + c] = scale * (probs[r * classes + c] - indicator);
                    }
                }
                self.accumulate(logits, &dl);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let out_shape = self.nodes[i].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_chunk = out_shape[axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.nodes[p.0].shape[axis] * inner;
                    if self.nodes[p.0].requires_grad {
                        let mut dp = vec![S::zero(); self.nodes[p.0].data.len()];
                        for o in 0..outer {
                            dp[o * chunk..(o + 1) * chunk].copy_from_slice(
                                &d_out[o * out_chunk + offset..o * out_chunk + offset + chunk],
                            );
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let (x, axis, start, len) = (*x, *axis, *start, *len);
                let sx = self.nodes[x.0].shape.clone();
                let outer: usize = sx[..axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let x_chunk = sx[axis] * inner;
                let out_chunk = len * inner;
                let mut dx = vec![S::zero(); self.nodes[x.0].data.len()];
                for o in 0..outer {
                    dx[o * x_chunk + start * inner..o * x_chunk + (start + len) * inner]
                        .copy_from_slice(&d_out[o * out_chunk..(o + 1) * out_chunk]);
                }
                self.accumulate(x, &dx);
            }
            Op::Sum { x } => {
                let x = *x;
                let dx = vec![d_out[0]; self.nodes[x.0].data.len()];
                self.accumulate(x, &dx);
            }
        }
    }
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            let o_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                o_row[j] = o_row[j] + a_ip * b_row[j];
            }
        }
    }
    out
}

fn transpose_raw<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

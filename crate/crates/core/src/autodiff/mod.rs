//! Reverse-mode automatic differentiation on dense row-major tensors.
//!
//! A [`Graph`] is a per-forward-pass tape: every operation appends a
//! [`ValueTensor`] node recording its inputs, [`Graph::backward`] replays the
//! tape in reverse from a scalar root, and the tape is dropped with the graph
//! once parameter gradients have been folded back into their
//! [`Parameter`](crate::params::Parameter) storage. Creation order is
//! already a topological order, so the reverse
//! sweep visits each node exactly once.
//!
//! The spike-specific operations live here too: the thresholded spike node
//! (exact Heaviside forward, rectangular surrogate backward) and the fused
//! per-head binary correlation used by attention.

mod kernels;
mod shape;

pub use kernels::{binary_head_dot, real_head_dot};
pub use shape::{broadcast_shapes, numel};

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::SharedParam;
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// How spike thresholds evaluate their forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    /// Exact Heaviside: outputs are exactly 0 or 1.
    Binary,
    /// Piecewise-linear ramp whose derivative equals the surrogate; used to
    /// validate tape gradients against finite differences of this relaxed
    /// forward pass.
    Shadow,
}

/// One node on the tape: a dense tensor plus the record of how it was made.
#[derive(Debug)]
pub struct ValueTensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub grad: Option<Vec<S>>,
    op: Op<S>,
    needs_grad: bool,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: S },
    AddScalar { a: TensorId },
    Log { a: TensorId },
    Sqrt { a: TensorId },
    SumAxis { a: TensorId, axis: usize },
    MeanAxis { a: TensorId, axis: usize },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    Reshape { a: TensorId },
    BroadcastTo { a: TensorId },
    ConcatLast { a: TensorId, b: TensorId },
    SliceLeading { a: TensorId, index: usize },
    SliceRows { a: TensorId, start: usize },
    StackLeading { parts: Rc<Vec<TensorId>> },
    GatherTokens { a: TensorId, tokens: Rc<Vec<(usize, usize)>> },
    ScatterTokens { a: TensorId, tokens: Rc<Vec<(usize, usize)>>, batch: usize, n_tokens: usize },
    SpikeThreshold { a: TensorId, u_th: S, width: S },
    MembraneUpdate { u: TensorId, s: TensorId, v_reset: S, beta: S },
    SpikeQkDot { q: TensorId, k: TensorId, heads: usize },
    SoftmaxCrossEntropy { logits: TensorId, labels: Rc<Vec<usize>>, smoothing: S },
}

pub struct Graph<S: Scalar> {
    nodes: Vec<ValueTensor<S>>,
    mode: SpikeMode,
    bindings: Vec<(TensorId, SharedParam<S>)>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), mode: SpikeMode::Binary, bindings: Vec::new() }
    }

    pub fn with_mode(mode: SpikeMode) -> Self {
        Graph { nodes: Vec::new(), mode, bindings: Vec::new() }
    }

    pub fn mode(&self) -> SpikeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── node construction ───────────────────────────────────────────

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, op: Op<S>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        let id = TensorId(self.nodes.len());
        self.nodes.push(ValueTensor { shape, data, grad: None, op, needs_grad });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf that participates in gradient computation.
    pub fn input(&mut self, data: Vec<S>, shape: Vec<usize>) -> Result<TensorId> {
        if data.len() != numel(&shape) {
            return Err(Error::dim(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(self.push(data, shape, Op::Leaf, true))
    }

    /// Leaf excluded from gradient computation.
    pub fn constant(&mut self, data: Vec<S>, shape: Vec<usize>) -> Result<TensorId> {
        if data.len() != numel(&shape) {
            return Err(Error::dim(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(self.push(data, shape, Op::Leaf, false))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        let n = numel(&shape);
        self.push(vec![S::zero(); n], shape, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: S) -> TensorId {
        self.push(vec![v], vec![1], Op::Leaf, false)
    }

    /// Register a shared parameter on the tape. Its gradient is folded back
    /// into the parameter by [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, p: &SharedParam<S>) -> TensorId {
        let (data, shape, trainable) = {
            let pb = p.borrow();
            (pb.data.clone(), pb.shape.clone(), pb.trainable)
        };
        let id = self.push(data, shape, Op::Leaf, trainable);
        if trainable {
            self.bindings.push((id, p.clone()));
        }
        id
    }

    // ── accessors ───────────────────────────────────────────────────

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn node(&self, id: TensorId) -> &ValueTensor<S> {
        &self.nodes[id.0]
    }

    /// Shapes of every node on the tape, for structural assertions.
    pub fn node_shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.nodes.iter().map(|n| n.shape.as_slice())
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ── forward operations ──────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!("matmul expects 2-d operands, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(Error::dim(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], Op::Matmul { a, b }, ng))
    }

    fn binary_broadcast(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<TensorId> {
        let out_shape = broadcast_shapes(self.shape(a), self.shape(b))?;
        let total = numel(&out_shape);
        let mut data = vec![S::zero(); total];
        {
            let av = self.data(a);
            shape::for_each_broadcast(&out_shape, self.shape(a), |o, s| data[o] = av[s]);
        }
        {
            let bv = self.data(b);
            shape::for_each_broadcast(&out_shape, self.shape(b), |o, s| data[o] = f(data[o], bv[s]));
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, out_shape, op, ng))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, Op::Div { a, b }, |x, y| x / y)
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> TensorId {
        let data: Vec<S> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(data, shape, Op::Scale { a, c }, ng)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: S) -> TensorId {
        let data: Vec<S> = self.data(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(data, shape, Op::AddScalar { a }, ng)
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let data: Vec<S> = self.data(a).iter().map(|&x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(data, shape, Op::Log { a }, ng)
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let data: Vec<S> = self.data(a).iter().map(|&x| x.sqrt()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(data, shape, Op::Sqrt { a }, ng)
    }

    fn reduce_axis(&mut self, a: TensorId, axis: usize, mean: bool) -> Result<TensorId> {
        shape::check_axis(self.shape(a), axis)?;
        let in_shape = self.shape(a).to_vec();
        let out_shape = shape::reduced_shape(&in_shape, axis);
        let (outer, len, inner) = shape::axis_split(&in_shape, axis);
        let mut data = vec![S::zero(); outer * inner];
        let av = self.data(a);
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += av[base + i];
                }
            }
        }
        if mean {
            let inv = S::one() / S::from_f64_c(len as f64);
            for v in &mut data {
                *v *= inv;
            }
        }
        let op = if mean { Op::MeanAxis { a, axis } } else { Op::SumAxis { a, axis } };
        let ng = self.needs(a);
        Ok(self.push(data, out_shape, op, ng))
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let mut acc = S::zero();
        for &v in self.data(a) {
            acc += v;
        }
        let ng = self.needs(a);
        self.push(vec![acc], vec![1], Op::SumAll { a }, ng)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len();
        let mut acc = S::zero();
        for &v in self.data(a) {
            acc += v;
        }
        let ng = self.needs(a);
        let mean = acc / S::from_f64_c(n as f64);
        self.push(vec![mean], vec![1], Op::MeanAll { a }, ng)
    }

    pub fn reshape(&mut self, a: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        if numel(&new_shape) != self.data(a).len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {new_shape:?}",
                self.shape(a)
            )));
        }
        let data = self.data(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(data, new_shape, Op::Reshape { a }, ng))
    }

    pub fn broadcast_to(&mut self, a: TensorId, target: Vec<usize>) -> Result<TensorId> {
        let check = broadcast_shapes(self.shape(a), &target)?;
        if check != target {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} to {target:?}",
                self.shape(a)
            )));
        }
        let mut data = vec![S::zero(); numel(&target)];
        let av = self.data(a);
        shape::for_each_broadcast(&target, self.shape(a), |o, s| data[o] = av[s]);
        let ng = self.needs(a);
        Ok(self.push(data, target, Op::BroadcastTo { a }, ng))
    }

    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim(format!("concat_last shapes {sa:?} vs {sb:?}")));
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = numel(&sa) / da;
        let mut data = Vec::with_capacity(rows * (da + db));
        let (av, bv) = (self.data(a), self.data(b));
        for r in 0..rows {
            data.extend_from_slice(&av[r * da..(r + 1) * da]);
            data.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = da + db;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, out_shape, Op::ConcatLast { a, b }, ng))
    }

    pub fn slice_leading(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || index >= s[0] {
            return Err(Error::dim(format!("slice index {index} out of range for {s:?}")));
        }
        let chunk = numel(&s) / s[0];
        let data = self.data(a)[index * chunk..(index + 1) * chunk].to_vec();
        let out_shape = if s.len() == 1 { vec![1] } else { s[1..].to_vec() };
        let ng = self.needs(a);
        Ok(self.push(data, out_shape, Op::SliceLeading { a, index }, ng))
    }

    /// Contiguous row range of a 2-d tensor.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::dim(format!("slice_rows {start}..{} out of range for {s:?}", start + len)));
        }
        let cols = s[1];
        let data = self.data(a)[start * cols..(start + len) * cols].to_vec();
        let ng = self.needs(a);
        Ok(self.push(data, vec![len, cols], Op::SliceRows { a, start }, ng))
    }

    pub fn stack_leading(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("stack_leading needs at least one part"));
        }
        let part_shape = self.shape(parts[0]).to_vec();
        for &p in parts {
            if self.shape(p) != part_shape.as_slice() {
                return Err(Error::dim("stack_leading parts differ in shape".to_string()));
            }
        }
        let mut data = Vec::with_capacity(parts.len() * numel(&part_shape));
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let mut out_shape = vec![parts.len()];
        out_shape.extend_from_slice(&part_shape);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(data, out_shape, Op::StackLeading { parts: Rc::new(parts.to_vec()) }, ng))
    }

    /// Pick token columns out of a `(T, B, N, D)` tensor: the output is
    /// `(T, C, D)` where row `c` is token `(b, n) = tokens[c]`.
    pub fn gather_tokens(&mut self, a: TensorId, tokens: Rc<Vec<(usize, usize)>>) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("gather_tokens expects (T,B,N,D), got {s:?}")));
        }
        let (t_len, b_len, n_len, d) = (s[0], s[1], s[2], s[3]);
        for &(b, n) in tokens.iter() {
            if b >= b_len || n >= n_len {
                return Err(Error::dim(format!("token ({b},{n}) out of range for {s:?}")));
            }
        }
        let c_len = tokens.len();
        let mut data = vec![S::zero(); t_len * c_len * d];
        let av = self.data(a);
        for t in 0..t_len {
            for (c, &(b, n)) in tokens.iter().enumerate() {
                let src = ((t * b_len + b) * n_len + n) * d;
                let dst = (t * c_len + c) * d;
                data[dst..dst + d].copy_from_slice(&av[src..src + d]);
            }
        }
        let ng = self.needs(a);
        Ok(self.push(data, vec![t_len, c_len, d], Op::GatherTokens { a, tokens }, ng))
    }

    /// Dual of [`Graph::gather_tokens`]: accumulate `(T, C, D)` rows into a
    /// zero-initialised `(T, B, N, D)` tensor at the listed token positions.
    pub fn scatter_tokens(
        &mut self,
        a: TensorId,
        tokens: Rc<Vec<(usize, usize)>>,
        batch: usize,
        n_tokens: usize,
    ) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] != tokens.len() {
            return Err(Error::dim(format!(
                "scatter_tokens expects (T,{},D), got {s:?}",
                tokens.len()
            )));
        }
        let (t_len, c_len, d) = (s[0], s[1], s[2]);
        let mut data = vec![S::zero(); t_len * batch * n_tokens * d];
        let av = self.data(a);
        for t in 0..t_len {
            for (c, &(b, n)) in tokens.iter().enumerate() {
                if b >= batch || n >= n_tokens {
                    return Err(Error::dim(format!("token ({b},{n}) out of range")));
                }
                let src = (t * c_len + c) * d;
                let dst = ((t * batch + b) * n_tokens + n) * d;
                for j in 0..d {
                    data[dst + j] += av[src + j];
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            data,
            vec![t_len, batch, n_tokens, d],
            Op::ScatterTokens { a, tokens, batch, n_tokens },
            ng,
        ))
    }

    /// Thresholded spike: Heaviside(u - u_th) forward (or the surrogate ramp
    /// in shadow mode), rectangular-window surrogate derivative backward.
    pub fn spike_threshold(&mut self, a: TensorId, u_th: S, width: S) -> TensorId {
        let data: Vec<S> = match self.mode {
            SpikeMode::Binary => self
                .data(a)
                .iter()
                .map(|&u| if u >= u_th { S::one() } else { S::zero() })
                .collect(),
            SpikeMode::Shadow => {
                let half = S::from_f64_c(0.5);
                self.data(a)
                    .iter()
                    .map(|&u| ((u - u_th) / width + half).max(S::zero()).min(S::one()))
                    .collect()
            }
        };
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(data, shape, Op::SpikeThreshold { a, u_th, width }, ng)
    }

    /// Fused membrane transition `h' = v_reset * s + beta * u * (1 - s)`.
    pub fn membrane_update(&mut self, u: TensorId, s: TensorId, v_reset: S, beta: S) -> Result<TensorId> {
        if self.shape(u) != self.shape(s) {
            return Err(Error::dim("membrane_update operand shapes differ".to_string()));
        }
        let data: Vec<S> = self
            .data(u)
            .iter()
            .zip(self.data(s))
            .map(|(&uv, &sv)| v_reset * sv + beta * uv * (S::one() - sv))
            .collect();
        let shape = self.shape(u).to_vec();
        let ng = self.needs(u) || self.needs(s);
        Ok(self.push(data, shape, Op::MembraneUpdate { u, s, v_reset, beta }, ng))
    }

    /// Per-head channel correlation `sum_c(q ⊙ k)` on `(.., D)` tensors,
    /// emitting `(.., heads)`. Binary mode goes through the bit-packed
    /// popcount kernel; shadow mode uses the arithmetic path.
    pub fn spike_qk_dot(&mut self, q: TensorId, k: TensorId, heads: usize) -> Result<TensorId> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if sq != sk {
            return Err(Error::dim(format!("qk shapes differ: {sq:?} vs {sk:?}")));
        }
        let d = *sq.last().ok_or_else(|| Error::dim("qk operands need a channel axis"))?;
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::dim(format!("channels {d} not divisible by heads {heads}")));
        }
        let rows = numel(&sq) / d;
        let data = match self.mode {
            SpikeMode::Binary => kernels::binary_head_dot(self.data(q), self.data(k), rows, d, heads),
            SpikeMode::Shadow => kernels::real_head_dot(self.data(q), self.data(k), rows, d, heads),
        };
        let mut out_shape = sq.clone();
        *out_shape.last_mut().unwrap() = heads;
        let ng = self.needs(q) || self.needs(k);
        Ok(self.push(data, out_shape, Op::SpikeQkDot { q, k, heads }, ng))
    }

    /// Label-smoothed softmax cross entropy over `(B, C)` logits, averaged
    /// over the batch. Returns a scalar node.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: Rc<Vec<usize>>,
        smoothing: S,
    ) -> Result<TensorId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("cross entropy expects (B,C) logits, got {s:?}")));
        }
        let (b_len, classes) = (s[0], s[1]);
        if labels.len() != b_len {
            return Err(Error::contract(format!(
                "label count {} does not match batch {b_len}",
                labels.len()
            )));
        }
        for &y in labels.iter() {
            if y >= classes {
                return Err(Error::contract(format!("label {y} out of range for {classes} classes")));
            }
        }
        let z = self.data(logits);
        let eps = smoothing;
        let uni = eps / S::from_f64_c(classes as f64);
        let mut total = S::zero();
        for (bi, &y) in labels.iter().enumerate() {
            let row = &z[bi * classes..(bi + 1) * classes];
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut lse = S::zero();
            let mut row_sum = S::zero();
            for &v in row {
                lse += (v - m).exp();
                row_sum += v;
            }
            let lse = lse.ln() + m;
            let target_term = (S::one() - eps) * row[y] + uni * row_sum;
            total += lse - target_term;
        }
        let loss = total / S::from_f64_c(b_len as f64);
        let ng = self.needs(logits);
        Ok(self.push(vec![loss], vec![1], Op::SoftmaxCrossEntropy { logits, labels, smoothing }, ng))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Per-pass contributions are
    /// propagated in a scratch buffer and added into each node's `grad`, so
    /// running backward twice without `zero_grad` doubles every gradient.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.data(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = self.nodes.len();
        let mut scratch: Vec<Option<Vec<S>>> = vec![None; n];
        scratch[root.0] = Some(vec![S::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &g, &op, &mut scratch);
            let node = &mut self.nodes[i];
            match node.grad {
                Some(ref mut acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn accum(&self, scratch: &mut [Option<Vec<S>>], id: TensorId, f: impl FnOnce(&mut [S])) {
        if !self.needs(id) {
            return;
        }
        let buf = scratch[id.0].get_or_insert_with(|| vec![S::zero(); self.nodes[id.0].data.len()]);
        f(buf);
    }

    /// Reduce an out-shaped gradient back onto a (possibly broadcast) source shape.
    fn reduce_into(&self, scratch: &mut [Option<Vec<S>>], id: TensorId, g: &[S], out_shape: &[usize], f: impl Fn(usize) -> S) {
        if !self.needs(id) {
            return;
        }
        let src_shape = self.nodes[id.0].shape.clone();
        self.accum(scratch, id, |buf| {
            shape::for_each_broadcast(out_shape, &src_shape, |o, s| buf[s] += g[o] * f(o));
        });
    }

    fn propagate(&self, i: usize, g: &[S], op: &Op<S>, scratch: &mut [Option<Vec<S>>]) {
        let out_shape = &self.nodes[i].shape;
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let bv = self.data(*b);
                    self.accum(scratch, *a, |buf| kernels::matmul_grad_lhs(g, bv, m, k, n, buf));
                }
                if self.needs(*b) {
                    let av = self.data(*a);
                    self.accum(scratch, *b, |buf| kernels::matmul_grad_rhs(av, g, m, k, n, buf));
                }
            }

            Op::Add { a, b } => {
                self.reduce_into(scratch, *a, g, out_shape, |_| S::one());
                self.reduce_into(scratch, *b, g, out_shape, |_| S::one());
            }

            Op::Sub { a, b } => {
                self.reduce_into(scratch, *a, g, out_shape, |_| S::one());
                self.reduce_into(scratch, *b, g, out_shape, |_| -S::one());
            }

            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let mut bx = vec![S::zero(); g.len()];
                    let bv = self.data(*b);
                    shape::for_each_broadcast(out_shape, self.shape(*b), |o, s| bx[o] = bv[s]);
                    self.reduce_into(scratch, *a, g, out_shape, |o| bx[o]);
                }
                if self.needs(*b) {
                    let mut ax = vec![S::zero(); g.len()];
                    let av = self.data(*a);
                    shape::for_each_broadcast(out_shape, self.shape(*a), |o, s| ax[o] = av[s]);
                    self.reduce_into(scratch, *b, g, out_shape, |o| ax[o]);
                }
            }

            Op::Div { a, b } => {
                let mut bx = vec![S::zero(); g.len()];
                let bv = self.data(*b);
                shape::for_each_broadcast(out_shape, self.shape(*b), |o, s| bx[o] = bv[s]);
                if self.needs(*a) {
                    self.reduce_into(scratch, *a, g, out_shape, |o| S::one() / bx[o]);
                }
                if self.needs(*b) {
                    let mut ax = vec![S::zero(); g.len()];
                    let av = self.data(*a);
                    shape::for_each_broadcast(out_shape, self.shape(*a), |o, s| ax[o] = av[s]);
                    self.reduce_into(scratch, *b, g, out_shape, |o| -ax[o] / (bx[o] * bx[o]));
                }
            }

            Op::Scale { a, c } => {
                let c = *c;
                self.accum(scratch, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                });
            }

            Op::AddScalar { a } => {
                self.accum(scratch, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }

            Op::Log { a } => {
                let av = self.data(*a);
                self.accum(scratch, *a, |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gv / x;
                    }
                });
            }

            Op::Sqrt { a } => {
                let out = &self.nodes[i].data;
                let two = S::from_f64_c(2.0);
                self.accum(scratch, *a, |buf| {
                    for ((o, &gv), &r) in buf.iter_mut().zip(g).zip(out) {
                        *o += gv / (two * r);
                    }
                });
            }

            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let in_shape = self.shape(*a).to_vec();
                let (outer, len, inner) = shape::axis_split(&in_shape, *axis);
                let scale = if matches!(op, Op::MeanAxis { .. }) {
                    S::one() / S::from_f64_c(len as f64)
                } else {
                    S::one()
                };
                self.accum(scratch, *a, |buf| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for ii in 0..inner {
                                buf[base + ii] += g[o * inner + ii] * scale;
                            }
                        }
                    }
                });
            }

            Op::SumAll { a } | Op::MeanAll { a } => {
                let n_in = self.data(*a).len();
                let scale = if matches!(op, Op::MeanAll { .. }) {
                    S::one() / S::from_f64_c(n_in as f64)
                } else {
                    S::one()
                };
                let gv = g[0] * scale;
                self.accum(scratch, *a, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }

            Op::Reshape { a } => {
                self.accum(scratch, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }

            Op::BroadcastTo { a } => {
                self.reduce_into(scratch, *a, g, out_shape, |_| S::one());
            }

            Op::ConcatLast { a, b } => {
                let da = *self.shape(*a).last().unwrap();
                let db = *self.shape(*b).last().unwrap();
                let rows = g.len() / (da + db);
                self.accum(scratch, *a, |buf| {
                    for r in 0..rows {
                        for j in 0..da {
                            buf[r * da + j] += g[r * (da + db) + j];
                        }
                    }
                });
                self.accum(scratch, *b, |buf| {
                    for r in 0..rows {
                        for j in 0..db {
                            buf[r * db + j] += g[r * (da + db) + da + j];
                        }
                    }
                });
            }

            Op::SliceLeading { a, index } => {
                let chunk = g.len();
                let start = index * chunk;
                self.accum(scratch, *a, |buf| {
                    for (o, &gv) in buf[start..start + chunk].iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }

            Op::SliceRows { a, start } => {
                let cols = self.shape(*a)[1];
                let offset = start * cols;
                self.accum(scratch, *a, |buf| {
                    for (o, &gv) in buf[offset..offset + g.len()].iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }

            Op::StackLeading { parts } => {
                let chunk = g.len() / parts.len();
                for (p_idx, &p) in parts.iter().enumerate() {
                    let gp = &g[p_idx * chunk..(p_idx + 1) * chunk];
                    self.accum(scratch, p, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(gp) {
                            *o += gv;
                        }
                    });
                }
            }

            Op::GatherTokens { a, tokens } => {
                let s = self.shape(*a).to_vec();
                let (b_len, n_len, d) = (s[1], s[2], s[3]);
                let t_len = s[0];
                let c_len = tokens.len();
                self.accum(scratch, *a, |buf| {
                    for t in 0..t_len {
                        for (c, &(b, nn)) in tokens.iter().enumerate() {
                            let dst = ((t * b_len + b) * n_len + nn) * d;
                            let src = (t * c_len + c) * d;
                            for j in 0..d {
                                buf[dst + j] += g[src + j];
                            }
                        }
                    }
                });
            }

            Op::ScatterTokens { a, tokens, batch, n_tokens } => {
                let s = self.shape(*a).to_vec();
                let (t_len, c_len, d) = (s[0], s[1], s[2]);
                let (b_len, n_len) = (*batch, *n_tokens);
                self.accum(scratch, *a, |buf| {
                    for t in 0..t_len {
                        for (c, &(b, nn)) in tokens.iter().enumerate() {
                            let src = ((t * b_len + b) * n_len + nn) * d;
                            let dst = (t * c_len + c) * d;
                            for j in 0..d {
                                buf[dst + j] += g[src + j];
                            }
                        }
                    }
                });
            }

            Op::SpikeThreshold { a, u_th, width } => {
                let av = self.data(*a);
                let half_w = *width / S::from_f64_c(2.0);
                let slope = S::one() / *width;
                let u_th = *u_th;
                self.accum(scratch, *a, |buf| {
                    for ((o, &gv), &u) in buf.iter_mut().zip(g).zip(av) {
                        if (u - u_th).abs() < half_w {
                            *o += gv * slope;
                        }
                    }
                });
            }

            Op::MembraneUpdate { u, s, v_reset, beta } => {
                let (v_reset, beta) = (*v_reset, *beta);
                if self.needs(*u) {
                    let sv = self.data(*s);
                    self.accum(scratch, *u, |buf| {
                        for ((o, &gv), &spike) in buf.iter_mut().zip(g).zip(sv) {
                            *o += gv * beta * (S::one() - spike);
                        }
                    });
                }
                if self.needs(*s) {
                    let uv = self.data(*u);
                    self.accum(scratch, *s, |buf| {
                        for ((o, &gv), &um) in buf.iter_mut().zip(g).zip(uv) {
                            *o += gv * (v_reset - beta * um);
                        }
                    });
                }
            }

            Op::SpikeQkDot { q, k, heads } => {
                let d = *self.shape(*q).last().unwrap();
                let dh = d / heads;
                let rows = self.data(*q).len() / d;
                if self.needs(*q) {
                    let kv = self.data(*k);
                    self.accum(scratch, *q, |buf| {
                        for r in 0..rows {
                            for h in 0..*heads {
                                let gv = g[r * heads + h];
                                for j in h * dh..(h + 1) * dh {
                                    buf[r * d + j] += gv * kv[r * d + j];
                                }
                            }
                        }
                    });
                }
                if self.needs(*k) {
                    let qv = self.data(*q);
                    self.accum(scratch, *k, |buf| {
                        for r in 0..rows {
                            for h in 0..*heads {
                                let gv = g[r * heads + h];
                                for j in h * dh..(h + 1) * dh {
                                    buf[r * d + j] += gv * qv[r * d + j];
                                }
                            }
                        }
                    });
                }
            }

            Op::SoftmaxCrossEntropy { logits, labels, smoothing } => {
                let s = self.shape(*logits).to_vec();
                let (b_len, classes) = (s[0], s[1]);
                let z = self.data(*logits);
                let eps = *smoothing;
                let uni = eps / S::from_f64_c(classes as f64);
                let inv_b = S::one() / S::from_f64_c(b_len as f64);
                let g0 = g[0];
                self.accum(scratch, *logits, |buf| {
                    for (bi, &y) in labels.iter().enumerate() {
                        let row = &z[bi * classes..(bi + 1) * classes];
                        let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
                        let mut denom = S::zero();
                        for &v in row {
                            denom += (v - m).exp();
                        }
                        for c in 0..classes {
                            let p = (row[c] - m).exp() / denom;
                            let q = if c == y { S::one() - eps + uni } else { uni };
                            buf[bi * classes + c] += g0 * (p - q) * inv_b;
                        }
                    }
                });
            }
        }
    }

    /// Fold accumulated leaf gradients back into their parameters.
    pub fn accumulate_param_grads(&mut self) -> Result<()> {
        for (id, param) in &self.bindings {
            if let Some(g) = self.nodes[id.0].grad.as_ref() {
                let mut p = param.borrow_mut();
                for (slot, &gv) in p.grad.iter_mut().zip(g) {
                    *slot += gv;
                }
                if p.grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!("non-finite gradient for parameter '{}'", p.name)));
                }
            }
        }
        Ok(())
    }
}

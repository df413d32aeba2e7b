//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node on a tape. Node order is a
//! topological order, so `backward` walks the tape in reverse. Parameters are
//! borrowed from a [`ParamStore`] and never copied; their gradients are added
//! into a separate [`Grads`] buffer.

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{axis_split, broadcast, gemm, numel};
use super::{ComputeError, Tensor};

/// Additive stand-in for −∞ in masks and logit floors.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Tanh,
    Relu,
    Gelu,
    Exp,
    Log,
    Sqrt,
    ClampMin(f64),
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Unary(Var, Unary),
    Binary { a: Var, b: Var, kind: Binary, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Reshape(Var),
    Softmax { a: Var, axis: usize },
    /// Row softmax where key `j` is weighted by `gate[j]`; caches e/Z.
    GatedSoftmax { scores: Var, gate: Var, ez: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum { a: Var, axis: Option<usize> },
    Mean { a: Var, axis: Option<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Gather { a: Var, index: Vec<usize> },
    Pick { a: Var, index: Vec<usize> },
    MaskedFill { a: Var, mask: Vec<bool> },
    StopGrad,
}

enum Storage {
    Owned(Vec<f64>),
    Param(ParamId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Storage,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    track: bool,
    stochastic: bool,
    /// Values of every `stop_gradient` output, in creation order.
    stopped: Vec<Vec<f64>>,
    /// When set, `stop_gradient` replays these values instead of copying
    /// its input (used by gradient checking).
    replay: Option<Vec<Vec<f64>>>,
}

/// Gradients of the loss with respect to every node that required one.
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

type Res<T> = Result<T, ComputeError>;

impl<'p> Graph<'p> {
    /// A graph whose parameter leaves require gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_tracking(params, true)
    }

    /// A graph with no parameter gradients, for evaluation.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::with_tracking(params, false)
    }

    fn with_tracking(params: &'p ParamStore, track: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            track,
            stochastic: false,
            stopped: Vec::new(),
            replay: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records that values were drawn from an unfrozen random source.
    pub fn mark_stochastic(&mut self) {
        self.stochastic = true;
    }

    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Storage::Owned(d) => d,
            Storage::Param(id) => self.params.value(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape matches value")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { op, shape, value: Storage::Owned(value), requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves ----

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Op::Leaf, shape, t.into_data(), false)
    }

    /// A non-parameter leaf whose gradient is recorded in [`NodeGrads`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Op::Leaf, shape, t.into_data(), true)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let shape = self.params.value(id).shape().to_vec();
        self.nodes.push(Node { op: Op::Param(id), shape, value: Storage::Param(id), requires_grad: self.track });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- elementwise ----

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64, Unary) -> f64 = |x, k| match k {
            Unary::Neg => -x,
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Gelu => 0.5 * x * (1.0 + gelu_inner(x).tanh()),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::ClampMin(m) => x.max(m),
        };
        let value = self.value(a).iter().map(|&x| f(x, kind)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Op::Unary(a, kind), shape, value, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::Scale(c))
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::AddScalar(c))
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    /// `max(x, min)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        self.unary(a, Unary::ClampMin(min))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary, name: &'static str) -> Res<Var> {
        let bc = broadcast(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = numel(&bc.shape);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Max => x.max(y),
        };
        let value: Vec<f64> = match (&bc.a, &bc.b) {
            (None, None) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let ia = bc.a.as_ref().map_or(i, |m| m[i]);
                    let ib = bc.b.as_ref().map_or(i, |m| m[i]);
                    f(va[ia], vb[ib])
                })
                .collect(),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Binary { a, b, kind, map_a: bc.a, map_b: bc.b }, bc.shape, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary(a, b, Binary::Add, "add")
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }
    pub fn div(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary(a, b, Binary::Div, "div")
    }
    /// Element-wise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary(a, b, Binary::Max, "maximum")
    }

    /// Forward value of `a`, with no gradient path.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let k = self.stopped.len();
        let value = match self.replay.as_ref().and_then(|r| r.get(k)) {
            Some(v) if v.len() == numel(&shape) => v.clone(),
            _ => self.value(a).to_vec(),
        };
        self.stopped.push(value.clone());
        self.push(Op::StopGrad, shape, value, false)
    }

    /// Outputs of all `stop_gradient` calls so far.
    pub fn stopped_values(&self) -> &[Vec<f64>] {
        &self.stopped
    }

    /// Makes later `stop_gradient` calls return `values` (matched by call
    /// order) so that finite differences treat them as constants.
    pub fn replay_stopped(&mut self, values: Vec<Vec<f64>>) {
        self.replay = Some(values);
    }

    // ---- linear algebra / shape ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Res<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Res<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Res<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let name = if trans_b { "matmul_t" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(ComputeError::shape(name, sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n, bs) = if trans_b { (sb[1], sb[0], (1, sb[1])) } else { (sb[0], sb[1], (sb[1], 1)) };
        if k != kb {
            return Err(ComputeError::shape(name, sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), bs, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, trans_b }, vec![m, n], out, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Res<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(ComputeError::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), vec![c, r], out, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Res<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(ComputeError::shape("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), shape.to_vec(), value, rg))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Res<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(ComputeError::Axis { op, axis, rank });
        }
        Ok(())
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Res<Var> {
        let first = *parts.first().ok_or(ComputeError::Empty("concat"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !same_rest {
                return Err(ComputeError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; numel(&shape)];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let v = self.value(p);
            for o in 0..outer {
                let src = &v[o * len * inner..(o + 1) * len * inner];
                let dst = o * total * inner + offset * inner;
                out[dst..dst + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, shape, out, rg))
    }

    /// `len` entries of `a` along `axis`, starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Res<Var> {
        self.check_axis("narrow", a, axis)?;
        let s = self.shape(a).to_vec();
        if start + len > s[axis] {
            return Err(ComputeError::Index { op: "narrow", index: start + len, len: s[axis] });
        }
        let (outer, full, inner) = axis_split(&s, axis);
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Narrow { a, axis, start }, shape, out, rg))
    }

    /// Selects entries of `a` along axis 0 (embedding lookup when `a` is a table).
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Res<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(ComputeError::Axis { op: "gather", axis: 0, rank: 0 });
        }
        let row = numel(&s[1..]);
        let v = self.value(a);
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            if i >= s[0] {
                return Err(ComputeError::Index { op: "gather", index: i, len: s[0] });
            }
            out.extend_from_slice(&v[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = index.len();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Gather { a, index: index.to_vec() }, shape, out, rg))
    }

    /// For a `[rows, cols]` input, returns `[rows]` with `a[r, index[r]]`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Res<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != index.len() {
            return Err(ComputeError::shape("pick", &s, &[index.len()]));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(index.len());
        for (r, &c) in index.iter().enumerate() {
            if c >= s[1] {
                return Err(ComputeError::Index { op: "pick", index: c, len: s[1] });
            }
            out.push(v[r * s[1] + c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Pick { a, index: index.to_vec() }, vec![index.len()], out, rg))
    }

    /// Replaces entries where `mask` is true by `value`; no gradient flows
    /// to replaced entries.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Res<Var> {
        if mask.len() != numel(self.shape(a)) {
            return Err(ComputeError::shape("masked_fill", self.shape(a), &[mask.len()]));
        }
        let out = self.value(a).iter().zip(mask).map(|(&x, &m)| if m { value } else { x }).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::MaskedFill { a, mask: mask.to_vec() }, shape, out, rg))
    }

    // ---- reductions / normalizations ----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Res<Var> {
        self.check_axis("softmax", a, axis)?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let v = self.value(a);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| v[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (v[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Softmax { a, axis }, shape, out, rg))
    }

    /// Attention weights for `scores: [q, k]` with per-key gates `gate: [k]`:
    /// `w[i,j] = gate[j]·exp(s[i,j]) / Σ_l gate[l]·exp(s[i,l])`.
    /// A zero gate gives exactly zero weight while the gate still receives a
    /// gradient. Rows whose gates are all zero produce zeros.
    pub fn gated_softmax(&mut self, scores: Var, gate: Var) -> Res<Var> {
        let (ss, gs) = (self.shape(scores), self.shape(gate));
        if ss.len() != 2 || gs.len() != 1 || ss[1] != gs[0] {
            return Err(ComputeError::shape("gated_softmax", ss, gs));
        }
        let (q, k) = (ss[0], ss[1]);
        let (s, g) = (self.value(scores), self.value(gate));
        let mut ez = vec![0.0; q * k];
        let mut w = vec![0.0; q * k];
        for i in 0..q {
            let row = &s[i * k..(i + 1) * k];
            // shift by the max over open keys; closed keys cannot overflow the sum
            let max = row.iter().zip(g).filter(|(_, &gj)| gj != 0.0).map(|(&x, _)| x).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                ez[i * k + j] = e;
                z += g[j] * e;
            }
            for j in 0..k {
                ez[i * k + j] /= z;
                w[i * k + j] = g[j] * ez[i * k + j];
            }
        }
        let rg = self.rg(&[scores, gate]);
        Ok(self.push(Op::GatedSoftmax { scores, gate, ez }, vec![q, k], w, rg))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Res<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or(ComputeError::Axis { op: "layer_norm", axis: 0, rank: 0 })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(ComputeError::shape("layer_norm", &s, self.shape(gamma)));
        }
        let rows = numel(&s) / d.max(1);
        let (v, gm, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gm[j] + bt[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, s, out, rg))
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Res<Var> {
        let s = self.shape(a).to_vec();
        let (out, shape, count) = match axis {
            None => {
                let n = numel(&s);
                (vec![self.value(a).iter().sum::<f64>()], vec![], n)
            }
            Some(ax) => {
                self.check_axis(if mean { "mean" } else { "sum" }, a, ax)?;
                let (outer, len, inner) = axis_split(&s, ax);
                let v = self.value(a);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += v[o * len * inner + j * inner + i];
                        }
                    }
                }
                let mut shape = s.clone();
                shape.remove(ax);
                (out, shape, len)
            }
        };
        let out = if mean { out.into_iter().map(|x| x / count as f64).collect() } else { out };
        let rg = self.rg(&[a]);
        let op = if mean { Op::Mean { a, axis } } else { Op::Sum { a, axis } };
        Ok(self.push(op, shape, out, rg))
    }

    /// Sum over `axis`, or over everything (giving a scalar) when `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Res<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Res<Var> {
        self.reduce(a, axis, true)
    }

    // ---- backward ----

    /// Back-propagates from a scalar `loss`, adding parameter gradients into
    /// `grads`. Returns the gradient of every node that required one.
    pub fn backward(&self, loss: Var, grads: &mut Grads) -> Res<NodeGrads> {
        if numel(self.shape(loss)) != 1 {
            return Err(ComputeError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(NodeGrads { grads: g });
        }
        g[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = g[idx].take() else { continue };
            self.backprop(idx, &gout, &mut g, grads);
            g[idx] = Some(gout);
        }
        Ok(NodeGrads { grads: g })
    }

    fn backprop(&self, idx: usize, gout: &[f64], g: &mut [Option<Vec<f64>>], grads: &mut Grads) {
        let node = &self.nodes[idx];
        let out = match &node.value {
            Storage::Owned(d) => d.as_slice(),
            Storage::Param(_) => &[],
        };
        // lazily allocates the gradient buffer of `v` when it needs one
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.value(v).len();
                    Some(g[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Param(id) => {
                for (t, s) in grads.get_mut(*id).iter_mut().zip(gout) {
                    *t += s;
                }
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a).to_vec();
                if let Some(ga) = acc!(*a) {
                    for i in 0..ga.len() {
                        let d = match *kind {
                            Unary::Neg => -1.0,
                            Unary::Scale(c) => c,
                            Unary::AddScalar(_) => 1.0,
                            Unary::Tanh => 1.0 - out[i] * out[i],
                            Unary::Relu => f64::from(u8::from(x[i] > 0.0)),
                            Unary::Gelu => gelu_grad(x[i]),
                            Unary::Exp => out[i],
                            Unary::Log => 1.0 / x[i],
                            Unary::Sqrt => 0.5 / out[i],
                            Unary::ClampMin(m) => f64::from(u8::from(x[i] > m)),
                        };
                        ga[i] += gout[i] * d;
                    }
                }
            }
            Op::Binary { a, b, kind, map_a, map_b } => {
                let va = self.value(*a).to_vec();
                let vb = self.value(*b).to_vec();
                let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
                let n = gout.len();
                if let Some(ga) = acc!(*a) {
                    for i in 0..n {
                        let (x, y) = (va[ia(i)], vb[ib(i)]);
                        let d = match kind {
                            Binary::Add | Binary::Sub => 1.0,
                            Binary::Mul => y,
                            Binary::Div => 1.0 / y,
                            Binary::Max => f64::from(u8::from(x >= y)),
                        };
                        ga[ia(i)] += gout[i] * d;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..n {
                        let (x, y) = (va[ia(i)], vb[ib(i)]);
                        let d = match kind {
                            Binary::Add => 1.0,
                            Binary::Sub => -1.0,
                            Binary::Mul => x,
                            Binary::Div => -x / (y * y),
                            Binary::Max => f64::from(u8::from(x < y)),
                        };
                        gb[ib(i)] += gout[i] * d;
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.shape[1];
                let va = self.value(*a).to_vec();
                let vb = self.value(*b).to_vec();
                if let Some(ga) = acc!(*a) {
                    // dA = dC · Bᵀ (or dC · B when B was used transposed)
                    let bs = if *trans_b { (k, 1) } else { (1, n) };
                    gemm(m, n, k, gout, (n, 1), &vb, bs, ga, 1.0);
                }
                if let Some(gb) = acc!(*b) {
                    if *trans_b {
                        // dB[n,k] = dCᵀ · A
                        gemm(n, m, k, gout, (1, n), &va, (k, 1), gb, 1.0);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        gemm(k, m, n, &va, (1, k), gout, (n, 1), gb, 1.0);
                    }
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a).to_vec();
                let (r, c) = (s[0], s[1]);
                if let Some(ga) = acc!(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gout[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(gout).for_each(|(t, s)| *t += s);
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                if let Some(ga) = acc!(*a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| gout[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                ga[at(j)] += out[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::GatedSoftmax { scores, gate, ez } => {
                let (q, k) = (node.shape[0], node.shape[1]);
                // row dots Σ_l w[i,l]·G[i,l]
                let dots: Vec<f64> =
                    (0..q).map(|i| (0..k).map(|j| out[i * k + j] * gout[i * k + j]).sum()).collect();
                if let Some(gs) = acc!(*scores) {
                    for i in 0..q {
                        for j in 0..k {
                            let p = i * k + j;
                            gs[p] += out[p] * (gout[p] - dots[i]);
                        }
                    }
                }
                if let Some(gg) = acc!(*gate) {
                    for i in 0..q {
                        for j in 0..k {
                            let p = i * k + j;
                            gg[j] += ez[p] * (gout[p] - dots[i]);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let rows = rstd.len();
                let gm = self.value(*gamma).to_vec();
                if let Some(gg) = acc!(*gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = acc!(*beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += gout[r * d + j];
                        }
                    }
                }
                if let Some(gx) = acc!(*x) {
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gout[r * d + j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = gout[r * d + j] * gm[j];
                            gx[r * d + j] += rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let is_mean = matches!(node.op, Op::Mean { .. });
                let s = self.shape(*a).to_vec();
                if let Some(ga) = acc!(*a) {
                    match axis {
                        None => {
                            let c = if is_mean { gout[0] / ga.len() as f64 } else { gout[0] };
                            ga.iter_mut().for_each(|t| *t += c);
                        }
                        Some(ax) => {
                            let (outer, len, inner) = axis_split(&s, *ax);
                            let scale = if is_mean { 1.0 / len as f64 } else { 1.0 };
                            for o in 0..outer {
                                for j in 0..len {
                                    for i in 0..inner {
                                        ga[o * len * inner + j * inner + i] += gout[o * inner + i] * scale;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(gp) = acc!(p) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (t, s) in gp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(&gout[src..src + len * inner]) {
                                *t += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let s = self.shape(*a).to_vec();
                let (outer, full, inner) = axis_split(&s, *axis);
                let len = node.shape[*axis];
                if let Some(ga) = acc!(*a) {
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        for (t, s) in ga[base..base + len * inner].iter_mut().zip(&gout[o * len * inner..(o + 1) * len * inner]) {
                            *t += s;
                        }
                    }
                }
            }
            Op::Gather { a, index } => {
                let row = numel(&node.shape[1..]);
                if let Some(ga) = acc!(*a) {
                    for (r, &i) in index.iter().enumerate() {
                        for c in 0..row {
                            ga[i * row + c] += gout[r * row + c];
                        }
                    }
                }
            }
            Op::Pick { a, index } => {
                let cols = self.shape(*a)[1];
                if let Some(ga) = acc!(*a) {
                    for (r, &c) in index.iter().enumerate() {
                        ga[r * cols + c] += gout[r];
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                if let Some(ga) = acc!(*a) {
                    for i in 0..ga.len() {
                        if !mask[i] {
                            ga[i] += gout[i];
                        }
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + 0.044715 * x * x * x)
}

fn gelu_grad(x: f64) -> f64 {
    let t = gelu_inner(x).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a trainable array in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so that their joint norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::of(max_norm / norm);
            for g in self.grads.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }
}

enum Value<T: Scalar> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T: Scalar> {
    Input,
    Param(ParamId),
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2 { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax { x: Var },
    Norm { x: Var, gamma: Var, beta: Var, layout: NormLayout, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Relu { x: Var },
    Gelu { x: Var },
    Exp { x: Var },
    Snake { x: Var, alpha: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    AddBroadcast { x: Var, p: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    SwapLast { x: Var },
    Reshape { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    MeanLast { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    L1 { a: Var, b: Var },
    Mse { a: Var, b: Var },
    StraightThrough { x: Var },
    L2NormalizeLast { x: Var, norms: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
}

/// How a normalization op groups its input.
#[derive(Debug, Clone, Copy)]
enum NormLayout {
    /// Normalize over the last axis; affine parameters have that length.
    LastAxis { dim: usize },
    /// `[B, C, L]` split into groups of channels; affine parameters per channel.
    ChannelGroups { channels: usize, len: usize, groups: usize },
}

struct Node<T: Scalar> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records forward computations for one pass and differentiates them.
pub struct Graph<'p, T: Scalar = f32> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph { params: None, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph { params: Some(params), nodes: Vec::new(), param_nodes: HashMap::new() }
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
            Value::Param(id) => self.params.expect("param node without store").get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.value(v).data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, node_op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(op, value.data())?;
        let needs_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node { value: Value::Owned(value), op: node_op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Input, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        assert!(self.params.is_some(), "graph built without a parameter store");
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// 1-D convolution of `x[B, C, L]` with `w[O, C, K]` and optional `b[O]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(Error::config("conv1d", format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        if stride == 0 || dilation == 0 || ws[2] == 0 {
            return Err(Error::config("conv1d", "stride, dilation and kernel size must be >= 1"));
        }
        let span = dilation * (ws[2] - 1) + 1;
        if xs[2] + 2 * padding < span {
            return Err(Error::config("conv1d", format!("length {} too short for kernel span {span}", xs[2])));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::config("conv1d", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            len: xs[2],
            ksize: ws[2],
            stride,
            dilation,
            padding,
            out_len: (xs[2] + 2 * padding - span) / stride + 1,
        };
        let out = kernels::conv1d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom);
        let t = Tensor::new([geom.batch, geom.out_ch, geom.out_len], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv1d", t, Op::Conv1d { x, w, b, geom }, &inputs)
    }

    /// Nearest-neighbour upsampling by 2 along the last axis.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let len = *xs.last().ok_or_else(|| Error::config("upsample2", "scalar input"))?;
        let mut out = Vec::with_capacity(self.value(x).numel() * 2);
        for row in self.data(x).chunks(len.max(1)) {
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() *= 2;
        let t = Tensor::new(shape, out)?;
        self.push("upsample2", t, Op::Upsample2 { x }, &[x])
    }

    /// `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::config("linear", format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::config("linear", format!("bias {:?} for {dout} outputs", self.shape(b))));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(self.data(b));
            }
        }
        T::gemm(rows, din, dout, self.data(x), false, self.data(w), false, &mut out, T::one(), T::one());
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", t, Op::Linear { x, w, b }, &inputs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        let d = *t.shape().last().ok_or_else(|| Error::config("softmax", "scalar input"))?;
        for row in t.data_mut().chunks_mut(d) {
            kernels::softmax_in_place(row);
        }
        self.push("softmax", t, Op::Softmax { x }, &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let dim = *self.shape(x).last().ok_or_else(|| Error::config("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(Error::config("layer_norm", format!("affine parameters must have shape [{dim}]")));
        }
        self.norm("layer_norm", x, gamma, beta, NormLayout::LastAxis { dim }, eps)
    }

    /// Group normalization of `x[B, C, L]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || groups == 0 || xs[1] % groups != 0 {
            return Err(Error::config("group_norm", format!("cannot split {xs:?} into {groups} channel groups")));
        }
        if self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::config("group_norm", format!("affine parameters must have shape [{}]", xs[1])));
        }
        let layout = NormLayout::ChannelGroups { channels: xs[1], len: xs[2], groups };
        self.norm("group_norm", x, gamma, beta, layout, eps)
    }

    fn norm(&mut self, op: &'static str, x: Var, gamma: Var, beta: Var, layout: NormLayout, eps: f64) -> Result<Var> {
        let group = match layout {
            NormLayout::LastAxis { dim } => dim,
            NormLayout::ChannelGroups { channels, len, groups } => channels / groups * len,
        };
        let (xhat, rstd) = kernels::normalize_groups(self.data(x), group, eps);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = xhat.clone();
        match layout {
            NormLayout::LastAxis { dim } => {
                for row in out.chunks_mut(dim) {
                    for ((v, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                        *v = *v * gv + bv;
                    }
                }
            }
            NormLayout::ChannelGroups { channels, len, .. } => {
                for (i, chunk) in out.chunks_mut(len).enumerate() {
                    let c = i % channels;
                    for v in chunk {
                        *v = *v * g[c] + b[c];
                    }
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(op, t, Op::Norm { x, gamma, beta, layout, xhat, rstd }, &[x, gamma, beta])
    }

    /// Multi-head scaled dot-product self-attention core on `[B, T, D]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(Error::config("attention", "q, k, v must share one [B, T, D] shape"));
        }
        if heads == 0 || qs[2] % heads != 0 {
            return Err(Error::config("attention", format!("dimension {} not divisible by {heads} heads", qs[2])));
        }
        let (out, probs) =
            kernels::attention_forward(self.data(q), self.data(k), self.data(v), qs[0], qs[1], qs[2], heads);
        let t = Tensor::new(qs, out)?;
        self.push("attention", t, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", t, Op::Relu { x }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(kernels::gelu);
        self.push("gelu", t, Op::Gelu { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(T::exp);
        self.push("exp", t, Op::Exp { x }, &[x])
    }

    /// Snake activation `x + sin²(αx)/α` on `x[B, C, L]` with per-channel `alpha[C]`.
    pub fn snake(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(alpha) != [xs[1]] {
            return Err(Error::config("snake", format!("alpha {:?} does not match input {xs:?}", self.shape(alpha))));
        }
        let a = self.data(alpha);
        if a.iter().any(|&v| v <= T::zero()) {
            return Err(Error::Usage("snake alpha must be positive".into()));
        }
        let (c, len) = (xs[1], xs[2]);
        let mut out = self.data(x).to_vec();
        for (i, chunk) in out.chunks_mut(len).enumerate() {
            let al = a[i % c];
            for v in chunk {
                let s = (al * *v).sin();
                *v += s * s / al;
            }
        }
        let t = Tensor::new(xs, out)?;
        self.push("snake", t, Op::Snake { x, alpha }, &[x, alpha])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push("add", t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", t, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", t, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let t = self.value(x).map(|v| v * s);
        self.push("scale", t, Op::Scale { x, s }, &[x])
    }

    /// Adds `p` (shaped like the trailing axes of `x`) to every leading index of `x`.
    pub fn add_broadcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xs, ps) = (self.shape(x), self.shape(p));
        if ps.len() > xs.len() || xs[xs.len() - ps.len()..] != *ps {
            return Err(Error::config("add_broadcast", format!("{ps:?} is not a suffix of {xs:?}")));
        }
        let width = self.value(p).numel();
        let mut out = self.data(x).to_vec();
        let pd = self.data(p);
        for chunk in out.chunks_mut(width) {
            for (v, &q) in chunk.iter_mut().zip(pd) {
                *v += q;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("add_broadcast", t, Op::AddBroadcast { x, p }, &[x, p])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::config("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::config("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let width = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * width..][..width]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.push("concat", t, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::config("narrow", format!("[{start}, {}) outside axis {axis} of {xs:?}", start + len)));
        }
        let (outer, n, inner) = split_axis(&xs, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&self.data(x)[(o * n + start) * inner..][..len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        self.push("narrow", t, Op::Narrow { x, axis, start }, &[x])
    }

    /// `[B, A, C] -> [B, C, A]`.
    pub fn swap_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::config("swap_last", format!("expected 3 axes, got {xs:?}")));
        }
        let out = swap_last_data(self.data(x), xs[0], xs[1], xs[2]);
        let t = Tensor::new([xs[0], xs[2], xs[1]], out)?;
        self.push("swap_last", t, Op::SwapLast { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape { x }, &[x])
    }

    /// Gathers rows of `table[V, D]`; the output has shape `shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || shape.iter().product::<usize>() != ids.len() {
            return Err(Error::config("embedding", format!("table {ts:?}, {} ids for shape {shape:?}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(Error::Usage(format!("embedding index {bad} out of range for {} rows", ts[0])));
        }
        let d = ts[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&self.data(table)[i * d..][..d]);
        }
        let mut oshape = shape.to_vec();
        oshape.push(d);
        let t = Tensor::new(oshape, out)?;
        self.push("embedding", t, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let len = *xs.last().ok_or_else(|| Error::config("mean_last", "scalar input"))?;
        let inv = T::of(1.0 / len as f64);
        let out = self.data(x).chunks(len).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let t = Tensor::new(xs[..xs.len() - 1].to_vec(), out)?;
        self.push("mean_last", t, Op::MeanLast { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.data(x).iter().copied().sum());
        self.push("sum", t, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let t = Tensor::scalar(self.data(x).iter().copied().sum::<T>() / T::of(n as f64));
        self.push("mean", t, Op::Mean { x }, &[x])
    }

    /// Weighted mean cross-entropy of `logits[M, K]` against class `targets`.
    ///
    /// Rows with zero weight do not contribute to the loss or its gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(Error::config("cross_entropy", format!("logits {ls:?} for {} targets", targets.len())));
        }
        let k = ls[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Usage(format!("target class {bad} out of range for {k} classes")));
        }
        let weights = match weights {
            Some(w) if w.len() == targets.len() => w.to_vec(),
            Some(w) => return Err(Error::config("cross_entropy", format!("{} weights for {} rows", w.len(), ls[0]))),
            None => vec![T::one(); targets.len()],
        };
        let mut probs = self.data(logits).to_vec();
        let wsum: T = weights.iter().copied().sum();
        let mut loss = T::zero();
        for ((row, &t), &w) in probs.chunks_mut(k).zip(targets).zip(&weights) {
            kernels::softmax_in_place(row);
            if w != T::zero() {
                loss -= w * row[t].max(T::min_positive_value()).ln();
            }
        }
        let loss = if wsum > T::zero() { loss / wsum } else { T::zero() };
        let node = Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs };
        self.push("cross_entropy", Tensor::scalar(loss), node, &[logits])
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_loss", a, b)?;
        let n = self.value(a).numel().max(1);
        let total: T = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| (x - y).abs()).sum();
        self.push("l1_loss", Tensor::scalar(total / T::of(n as f64)), Op::L1 { a, b }, &[a, b])
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let n = self.value(a).numel().max(1);
        let total: T = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push("mse_loss", Tensor::scalar(total / T::of(n as f64)), Op::Mse { a, b }, &[a, b])
    }

    /// Forward value `replacement`, identity gradient into `x`.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor<T>) -> Result<Var> {
        if replacement.shape() != self.shape(x) {
            return Err(Error::config("straight_through", format!("{:?} vs {:?}", replacement.shape(), self.shape(x))));
        }
        self.push("straight_through", replacement, Op::StraightThrough { x }, &[x])
    }

    /// Scales each vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize_last(&mut self, x: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::config("l2_normalize_last", "scalar input"))?;
        let mut out = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(eps));
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("l2_normalize_last", t, Op::L2NormalizeLast { x, norms }, &[x])
    }

    /// Batch normalization of `x[B, C, L]` using the statistics of this batch.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::config("batch_norm", format!("input {xs:?} with affine {:?}", self.shape(gamma))));
        }
        let (b, c, l) = (xs[0], xs[1], xs[2]);
        let by_channel = channel_major(self.data(x), b, c, l);
        let (xhat, rstd) = kernels::normalize_groups(&by_channel, b * l, eps);
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let mut y = xhat.clone();
        for (ch, row) in y.chunks_mut(b * l).enumerate() {
            for v in row {
                *v = *v * gm[ch] + bt[ch];
            }
        }
        let t = Tensor::new(xs, batch_major(&y, b, c, l))?;
        self.push("batch_norm", t, Op::BatchNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// `x[B, C, L] * scale[C] + shift[C]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(scale) != [xs[1]] || self.shape(shift) != [xs[1]] {
            return Err(Error::config("channel_affine", format!("input {xs:?} with scale {:?}", self.shape(scale))));
        }
        let (c, l) = (xs[1], xs[2]);
        let (sc, sh) = (self.data(scale), self.data(shift));
        let mut out = self.data(x).to_vec();
        for (j, row) in out.chunks_mut(l).enumerate() {
            for v in row {
                *v = *v * sc[j % c] + sh[j % c];
            }
        }
        let t = Tensor::new(xs, out)?;
        self.push("channel_affine", t, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let nparams = self.params.map_or(0, ParamStore::len);
        let mut out = Gradients { grads: vec![None; nparams] };
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape");
        let gd = g.data();

        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(id) => match &mut out.grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            },
            Op::Conv1d { x, w, b, geom } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let cg = kernels::conv1d_backward(self.data(*x), self.data(*w), gd, geom, need);
                if let Some(dx) = cg.dx {
                    acc(*x, like(*x, dx));
                }
                if let Some(dw) = cg.dw {
                    acc(*w, like(*w, dw));
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    acc(*b, like(*b, db));
                }
            }
            Op::Upsample2 { x } => {
                let dx = gd.chunks(2).map(|p| p[0] + p[1]).collect();
                acc(*x, like(*x, dx));
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = gd.len() / dout;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    T::gemm(rows, dout, din, gd, false, self.data(*w), true, &mut dx, T::one(), T::zero());
                    acc(*x, like(*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    T::gemm(din, rows, dout, self.data(*x), true, gd, false, &mut dw, T::one(), T::zero());
                    acc(*w, like(*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, like(*b, db));
                }
            }
            Op::Softmax { x } => {
                let y = self.value(Var(i)).data();
                let d = *self.shape(*x).last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for ((dst, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::Norm { x, gamma, beta, layout, xhat, rstd } => {
                let gam = self.data(*gamma);
                let mut dgamma = vec![T::zero(); gam.len()];
                let mut dbeta = vec![T::zero(); gam.len()];
                let mut dxhat = vec![T::zero(); gd.len()];
                let (group, chunk, channels) = match *layout {
                    NormLayout::LastAxis { dim } => (dim, 1, dim),
                    NormLayout::ChannelGroups { channels, len, groups } => (channels / groups * len, len, channels),
                };
                // `chunk` consecutive values share one affine channel
                for (j, ((gc, xc), dc)) in gd.chunks(chunk).zip(xhat.chunks(chunk)).zip(dxhat.chunks_mut(chunk)).enumerate() {
                    let c = j % channels;
                    for ((&gv, &xv), d) in gc.iter().zip(xc).zip(dc.iter_mut()) {
                        dgamma[c] += gv * xv;
                        dbeta[c] += gv;
                        *d = gv * gam[c];
                    }
                }
                if self.needs(*x) {
                    let dx = kernels::normalize_groups_backward(xhat, rstd, &dxhat, group);
                    acc(*x, like(*x, dx));
                }
                acc(*gamma, like(*gamma, dgamma));
                acc(*beta, like(*beta, dbeta));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let s = self.shape(*q);
                let (dq, dk, dv) = kernels::attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    gd,
                    s[0],
                    s[1],
                    s[2],
                    *heads,
                );
                acc(*q, like(*q, dq));
                acc(*k, like(*k, dk));
                acc(*v, like(*v, dv));
            }
            Op::Relu { x } => {
                let dx = self.data(*x).iter().zip(gd).map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() }).collect();
                acc(*x, like(*x, dx));
            }
            Op::Gelu { x } => {
                let dx = self.data(*x).iter().zip(gd).map(|(&xv, &gv)| gv * kernels::gelu_grad(xv)).collect();
                acc(*x, like(*x, dx));
            }
            Op::Exp { x } => {
                let y = self.value(Var(i)).data();
                let dx = y.iter().zip(gd).map(|(&yv, &gv)| yv * gv).collect();
                acc(*x, like(*x, dx));
            }
            Op::Snake { x, alpha } => {
                let xs = self.shape(*x);
                let (c, len) = (xs[1], xs[2]);
                let a = self.data(*alpha);
                let mut dx = vec![T::zero(); gd.len()];
                let mut da = vec![T::zero(); c];
                let two = T::of(2.0);
                for (j, ((xc, gc), dc)) in self.data(*x).chunks(len).zip(gd.chunks(len)).zip(dx.chunks_mut(len)).enumerate() {
                    let ch = j % c;
                    let al = a[ch];
                    for ((&xv, &gv), d) in xc.iter().zip(gc).zip(dc.iter_mut()) {
                        let s = (al * xv).sin();
                        let s2 = (two * al * xv).sin();
                        *d = gv * (T::one() + s2);
                        da[ch] += gv * (xv * s2 / al - s * s / (al * al));
                    }
                }
                acc(*x, like(*x, dx));
                acc(*alpha, like(*alpha, da));
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let da = gd.iter().zip(self.data(*b)).map(|(&gv, &bv)| gv * bv).collect();
                let db = gd.iter().zip(self.data(*a)).map(|(&gv, &av)| gv * av).collect();
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::Scale { x, s } => {
                let s = *s;
                acc(*x, g.map(|v| v * s));
            }
            Op::AddBroadcast { x, p } => {
                let width = self.value(*p).numel();
                let mut dp = vec![T::zero(); width];
                for chunk in gd.chunks(width) {
                    for (d, &v) in dp.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(*p, like(*p, dp));
                acc(*x, g);
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape().to_vec();
                let (outer, total, inner) = split_axis(&shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            dp.extend_from_slice(&gd[(o * total + offset) * inner..][..n * inner]);
                        }
                        acc(p, like(p, dp));
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    dx[(o * n + start) * inner..][..len * inner].copy_from_slice(&gd[o * len * inner..][..len * inner]);
                }
                acc(*x, like(*x, dx));
            }
            Op::SwapLast { x } => {
                let s = g.shape();
                let dx = swap_last_data(gd, s[0], s[1], s[2]);
                acc(*x, like(*x, dx));
            }
            Op::Reshape { x } => {
                acc(*x, like(*x, g.into_data()));
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let mut dt = vec![T::zero(); ts[0] * d];
                for (&id, row) in ids.iter().zip(gd.chunks(d)) {
                    for (o, &v) in dt[id * d..][..d].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*table, like(*table, dt));
            }
            Op::MeanLast { x } => {
                let len = *self.shape(*x).last().unwrap();
                let inv = T::of(1.0 / len as f64);
                let dx = gd.iter().flat_map(|&v| std::iter::repeat_n(v * inv, len)).collect();
                acc(*x, like(*x, dx));
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                acc(*x, like(*x, vec![gd[0]; n]));
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                acc(*x, like(*x, vec![gd[0] / T::of(n as f64); n]));
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let k = self.shape(*logits)[1];
                let wsum: T = weights.iter().copied().sum();
                let mut dl = vec![T::zero(); probs.len()];
                if wsum > T::zero() {
                    let scale = gd[0] / wsum;
                    for (((dst, p), &t), &w) in dl.chunks_mut(k).zip(probs.chunks(k)).zip(targets).zip(weights) {
                        if w == T::zero() {
                            continue;
                        }
                        for (d, &pv) in dst.iter_mut().zip(p) {
                            *d = pv * w * scale;
                        }
                        dst[t] -= w * scale;
                    }
                }
                acc(*logits, like(*logits, dl));
            }
            Op::L1 { a, b } => {
                let n = T::of(self.value(*a).numel().max(1) as f64);
                let s = gd[0] / n;
                let da: Vec<T> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            s
                        } else if d < T::zero() {
                            -s
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let db = da.iter().map(|&v| -v).collect();
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::Mse { a, b } => {
                let n = T::of(self.value(*a).numel().max(1) as f64);
                let s = T::of(2.0) * gd[0] / n;
                let da: Vec<T> = self.data(*a).iter().zip(self.data(*b)).map(|(&x, &y)| s * (x - y)).collect();
                let db = da.iter().map(|&v| -v).collect();
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::StraightThrough { x } => {
                acc(*x, g);
            }
            Op::L2NormalizeLast { x, norms } => {
                let y = self.value(Var(i)).data();
                let d = y.len() / norms.len().max(1);
                let mut dx = vec![T::zero(); y.len()];
                for (((dst, yr), gr), &n) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd } => {
                let s = self.shape(*x);
                let (b, c, l) = (s[0], s[1], s[2]);
                let gcm = channel_major(gd, b, c, l);
                let gm = self.data(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); gcm.len()];
                for (ch, ((gr, xr), dr)) in gcm.chunks(b * l).zip(xhat.chunks(b * l)).zip(dxhat.chunks_mut(b * l)).enumerate() {
                    for ((&gv, &xv), d) in gr.iter().zip(xr).zip(dr.iter_mut()) {
                        dgamma[ch] += gv * xv;
                        dbeta[ch] += gv;
                        *d = gv * gm[ch];
                    }
                }
                if self.needs(*x) {
                    let dx = kernels::normalize_groups_backward(xhat, rstd, &dxhat, b * l);
                    acc(*x, like(*x, batch_major(&dx, b, c, l)));
                }
                acc(*gamma, like(*gamma, dgamma));
                acc(*beta, like(*beta, dbeta));
            }
            Op::ChannelAffine { x, scale, shift } => {
                let s = self.shape(*x);
                let (c, l) = (s[1], s[2]);
                let sc = self.data(*scale);
                let mut dx = vec![T::zero(); gd.len()];
                let mut dscale = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                for (j, ((gr, xr), dr)) in gd.chunks(l).zip(self.data(*x).chunks(l)).zip(dx.chunks_mut(l)).enumerate() {
                    let ch = j % c;
                    for ((&gv, &xv), d) in gr.iter().zip(xr).zip(dr.iter_mut()) {
                        *d = gv * sc[ch];
                        dscale[ch] += gv * xv;
                        dshift[ch] += gv;
                    }
                }
                acc(*x, like(*x, dx));
                acc(*scale, like(*scale, dscale));
                acc(*shift, like(*shift, dshift));
            }
        }
        Ok(())
    }
}

/// `[B, C, L]` to `[C, B*L]`.
fn channel_major<T: Scalar>(src: &[T], b: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ch in 0..c {
            out[(ch * b + bi) * l..][..l].copy_from_slice(&src[(bi * c + ch) * l..][..l]);
        }
    }
    out
}

/// Inverse of [`channel_major`].
fn batch_major<T: Scalar>(src: &[T], b: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ch in 0..c {
            out[(bi * c + ch) * l..][..l].copy_from_slice(&src[(ch * b + bi) * l..][..l]);
        }
    }
    out
}

fn swap_last_data<T: Scalar>(src: &[T], b: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        let s = &src[bi * rows * cols..][..rows * cols];
        let d = &mut out[bi * rows * cols..][..rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

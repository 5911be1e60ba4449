//! Parameterized layers over the autodiff graph.

use nmvq_autodiff::rng::Rng;
use nmvq_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng as _;

use crate::error::Result;

pub const NORM_EPS: f64 = 1e-5;

fn uniform(shape: &[usize], bound: f32, rng: &mut Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParamStore<f32>,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / ((cin * k) as f32).sqrt();
        let w = ps.add(format!("{name}.w"), uniform(&[cout, cin, k], bound, rng));
        let b = ps.add(format!("{name}.b"), uniform(&[cout], bound, rng));
        Conv1d { w, b, stride, dilation: 1, padding }
    }

    /// Same-length convolution with an odd kernel.
    pub fn same(ps: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Self {
        Self::new(ps, name, (cin, cout, k), 1, k / 2, rng)
    }

    pub fn zeroed(self, ps: &mut ParamStore<f32>) -> Self {
        ps.get_mut(self.w).data_mut().fill(0.0);
        ps.get_mut(self.b).data_mut().fill(0.0);
        self
    }

    pub fn forward(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.conv1d(x, w, Some(b), self.stride, self.dilation, self.padding)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamStore<f32>, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (din as f32).sqrt();
        let w = ps.add(format!("{name}.w"), uniform(&[din, dout], bound, rng));
        let b = ps.add(format!("{name}.b"), uniform(&[dout], bound, rng));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.linear(x, w, Some(b))?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore<f32>, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.g"), Tensor::full([dim], 1.0));
        let beta = ps.add(format!("{name}.b"), Tensor::zeros([dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        Ok(g.layer_norm(x, gm, bt, NORM_EPS)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// Up to 8 groups, always a divisor of `channels`.
    pub fn new(ps: &mut ParamStore<f32>, name: &str, channels: usize) -> Self {
        let groups = (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
        let gamma = ps.add(format!("{name}.g"), Tensor::full([channels], 1.0));
        let beta = ps.add(format!("{name}.b"), Tensor::zeros([channels]));
        GroupNorm { gamma, beta, groups }
    }

    pub fn forward(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        Ok(g.group_norm(x, self.groups, gm, bt, NORM_EPS)?)
    }
}

/// Pre-norm transformer block on `[B, T, D]`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl TransformerBlock {
    pub fn new(ps: &mut ParamStore<f32>, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        TransformerBlock {
            norm1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim, rng),
            norm2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            ff1: Linear::new(ps, &format!("{name}.ff1"), dim, 4 * dim, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), 4 * dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self_attention(g, &self.qkv, &self.proj, h, self.dim, self.heads)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.ff1.forward(g, h)?;
        let h = g.gelu(h)?;
        let h = self.ff2.forward(g, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Fused-projection self-attention on `[B, T, D]`; the caller adds the residual.
pub fn self_attention(
    g: &mut Graph<'_, f32>,
    qkv: &Linear,
    proj: &Linear,
    h: Var,
    dim: usize,
    heads: usize,
) -> Result<Var> {
    let packed = qkv.forward(g, h)?;
    let q = g.narrow(packed, 2, 0, dim)?;
    let k = g.narrow(packed, 2, dim, dim)?;
    let v = g.narrow(packed, 2, 2 * dim, dim)?;
    let a = g.attention(q, k, v, heads)?;
    proj.forward(g, a)
}

/// Runs `f` on a graph without keeping it, returning the value of its output.
pub fn eval<F>(ps: &ParamStore<f32>, f: F) -> Result<Tensor<f32>>
where
    F: FnOnce(&mut Graph<'_, f32>) -> Result<Var>,
{
    let mut g = Graph::with_params(ps);
    let out = f(&mut g)?;
    Ok(g.value(out).clone())
}

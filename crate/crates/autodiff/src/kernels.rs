//! Slice-level forward and backward kernels behind the graph operations.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub len: usize,
    pub ksize: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub out_len: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.in_ch * self.ksize
    }

    fn cols_width(&self) -> usize {
        self.batch * self.out_len
    }
}

/// Output positions `t` whose input index `t * stride + offset` lies in `[0, len)`.
fn valid_range(g: &ConvGeom, offset: isize) -> (usize, usize) {
    let s = g.stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset + s - 1) / s) as usize };
    let hi = if (g.len as isize) <= offset { 0 } else { ((g.len as isize - offset + s - 1) / s) as usize };
    (lo.min(g.out_len), hi.min(g.out_len).max(lo.min(g.out_len)))
}

/// Unfolds `x[B, C, L]` into `cols[C*K, B*L']`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let width = g.cols_width();
    let mut cols = vec![T::zero(); g.cols_rows() * width];
    for c in 0..g.in_ch {
        for kk in 0..g.ksize {
            let row = &mut cols[(c * g.ksize + kk) * width..][..width];
            let offset = (kk * g.dilation) as isize - g.padding as isize;
            let (lo, hi) = valid_range(g, offset);
            for b in 0..g.batch {
                let src = &x[(b * g.in_ch + c) * g.len..][..g.len];
                let dst = &mut row[b * g.out_len..][..g.out_len];
                if g.stride == 1 {
                    let start = (lo as isize + offset) as usize;
                    dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                } else {
                    for t in lo..hi {
                        dst[t] = src[(t as isize * g.stride as isize + offset) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let width = g.cols_width();
    for c in 0..g.in_ch {
        for kk in 0..g.ksize {
            let row = &cols[(c * g.ksize + kk) * width..][..width];
            let offset = (kk * g.dilation) as isize - g.padding as isize;
            let (lo, hi) = valid_range(g, offset);
            for b in 0..g.batch {
                let dst = &mut dx[(b * g.in_ch + c) * g.len..][..g.len];
                let src = &row[b * g.out_len..][..g.out_len];
                if g.stride == 1 {
                    let start = (lo as isize + offset) as usize;
                    for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                        *d += v;
                    }
                } else {
                    for t in lo..hi {
                        dst[(t as isize * g.stride as isize + offset) as usize] += src[t];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let cols = im2col(x, g);
    let width = g.cols_width();
    let mut y2 = vec![T::zero(); g.out_ch * width];
    T::gemm(g.out_ch, g.cols_rows(), width, w, false, &cols, false, &mut y2, T::one(), T::zero());
    let mut out = vec![T::zero(); g.batch * g.out_ch * g.out_len];
    for o in 0..g.out_ch {
        let b0 = bias.map_or(T::zero(), |b| b[o]);
        for b in 0..g.batch {
            let src = &y2[o * width + b * g.out_len..][..g.out_len];
            let dst = &mut out[(b * g.out_ch + o) * g.out_len..][..g.out_len];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b0;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let width = g.cols_width();
    let mut dy2 = vec![T::zero(); g.out_ch * width];
    for o in 0..g.out_ch {
        for b in 0..g.batch {
            let src = &dout[(b * g.out_ch + o) * g.out_len..][..g.out_len];
            dy2[o * width + b * g.out_len..][..g.out_len].copy_from_slice(src);
        }
    }
    let db = need.2.then(|| (0..g.out_ch).map(|o| dy2[o * width..][..width].iter().copied().sum()).collect());
    let dw = need.1.then(|| {
        let cols = im2col(x, g);
        let mut dw = vec![T::zero(); w.len()];
        T::gemm(g.out_ch, width, g.cols_rows(), &dy2, false, &cols, true, &mut dw, T::one(), T::zero());
        dw
    });
    let dx = need.0.then(|| {
        let mut dcols = vec![T::zero(); g.cols_rows() * width];
        T::gemm(g.cols_rows(), g.out_ch, width, w, true, &dy2, false, &mut dcols, T::one(), T::zero());
        let mut dx = vec![T::zero(); x.len()];
        col2im_add(&dcols, g, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Multi-head scaled dot-product attention over `[B, T, D]` inputs.
/// Returns the output and the attention probabilities `[B, H, T, T]`.
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    seq: usize,
    dim: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = dim / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); batch * seq * dim];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut qh = vec![T::zero(); seq * dh];
    let mut kh = vec![T::zero(); seq * dh];
    let mut vh = vec![T::zero(); seq * dh];
    let mut oh = vec![T::zero(); seq * dh];
    for b in 0..batch {
        for h in 0..heads {
            gather_head(q, b, h, seq, dim, dh, &mut qh);
            gather_head(k, b, h, seq, dim, dh, &mut kh);
            gather_head(v, b, h, seq, dim, dh, &mut vh);
            let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
            T::gemm(seq, dh, seq, &qh, false, &kh, true, p, scale, T::zero());
            for row in p.chunks_mut(seq) {
                softmax_in_place(row);
            }
            T::gemm(seq, seq, dh, p, false, &vh, false, &mut oh, T::one(), T::zero());
            scatter_head(&oh, b, h, seq, dim, dh, &mut out, false);
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    batch: usize,
    seq: usize,
    dim: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = dim / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let n = batch * seq * dim;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let mut qh = vec![T::zero(); seq * dh];
    let mut kh = vec![T::zero(); seq * dh];
    let mut vh = vec![T::zero(); seq * dh];
    let mut doh = vec![T::zero(); seq * dh];
    let mut tmp = vec![T::zero(); seq * dh];
    let mut dp = vec![T::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            gather_head(q, b, h, seq, dim, dh, &mut qh);
            gather_head(k, b, h, seq, dim, dh, &mut kh);
            gather_head(v, b, h, seq, dim, dh, &mut vh);
            gather_head(dout, b, h, seq, dim, dh, &mut doh);
            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
            // dV = P^T dO
            T::gemm(seq, seq, dh, p, true, &doh, false, &mut tmp, T::one(), T::zero());
            scatter_head(&tmp, b, h, seq, dim, dh, &mut dv, true);
            // dP = dO V^T, then through the row softmax
            T::gemm(seq, dh, seq, &doh, false, &vh, true, &mut dp, T::one(), T::zero());
            for (dprow, prow) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                let dot: T = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in dprow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            T::gemm(seq, seq, dh, &dp, false, &kh, false, &mut tmp, scale, T::zero());
            scatter_head(&tmp, b, h, seq, dim, dh, &mut dq, true);
            T::gemm(seq, seq, dh, &dp, true, &qh, false, &mut tmp, scale, T::zero());
            scatter_head(&tmp, b, h, seq, dim, dh, &mut dk, true);
        }
    }
    (dq, dk, dv)
}

fn gather_head<T: Scalar>(src: &[T], b: usize, h: usize, seq: usize, dim: usize, dh: usize, dst: &mut [T]) {
    for t in 0..seq {
        let from = &src[(b * seq + t) * dim + h * dh..][..dh];
        dst[t * dh..][..dh].copy_from_slice(from);
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_head<T: Scalar>(
    src: &[T],
    b: usize,
    h: usize,
    seq: usize,
    dim: usize,
    dh: usize,
    dst: &mut [T],
    accumulate: bool,
) {
    for t in 0..seq {
        let to = &mut dst[(b * seq + t) * dim + h * dh..][..dh];
        let from = &src[t * dh..][..dh];
        if accumulate {
            for (a, &s) in to.iter_mut().zip(from) {
                *a += s;
            }
        } else {
            to.copy_from_slice(from);
        }
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Normalizes each contiguous group of `group` values; returns `(xhat, rstd)`.
pub(crate) fn normalize_groups<T: Scalar>(x: &[T], group: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / group);
    let inv_n = T::of(1.0 / group as f64);
    for (src, dst) in x.chunks(group).zip(xhat.chunks_mut(group)) {
        let mean = src.iter().copied().sum::<T>() * inv_n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let r = T::one() / (var + T::of(eps)).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Gradient through the normalization given `dxhat`.
pub(crate) fn normalize_groups_backward<T: Scalar>(xhat: &[T], rstd: &[T], dxhat: &[T], group: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); xhat.len()];
    let inv_n = T::of(1.0 / group as f64);
    for (((xh, dxh), dst), &r) in xhat.chunks(group).zip(dxhat.chunks(group)).zip(dx.chunks_mut(group)).zip(rstd) {
        let mean_d = dxh.iter().copied().sum::<T>() * inv_n;
        let mean_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
        for ((d, &g), &xv) in dst.iter_mut().zip(dxh).zip(xh) {
            *d = r * (g - mean_d - xv * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

// 1 + tanh(u) = 2 sigmoid(2u); one exp is much cheaper than tanh.
fn gelu_sigmoid<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_sigmoid(x)
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k) = (T::of(GELU_C), T::of(GELU_K));
    let s = gelu_sigmoid(x);
    s + T::of(2.0) * x * s * (T::one() - s) * c * (T::one() + T::of(3.0) * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_ch * g.out_len];
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                for t in 0..g.out_len {
                    let mut acc = 0.0;
                    for c in 0..g.in_ch {
                        for kk in 0..g.ksize {
                            let pos = (t * g.stride + kk * g.dilation) as isize - g.padding as isize;
                            if pos >= 0 && (pos as usize) < g.len {
                                acc += w[(o * g.in_ch + c) * g.ksize + kk] * x[(b * g.in_ch + c) * g.len + pos as usize];
                            }
                        }
                    }
                    out[(b * g.out_ch + o) * g.out_len + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for (len, ksize, stride, dilation, padding) in [(11, 3, 2, 2, 1), (9, 3, 1, 1, 1), (16, 4, 2, 1, 1), (7, 5, 1, 3, 6), (12, 1, 3, 1, 0)] {
            let g = ConvGeom { batch: 2, in_ch: 3, out_ch: 4, len, ksize, stride, dilation, padding, out_len: 0 };
            let g = ConvGeom { out_len: (g.len + 2 * g.padding - g.dilation * (g.ksize - 1) - 1) / g.stride + 1, ..g };
            let x: Vec<f64> = (0..g.batch * g.in_ch * g.len).map(|i| (i as f64 * 0.3).sin()).collect();
            let w: Vec<f64> = (0..g.out_ch * g.in_ch * g.ksize).map(|i| (i as f64 * 0.7).cos()).collect();
            let got = conv1d_forward(&x, &w, None, &g);
            let want = direct_conv(&x, &w, &g);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_stable_for_large_logits() {
        let mut row = vec![1000.0_f64, 1000.0, -1000.0];
        softmax_in_place(&mut row);
        assert!((row[0] - 0.5).abs() < 1e-12);
        assert!(row[2] >= 0.0);
    }
}

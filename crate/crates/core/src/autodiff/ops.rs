//! Forward definitions of the recorded primitives.

use super::{Graph, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{gelu, mm_nn, swish, Element, Tensor};

/// Splits `shape` into (outer, tokens, width) around the token axis (-2).
pub(crate) fn token_split(shape: &[usize]) -> Option<(usize, usize, usize)> {
    let r = shape.len();
    if r < 2 {
        return None;
    }
    Some((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

/// Swaps axes `a` and `b` of a row-major buffer.
pub(crate) fn swap_axes<T: Element>(data: &[T], shape: &[usize], a: usize, b: usize) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(a, b);
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        let src: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Checks that `small` is a trailing suffix of `big`; returns the suffix size.
pub(crate) fn suffix_len(op: &'static str, big: &[usize], small: &[usize]) -> Result<usize> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return Err(shape_err(op, format!("{big:?} and {small:?} do not broadcast (rhs must be a trailing suffix)")));
    }
    Ok(small.iter().product())
}

impl<T: Element> Graph<T> {
    /// `a[..., m, k] · b[k, n]` or, when `b` has the same leading dims as
    /// `a`, a batched product over them.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}: operands need rank >= 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}: inner dims {k} != {kb}")));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let value = if sb.len() == 2 {
            let rows = sa[..sa.len() - 1].iter().product();
            mm_nn(self.value(a).data(), self.value(b).data(), rows, k, n)
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(shape_err("matmul", format!("{sa:?} x {sb:?}: batch dims differ")));
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let mut out = Vec::with_capacity(batch * m * n);
            for bi in 0..batch {
                out.extend(mm_nn(&da[bi * m * k..(bi + 1) * m * k], &db[bi * k * n..(bi + 1) * k * n], m, k, n));
            }
            out
        };
        Ok(self.record(Op::MatMul, vec![a, b], Tensor::new(out_shape, value)?))
    }

    /// Elementwise sum; `b` may be a trailing suffix of `a` (bias broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = suffix_len("add", self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let data = va.data().chunks(inner.max(1)).flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| x + y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(Op::Add, vec![a, b], value))
    }

    /// Elementwise product; `b` may be a trailing suffix of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = suffix_len("mul", self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let data = va.data().chunks(inner.max(1)).flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| x * y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(Op::Mul, vec![a, b], value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::lit(factor);
        let value = self.value(a).map(|x| x * f);
        Ok(self.record(Op::Scale(factor), vec![a], value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.record(Op::Reshape, vec![a], value))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, ax1: usize, ax2: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if ax1 >= shape.len() || ax2 >= shape.len() {
            return Err(shape_err("transpose", format!("axes ({ax1}, {ax2}) out of range for {shape:?}")));
        }
        let (data, out_shape) = swap_axes(self.value(a).data(), &shape, ax1, ax2);
        Ok(self.record(Op::Transpose(ax1, ax2), vec![a], Tensor::new(out_shape, data)?))
    }

    /// Concatenation along the token axis (-2).
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_tokens", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        let (outer, _, width) = token_split(&s0).ok_or_else(|| shape_err("concat_tokens", format!("{s0:?}")))?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[..s.len() - 2] != s0[..s0.len() - 2] || s[s.len() - 1] != width {
                return Err(shape_err("concat_tokens", format!("{s0:?} vs {s:?}")));
            }
            total += s[s.len() - 2];
        }
        let mut data = Vec::with_capacity(outer * total * width);
        for o in 0..outer {
            for &p in parts {
                let t = self.shape(p)[s0.len() - 2];
                data.extend_from_slice(&self.value(p).data()[o * t * width..(o + 1) * t * width]);
            }
        }
        let mut shape = s0.clone();
        let r = shape.len();
        shape[r - 2] = total;
        Ok(self.record(Op::ConcatTokens, parts.to_vec(), Tensor::new(shape, data)?))
    }

    /// Tokens `start..start + len` along axis -2.
    pub fn slice_tokens(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (outer, t, width) = token_split(&s).ok_or_else(|| shape_err("slice_tokens", format!("{s:?}")))?;
        if start + len > t {
            return Err(shape_err("slice_tokens", format!("range {start}..{} exceeds {t} tokens", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * width);
        for o in 0..outer {
            let base = o * t * width;
            data.extend_from_slice(&src[base + start * width..base + (start + len) * width]);
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = len;
        Ok(self.record(Op::SliceTokens { start, len }, vec![a], Tensor::new(shape, data)?))
    }

    /// Repeats `a` along a new leading axis of size `batch`.
    pub fn broadcast(&mut self, a: Var, batch: usize) -> Result<Var> {
        let v = self.value(a);
        let mut shape = vec![batch];
        shape.extend_from_slice(v.shape());
        let data = (0..batch).flat_map(|_| v.data().iter().copied()).collect();
        Ok(self.record(Op::Broadcast, vec![a], Tensor::new(shape, data)?))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let width = *v.shape().last().ok_or(Error::EmptyAxis { op: "softmax" })?;
        if width == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut sum = T::zero();
            for &x in row {
                let e = (x - max).exp();
                sum = sum + e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e = *e / sum;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.record(Op::Softmax, vec![a], value))
    }

    /// Layer normalisation over the last axis with learnable gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or(Error::EmptyAxis { op: "layer_norm" })?;
        if d == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("x {s:?} with gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let epsilon = T::lit(eps);
        let n = T::lit(d as f64);
        let mut data = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + epsilon).sqrt();
            data.extend(row.iter().zip(g).zip(b).map(|((&v, &gi), &bi)| (v - mean) * rstd * gi + bi));
        }
        Ok(self.record(Op::LayerNorm { eps }, vec![x, gamma, beta], Tensor::new(s, data)?))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        Ok(self.record(Op::Gelu, vec![a], value))
    }

    /// `x·σ(βx)` with a branch-wise sigmoid.
    pub fn swish(&mut self, a: Var, beta: f64) -> Result<Var> {
        let b = T::lit(beta);
        let value = self.value(a).map(|x| swish(x, b));
        Ok(self.record(Op::Swish { beta }, vec![a], value))
    }

    /// Per-channel k×k convolution, stride 1, zero padding that preserves the
    /// spatial size. `x` is `[..., C, H, W]`, `kernel` is `[C, k, k]`, `bias` is `[C]`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if s.len() < 3 || ks.len() != 3 {
            return Err(shape_err("depthwise_conv2d", format!("input {s:?}, kernel {ks:?}")));
        }
        let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
        let k = ks[1];
        if ks[0] != c || ks[2] != k || self.shape(bias) != [c] {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("input {s:?}, kernel {ks:?}, bias {:?}", self.shape(bias)),
            ));
        }
        if k.is_multiple_of(2) {
            return Err(Error::EvenKernel { size: k });
        }
        let out = depthwise_forward(self.value(x).data(), self.value(kernel).data(), self.value(bias).data(), c, h, w, k);
        Ok(self.record(Op::DepthwiseConv2d { kernel: k }, vec![x, kernel, bias], Tensor::new(s, out)?))
    }

    /// Mean softmax cross-entropy of `logits [B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy", format!("logits {s:?} with {} labels", labels.len())));
        }
        let (b, c) = (s[0], s[1]);
        if c == 0 || b == 0 {
            return Err(Error::EmptyAxis { op: "cross_entropy" });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(shape_err("cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let mut total = T::zero();
        for (row, &label) in self.value(logits).data().chunks(c).zip(labels) {
            total = total + (log_sum_exp(row) - row[label]);
        }
        let loss = total / T::lit(b as f64);
        Ok(self.record(Op::CrossEntropy { labels: labels.to_vec() }, vec![logits], Tensor::scalar(loss)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum();
        Ok(self.record(Op::Sum, vec![a], Tensor::scalar(total)))
    }

    /// `(x·a)·b` for `x [..., d]`, `a [d, r]`, `b [r, e]`, associated so the
    /// `d×e` product is never formed.
    pub fn low_rank(&mut self, x: Var, a: Var, b: Var) -> Result<Var> {
        let (sx, sa, sb) = (self.shape(x).to_vec(), self.shape(a).to_vec(), self.shape(b).to_vec());
        let d = *sx.last().ok_or_else(|| shape_err("low_rank", "scalar input"))?;
        if sa.len() != 2 || sb.len() != 2 || sa[0] != d || sa[1] != sb[0] {
            return Err(shape_err("low_rank", format!("x {sx:?}, a {sa:?}, b {sb:?}")));
        }
        let (r, e) = (sa[1], sb[1]);
        let rows = self.value(x).numel() / d.max(1);
        let u = mm_nn(self.value(x).data(), self.value(a).data(), rows, d, r);
        let out = mm_nn(&u, self.value(b).data(), rows, r, e);
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = e;
        Ok(self.record(Op::LowRank, vec![x, a, b], Tensor::new(shape, out)?))
    }
}

pub(crate) fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

pub(crate) fn depthwise_forward<T: Element>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let r = (k / 2) as isize;
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for (idx, out_plane) in out.chunks_mut(plane).enumerate() {
        let ch = idx % c;
        let src = &x[idx * plane..(idx + 1) * plane];
        let ker = &kernel[ch * k * k..(ch + 1) * k * k];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = bias[ch];
                for dy in 0..k as isize {
                    let sy = y + dy - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k as isize {
                        let sx = xx + dx - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc = acc + ker[(dy * k as isize + dx) as usize] * src[(sy * w as isize + sx) as usize];
                    }
                }
                out_plane[(y * w as isize + xx) as usize] = acc;
            }
        }
    }
    out
}

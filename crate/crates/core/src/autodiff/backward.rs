use super::ops::{log_sum_exp, swap_axes, token_split};
use super::{GradStore, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gelu_grad, mm_nn, mm_nt, mm_tn, swish_grad, Element, Tensor};

fn reduce_to_suffix<T: Element>(g: &[T], inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); inner];
    for row in g.chunks(inner.max(1)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

impl<T: Element> Graph<T> {
    /// Reverse pass from a scalar loss. Nodes are visited in descending id
    /// order, so gradient accumulation order is fixed.
    pub fn backward(&self, loss: Var) -> Result<GradStore<T>> {
        let node = self.node(loss)?;
        if !node.shape.is_empty() {
            return Err(Error::NonScalarLoss { shape: node.shape.clone() });
        }
        if !node.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut store = GradStore::default();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Param { name, .. } = &node.op {
                store.insert(name.clone(), g);
                continue;
            }
            let input_grads = self.input_grads(id, &g)?;
            for (input, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(store)
    }

    /// Gradient for each input of node `id` that requires grad.
    fn input_grads(&self, id: usize, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.nodes[id];
        let rg: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
        let in_shape = |i: usize| self.nodes[node.inputs[i].0].shape.clone();
        let saved = |i: usize| self.saved_value(id, node.inputs[i]);
        let mk = |shape: Vec<usize>, data: Vec<T>| Tensor::new(shape, data);
        let gd = g.data();

        let out = match &node.op {
            Op::Constant | Op::Param { .. } => Vec::new(),
            Op::MatMul => {
                let (sa, sb) = (in_shape(0), in_shape(1));
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let mut ga = None;
                let mut gb = None;
                if sb.len() == 2 {
                    let rows: usize = sa[..sa.len() - 1].iter().product();
                    if rg[0] {
                        ga = Some(mk(sa.clone(), mm_nt(gd, saved(1)?.data(), rows, n, k))?);
                    }
                    if rg[1] {
                        gb = Some(mk(sb.clone(), mm_tn(saved(0)?.data(), gd, rows, k, n))?);
                    }
                } else {
                    let batch: usize = sa[..sa.len() - 2].iter().product();
                    if rg[0] {
                        let b = saved(1)?.data();
                        let mut acc = Vec::with_capacity(batch * m * k);
                        for bi in 0..batch {
                            acc.extend(mm_nt(&gd[bi * m * n..(bi + 1) * m * n], &b[bi * k * n..(bi + 1) * k * n], m, n, k));
                        }
                        ga = Some(mk(sa.clone(), acc)?);
                    }
                    if rg[1] {
                        let a = saved(0)?.data();
                        let mut acc = Vec::with_capacity(batch * k * n);
                        for bi in 0..batch {
                            acc.extend(mm_tn(&a[bi * m * k..(bi + 1) * m * k], &gd[bi * m * n..(bi + 1) * m * n], m, k, n));
                        }
                        gb = Some(mk(sb.clone(), acc)?);
                    }
                }
                vec![ga, gb]
            }
            Op::Add => {
                let sb = in_shape(1);
                let inner: usize = sb.iter().product();
                let ga = rg[0].then(|| g.clone());
                let gb = if rg[1] { Some(mk(sb, reduce_to_suffix(gd, inner))?) } else { None };
                vec![ga, gb]
            }
            Op::Mul => {
                let (sa, sb) = (in_shape(0), in_shape(1));
                let inner: usize = sb.iter().product();
                let ga = if rg[0] {
                    let b = saved(1)?.data();
                    let data = gd.chunks(inner.max(1)).flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x * y)).collect();
                    Some(mk(sa, data)?)
                } else {
                    None
                };
                let gb = if rg[1] {
                    let a = saved(0)?.data();
                    let prod: Vec<T> = gd.iter().zip(a).map(|(&x, &y)| x * y).collect();
                    Some(mk(sb, reduce_to_suffix(&prod, inner))?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Scale(f) => {
                let f = T::lit(*f);
                vec![Some(g.map(|x| x * f))]
            }
            Op::Reshape => vec![Some(g.clone().reshaped(&in_shape(0))?)],
            Op::Transpose(a, b) => {
                let (data, shape) = swap_axes(gd, &node.shape, *a, *b);
                vec![Some(mk(shape, data)?)]
            }
            Op::ConcatTokens => {
                let (outer, total, width) = token_split(&node.shape).expect("validated at record");
                let mut parts = Vec::with_capacity(node.inputs.len());
                let mut offset = 0;
                for (i, &need) in rg.iter().enumerate() {
                    let s = in_shape(i);
                    let t = s[s.len() - 2];
                    if need {
                        let mut data = Vec::with_capacity(outer * t * width);
                        for o in 0..outer {
                            let base = o * total * width + offset * width;
                            data.extend_from_slice(&gd[base..base + t * width]);
                        }
                        parts.push(Some(mk(s, data)?));
                    } else {
                        parts.push(None);
                    }
                    offset += t;
                }
                parts
            }
            Op::SliceTokens { start, len } => {
                let s = in_shape(0);
                let (outer, t, width) = token_split(&s).expect("validated at record");
                let mut data = vec![T::zero(); outer * t * width];
                for o in 0..outer {
                    let dst = o * t * width + start * width;
                    data[dst..dst + len * width].copy_from_slice(&gd[o * len * width..(o + 1) * len * width]);
                }
                vec![Some(mk(s, data)?)]
            }
            Op::Broadcast => {
                let s = in_shape(0);
                let inner: usize = s.iter().product();
                vec![Some(mk(s, reduce_to_suffix(gd, inner))?)]
            }
            Op::Softmax => {
                let y = self.saved_value(id, Var(id))?.data();
                let width = *node.shape.last().expect("softmax has an axis");
                let mut data = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(width).zip(y.chunks(width)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    data.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| yi * (gi - dot)));
                }
                vec![Some(mk(node.shape.clone(), data)?)]
            }
            Op::LayerNorm { eps } => {
                let d = *node.shape.last().expect("layer_norm has an axis");
                if !rg[0] && !rg[1] {
                    let g_beta = reduce_to_suffix(gd, d);
                    return Ok(vec![None, None, Some(mk(vec![d], g_beta)?)]);
                }
                let x = saved(0)?.data();
                let n = T::lit(d as f64);
                let epsilon = T::lit(*eps);
                let gamma = if rg[0] { Some(saved(1)?.data()) } else { None };
                let mut gx = rg[0].then(|| Vec::with_capacity(x.len()));
                let mut g_gamma = vec![T::zero(); d];
                let mut g_beta = vec![T::zero(); d];
                for (xrow, grow) in x.chunks(d).zip(gd.chunks(d)) {
                    let mean = xrow.iter().copied().sum::<T>() / n;
                    let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let rstd = T::one() / (var + epsilon).sqrt();
                    let xhat: Vec<T> = xrow.iter().map(|&v| (v - mean) * rstd).collect();
                    for j in 0..d {
                        g_gamma[j] = g_gamma[j] + grow[j] * xhat[j];
                        g_beta[j] = g_beta[j] + grow[j];
                    }
                    if let (Some(gx), Some(gamma)) = (gx.as_mut(), gamma) {
                        let gg: Vec<T> = grow.iter().zip(gamma).map(|(&a, &b)| a * b).collect();
                        let mean_gg = gg.iter().copied().sum::<T>() / n;
                        let mean_ggx = gg.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                        gx.extend(gg.iter().zip(&xhat).map(|(&a, &xh)| rstd * (a - mean_gg - xh * mean_ggx)));
                    }
                }
                vec![
                    match gx {
                        Some(data) => Some(mk(node.shape.clone(), data)?),
                        None => None,
                    },
                    if rg[1] { Some(mk(vec![d], g_gamma)?) } else { None },
                    if rg[2] { Some(mk(vec![d], g_beta)?) } else { None },
                ]
            }
            Op::Gelu => {
                let x = saved(0)?;
                vec![Some(x.zip_map(g, |xi, gi| gi * gelu_grad(xi)))]
            }
            Op::Swish { beta } => {
                let b = T::lit(*beta);
                let x = saved(0)?;
                vec![Some(x.zip_map(g, |xi, gi| gi * swish_grad(xi, b)))]
            }
            Op::DepthwiseConv2d { kernel: k } => {
                let s = in_shape(0);
                let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
                let k = *k;
                let r = (k / 2) as isize;
                let plane = h * w;
                let mut gx = rg[0].then(|| vec![T::zero(); gd.len()]);
                let mut gk = rg[1].then(|| vec![T::zero(); c * k * k]);
                let ker = if rg[0] { Some(saved(1)?.data()) } else { None };
                let xin = if rg[1] { Some(saved(0)?.data()) } else { None };
                let mut gbias = vec![T::zero(); c];
                for idx in 0..gd.len() / plane.max(1) {
                    let ch = idx % c;
                    let gplane = &gd[idx * plane..(idx + 1) * plane];
                    for y in 0..h as isize {
                        for xx in 0..w as isize {
                            let go = gplane[(y * w as isize + xx) as usize];
                            gbias[ch] = gbias[ch] + go;
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
                                    let src = idx * plane + (sy * w as isize + sx) as usize;
                                    let kidx = ch * k * k + (dy * k as isize + dx) as usize;
                                    if let (Some(gx), Some(ker)) = (gx.as_mut(), ker) {
                                        gx[src] = gx[src] + ker[kidx] * go;
                                    }
                                    if let (Some(gk), Some(xin)) = (gk.as_mut(), xin) {
                                        gk[kidx] = gk[kidx] + xin[src] * go;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    match gx {
                        Some(data) => Some(mk(s.clone(), data)?),
                        None => None,
                    },
                    match gk {
                        Some(data) => Some(mk(vec![c, k, k], data)?),
                        None => None,
                    },
                    if rg[2] { Some(mk(vec![c], gbias)?) } else { None },
                ]
            }
            Op::CrossEntropy { labels } => {
                let logits = saved(0)?;
                let s = logits.shape().to_vec();
                let (b, c) = (s[0], s[1]);
                let scale = g.item() / T::lit(b as f64);
                let mut data = Vec::with_capacity(b * c);
                for (row, &label) in logits.data().chunks(c).zip(labels) {
                    let lse = log_sum_exp(row);
                    for (j, &z) in row.iter().enumerate() {
                        let p = (z - lse).exp();
                        let t = if j == label { T::one() } else { T::zero() };
                        data.push((p - t) * scale);
                    }
                }
                vec![Some(mk(s, data)?)]
            }
            Op::Sum => vec![Some(Tensor::full(&in_shape(0), g.item()))],
            Op::LowRank => {
                let (sx, sa, sb) = (in_shape(0), in_shape(1), in_shape(2));
                let (d, r, e) = (sa[0], sa[1], sb[1]);
                let rows: usize = sx[..sx.len() - 1].iter().product();
                let need_gu = rg[0] || rg[1];
                let gu = if need_gu { Some(mm_nt(gd, saved(2)?.data(), rows, e, r)) } else { None };
                let gx = match (&gu, rg[0]) {
                    (Some(gu), true) => Some(mk(sx.clone(), mm_nt(gu, saved(1)?.data(), rows, r, d))?),
                    _ => None,
                };
                let ga = match (&gu, rg[1]) {
                    (Some(gu), true) => Some(mk(sa.clone(), mm_tn(saved(0)?.data(), gu, rows, d, r))?),
                    _ => None,
                };
                let gb = if rg[2] {
                    let u = mm_nn(saved(0)?.data(), saved(1)?.data(), rows, d, r);
                    Some(mk(sb.clone(), mm_tn(&u, gd, rows, r, e))?)
                } else {
                    None
                };
                vec![gx, ga, gb]
            }
        };
        // inputs that do not require grad never receive one
        Ok(out.into_iter().zip(rg).map(|(g, need)| if need { g } else { None }).collect())
    }
}

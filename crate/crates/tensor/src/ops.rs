//! Forward and backward kernels. Every function here is pure; the tape in
//! [`crate::tape`] wires them together.
//!
//! Batch items are processed in parallel where each item writes a disjoint
//! slice of the output. Reductions across the batch (weight and bias
//! gradients) are built from per-item partials summed in batch order, so the
//! result does not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dParams {
    /// Output length along one axis, or `None` when it would be non-positive.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    ho: usize,
    wo: usize,
    p: Conv2dParams,
}

impl ConvGeom {
    fn in_per_group(&self) -> usize {
        self.in_ch / self.p.groups
    }
    fn out_per_group(&self) -> usize {
        self.out_ch / self.p.groups
    }
    fn in_plane(&self) -> usize {
        self.h * self.w
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output positions `[lo, hi)` whose input coordinate `o * stride + offset`
/// falls inside `[0, len_in)`.
fn valid_range(offset: isize, stride: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = len_in as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(len_out as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn conv_geom<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, p: Conv2dParams) -> Result<ConvGeom> {
    let (_, c, h, w) = x.dims4("conv2d")?;
    let (o, cpg, kh, kw) = weight.dims4("conv2d weight")?;
    if p.groups == 0 || p.stride == 0 || p.dilation == 0 {
        return Err(TensorError::Config {
            op: "conv2d",
            msg: format!("stride, dilation and groups must be positive: {p:?}"),
        });
    }
    if c % p.groups != 0 || o % p.groups != 0 {
        return shape_err(
            "conv2d",
            format!("channels in={c} out={o} not divisible by groups={}", p.groups),
        );
    }
    if cpg != c / p.groups {
        return shape_err(
            "conv2d",
            format!("weight expects {cpg} input channels per group, input has {}", c / p.groups),
        );
    }
    if kh != kw {
        return shape_err("conv2d", format!("only square kernels are supported, got {kh}x{kw}"));
    }
    let (ho, wo) = match (p.out_len(h, kh), p.out_len(w, kw)) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
        _ => {
            return Err(TensorError::Config {
                op: "conv2d",
                msg: format!("non-positive output size for input {h}x{w}, kernel {kh}, {p:?}"),
            })
        }
    };
    Ok(ConvGeom { in_ch: c, h, w, out_ch: o, k: kh, ho, wo, p })
}

fn conv_sample<T: Element>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let (cpg, opg, k) = (g.in_per_group(), g.out_per_group(), g.k);
    let (s, d, pad) = (g.p.stride, g.p.dilation, g.p.padding as isize);
    for oc in 0..g.out_ch {
        let grp = oc / opg;
        let plane = &mut out[oc * g.out_plane()..(oc + 1) * g.out_plane()];
        let b = bias.map_or(T::zero(), |b| b[oc]);
        plane.iter_mut().for_each(|v| *v = b);
        for icg in 0..cpg {
            let ic = grp * cpg + icg;
            let xin = &x[ic * g.in_plane()..(ic + 1) * g.in_plane()];
            for ki in 0..k {
                let off_h = (ki * d) as isize - pad;
                let (oh_lo, oh_hi) = valid_range(off_h, s, g.h, g.ho);
                for kj in 0..k {
                    let off_w = (kj * d) as isize - pad;
                    let (ow_lo, ow_hi) = valid_range(off_w, s, g.w, g.wo);
                    let wv = weight[((oc * cpg + icg) * k + ki) * k + kj];
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * s) as isize + off_h;
                        let row_in = &xin[ih as usize * g.w..];
                        let row_out = &mut plane[oh * g.wo..(oh + 1) * g.wo];
                        for ow in ow_lo..ow_hi {
                            let iw = ((ow * s) as isize + off_w) as usize;
                            row_out[ow] = row_out[ow] + wv * row_in[iw];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding. Weight layout is
/// `(out_ch, in_ch / groups, k, k)`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: Conv2dParams,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, weight, p)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_ch] {
            return shape_err("conv2d", format!("bias shape {:?}, expected [{}]", b.shape(), g.out_ch));
        }
    }
    let n = x.shape()[0];
    let mut out = vec![T::zero(); n * g.out_ch * g.out_plane()];
    let in_item = g.in_ch * g.in_plane();
    out.par_chunks_mut(g.out_ch * g.out_plane()).enumerate().for_each(|(i, o)| {
        conv_sample(&g, &x.data()[i * in_item..(i + 1) * in_item], weight.data(), bias.map(|b| b.data()), o)
    });
    Tensor::from_vec(vec![n, g.out_ch, g.ho, g.wo], out)
}

pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of [`conv2d`] with respect to the requested operands.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: Conv2dParams,
    need: [bool; 3],
) -> Result<Conv2dGrads<T>> {
    let g = conv_geom(x, weight, p)?;
    let n = x.shape()[0];
    if grad_out.shape() != [n, g.out_ch, g.ho, g.wo] {
        return shape_err("conv2d backward", format!("grad shape {:?}", grad_out.shape()));
    }
    let (cpg, opg, k) = (g.in_per_group(), g.out_per_group(), g.k);
    let (s, d, pad) = (p.stride, p.dilation, p.padding as isize);
    let in_item = g.in_ch * g.in_plane();
    let out_item = g.out_ch * g.out_plane();
    let wdata = weight.data();

    let input = if need[0] {
        let mut gx = vec![T::zero(); x.numel()];
        gx.par_chunks_mut(in_item).enumerate().for_each(|(i, gx)| {
            let go = &grad_out.data()[i * out_item..(i + 1) * out_item];
            for oc in 0..g.out_ch {
                let grp = oc / opg;
                let gplane = &go[oc * g.out_plane()..(oc + 1) * g.out_plane()];
                for icg in 0..cpg {
                    let ic = grp * cpg + icg;
                    let gin = &mut gx[ic * g.in_plane()..(ic + 1) * g.in_plane()];
                    for ki in 0..k {
                        let off_h = (ki * d) as isize - pad;
                        let (oh_lo, oh_hi) = valid_range(off_h, s, g.h, g.ho);
                        for kj in 0..k {
                            let off_w = (kj * d) as isize - pad;
                            let (ow_lo, ow_hi) = valid_range(off_w, s, g.w, g.wo);
                            let wv = wdata[((oc * cpg + icg) * k + ki) * k + kj];
                            for oh in oh_lo..oh_hi {
                                let ih = ((oh * s) as isize + off_h) as usize;
                                for ow in ow_lo..ow_hi {
                                    let iw = ((ow * s) as isize + off_w) as usize;
                                    let idx = ih * g.w + iw;
                                    gin[idx] = gin[idx] + wv * gplane[oh * g.wo + ow];
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(Tensor::from_vec(x.shape().to_vec(), gx)?)
    } else {
        None
    };

    let weight_grad = if need[1] {
        let partials: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = &x.data()[i * in_item..(i + 1) * in_item];
                let go = &grad_out.data()[i * out_item..(i + 1) * out_item];
                let mut gw = vec![T::zero(); weight.numel()];
                for oc in 0..g.out_ch {
                    let grp = oc / opg;
                    let gplane = &go[oc * g.out_plane()..(oc + 1) * g.out_plane()];
                    for icg in 0..cpg {
                        let ic = grp * cpg + icg;
                        let xin = &xi[ic * g.in_plane()..(ic + 1) * g.in_plane()];
                        for ki in 0..k {
                            let off_h = (ki * d) as isize - pad;
                            let (oh_lo, oh_hi) = valid_range(off_h, s, g.h, g.ho);
                            for kj in 0..k {
                                let off_w = (kj * d) as isize - pad;
                                let (ow_lo, ow_hi) = valid_range(off_w, s, g.w, g.wo);
                                let mut acc = T::zero();
                                for oh in oh_lo..oh_hi {
                                    let ih = ((oh * s) as isize + off_h) as usize;
                                    let row_in = &xin[ih * g.w..];
                                    let row_g = &gplane[oh * g.wo..];
                                    for ow in ow_lo..ow_hi {
                                        let iw = ((ow * s) as isize + off_w) as usize;
                                        acc = acc + row_g[ow] * row_in[iw];
                                    }
                                }
                                gw[((oc * cpg + icg) * k + ki) * k + kj] = acc;
                            }
                        }
                    }
                }
                gw
            })
            .collect();
        Some(Tensor::from_vec(weight.shape().to_vec(), sum_partials(partials, weight.numel()))?)
    } else {
        None
    };

    let bias = if need[2] {
        let mut gb = vec![T::zero(); g.out_ch];
        for i in 0..n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                let base = i * out_item + oc * g.out_plane();
                let s: T = grad_out.data()[base..base + g.out_plane()].iter().copied().sum();
                *acc = *acc + s;
            }
        }
        Some(Tensor::from_vec(vec![g.out_ch], gb)?)
    } else {
        None
    };

    Ok(Conv2dGrads { input, weight: weight_grad, bias })
}

fn sum_partials<T: Element>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t = *t + v;
        }
    }
    total
}

/// Source taps for half-pixel bilinear resampling along one axis:
/// `(lower index, upper index, weight of upper)`.
fn bilinear_taps<T: Element>(len_in: usize, scale: usize) -> Vec<(usize, usize, T)> {
    let inv = 1.0 / scale as f64;
    (0..len_in * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) * inv - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len_in - 1);
            let hi = if lo + 1 < len_in { lo + 1 } else { lo };
            (lo, hi, T::from_f64(src - lo as f64))
        })
        .collect()
}

/// Bilinear upsampling by an integer factor, half-pixel centers, corners
/// not aligned.
pub fn upsample_bilinear<T: Element>(x: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    if scale < 2 {
        return Err(TensorError::Config { op: "upsample", msg: format!("scale must be >= 2, got {scale}") });
    }
    let (n, c, h, w) = x.dims4("upsample")?;
    let (ho, wo) = (h * scale, w * scale);
    let rows = bilinear_taps::<T>(h, scale);
    let cols = bilinear_taps::<T>(w, scale);
    let mut out = vec![T::zero(); n * c * ho * wo];
    out.par_chunks_mut(ho * wo).zip(x.data().par_chunks(h * w)).for_each(|(o, xi)| {
        for (oh, &(r0, r1, lh)) in rows.iter().enumerate() {
            for (ow, &(c0, c1, lw)) in cols.iter().enumerate() {
                let top = xi[r0 * w + c0] * (T::one() - lw) + xi[r0 * w + c1] * lw;
                let bot = xi[r1 * w + c0] * (T::one() - lw) + xi[r1 * w + c1] * lw;
                o[oh * wo + ow] = top * (T::one() - lh) + bot * lh;
            }
        }
    });
    Tensor::from_vec(vec![n, c, ho, wo], out)
}

pub fn upsample_bilinear_backward<T: Element>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    scale: usize,
) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (h * scale, w * scale);
    let rows = bilinear_taps::<T>(h, scale);
    let cols = bilinear_taps::<T>(w, scale);
    let mut gx = vec![T::zero(); input_shape.iter().product()];
    gx.par_chunks_mut(h * w).zip(grad_out.data().par_chunks(ho * wo)).for_each(|(gi, go)| {
        for (oh, &(r0, r1, lh)) in rows.iter().enumerate() {
            for (ow, &(c0, c1, lw)) in cols.iter().enumerate() {
                let gv = go[oh * wo + ow];
                let top = gv * (T::one() - lh);
                let bot = gv * lh;
                gi[r0 * w + c0] = gi[r0 * w + c0] + top * (T::one() - lw);
                gi[r0 * w + c1] = gi[r0 * w + c1] + top * lw;
                gi[r1 * w + c0] = gi[r1 * w + c0] + bot * (T::one() - lw);
                gi[r1 * w + c1] = gi[r1 * w + c1] + bot * lw;
            }
        }
    });
    Tensor::from_vec(input_shape.to_vec(), gx)
}

/// Statistics saved by [`layer_norm`] for the backward pass, one entry per
/// (batch, position).
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes over the channel axis at every spatial position, then applies
/// a per-channel affine transform. Accepts `(N, C)` or `(N, C, H, W)`.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (n, c, p) = x.channel_view("layer_norm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(
            "layer_norm",
            format!("gamma {:?} / beta {:?} do not match {c} channels", gamma.shape(), beta.shape()),
        );
    }
    if eps <= T::zero() {
        return Err(TensorError::Config { op: "layer_norm", msg: "eps must be positive".into() });
    }
    let inv_c = T::one() / T::from_f64(c as f64);
    let mut out = vec![T::zero(); x.numel()];
    let mut mean = vec![T::zero(); n * p];
    let mut rstd = vec![T::zero(); n * p];
    out.par_chunks_mut(c * p)
        .zip(mean.par_chunks_mut(p))
        .zip(rstd.par_chunks_mut(p))
        .enumerate()
        .for_each(|(i, ((o, mu), rs))| {
            let xi = &x.data()[i * c * p..(i + 1) * c * p];
            for ch in 0..c {
                for (m, &v) in mu.iter_mut().zip(&xi[ch * p..(ch + 1) * p]) {
                    *m = *m + v;
                }
            }
            mu.iter_mut().for_each(|m| *m = *m * inv_c);
            let mut var = vec![T::zero(); p];
            for ch in 0..c {
                for ((s, &v), &m) in var.iter_mut().zip(&xi[ch * p..(ch + 1) * p]).zip(mu.iter()) {
                    let dv = v - m;
                    *s = *s + dv * dv;
                }
            }
            for (r, s) in rs.iter_mut().zip(var) {
                *r = T::one() / (s * inv_c + eps).sqrt();
            }
            for ch in 0..c {
                let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
                for pos in 0..p {
                    let idx = ch * p + pos;
                    o[idx] = (xi[idx] - mu[pos]) * rs[pos] * gm + bt;
                }
            }
        });
    Ok((Tensor::from_vec(x.shape().to_vec(), out)?, NormStats { mean, rstd }))
}

/// Gradients of [`layer_norm`]: `(input, gamma, beta)`.
pub fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (_, c, p) = x.channel_view("layer_norm backward")?;
    let inv_c = T::one() / T::from_f64(c as f64);
    let mut gx = vec![T::zero(); x.numel()];
    let per_item: Vec<(Vec<T>, Vec<T>)> = gx
        .par_chunks_mut(c * p)
        .enumerate()
        .map(|(i, gxi)| {
            let xi = &x.data()[i * c * p..(i + 1) * c * p];
            let gi = &grad_out.data()[i * c * p..(i + 1) * c * p];
            let mu = &stats.mean[i * p..(i + 1) * p];
            let rs = &stats.rstd[i * p..(i + 1) * p];
            let mut sum_d = vec![T::zero(); p];
            let mut sum_dx = vec![T::zero(); p];
            let mut ggam = vec![T::zero(); c];
            let mut gbet = vec![T::zero(); c];
            for ch in 0..c {
                let gm = gamma.data()[ch];
                for pos in 0..p {
                    let idx = ch * p + pos;
                    let xhat = (xi[idx] - mu[pos]) * rs[pos];
                    let dxhat = gi[idx] * gm;
                    sum_d[pos] = sum_d[pos] + dxhat;
                    sum_dx[pos] = sum_dx[pos] + dxhat * xhat;
                    ggam[ch] = ggam[ch] + gi[idx] * xhat;
                    gbet[ch] = gbet[ch] + gi[idx];
                }
            }
            for ch in 0..c {
                let gm = gamma.data()[ch];
                for pos in 0..p {
                    let idx = ch * p + pos;
                    let xhat = (xi[idx] - mu[pos]) * rs[pos];
                    let dxhat = gi[idx] * gm;
                    gxi[idx] = rs[pos] * (dxhat - sum_d[pos] * inv_c - xhat * sum_dx[pos] * inv_c);
                }
            }
            (ggam, gbet)
        })
        .collect();
    let (gg, gb): (Vec<_>, Vec<_>) = per_item.into_iter().unzip();
    Ok((
        Tensor::from_vec(x.shape().to_vec(), gx)?,
        Tensor::from_vec(vec![c], sum_partials(gg, c))?,
        Tensor::from_vec(vec![c], sum_partials(gb, c))?,
    ))
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x.map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()))
}

pub fn gelu_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let pdf_scale = T::from_f64(FRAC_1_SQRT_2PI);
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
            let pdf = pdf_scale * (-half * v * v).exp();
            g * (cdf + v * pdf)
        })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("same shape")
}

/// Affine map along the channel axis: `(N, I[, H, W]) -> (N, O[, H, W])`
/// with weight `(O, I)`.
pub fn linear<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, i_feat, p) = x.channel_view("linear")?;
    let (o_feat, wi) = match weight.shape() {
        &[o, i] => (o, i),
        s => return shape_err("linear", format!("weight must be (out, in), got {s:?}")),
    };
    if wi != i_feat {
        return shape_err("linear", format!("weight expects {wi} input features, input has {i_feat}"));
    }
    if let Some(b) = bias {
        if b.shape() != [o_feat] {
            return shape_err("linear", format!("bias shape {:?}, expected [{o_feat}]", b.shape()));
        }
    }
    let mut out = vec![T::zero(); n * o_feat * p];
    out.par_chunks_mut(o_feat * p).enumerate().for_each(|(s, o)| {
        let xs = &x.data()[s * i_feat * p..(s + 1) * i_feat * p];
        for oc in 0..o_feat {
            let row = &mut o[oc * p..(oc + 1) * p];
            let b = bias.map_or(T::zero(), |b| b.data()[oc]);
            row.iter_mut().for_each(|v| *v = b);
            for ic in 0..i_feat {
                let wv = weight.data()[oc * i_feat + ic];
                for (r, &xv) in row.iter_mut().zip(&xs[ic * p..(ic + 1) * p]) {
                    *r = *r + wv * xv;
                }
            }
        }
    });
    let mut shape = x.shape().to_vec();
    shape[1] = o_feat;
    Tensor::from_vec(shape, out)
}

/// Gradients of [`linear`]: `(input, weight, bias)`.
pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, i_feat, p) = x.channel_view("linear backward")?;
    let o_feat = weight.shape()[0];
    let gin = if need[0] {
        let mut gx = vec![T::zero(); x.numel()];
        gx.par_chunks_mut(i_feat * p).enumerate().for_each(|(s, gxs)| {
            let gs = &grad_out.data()[s * o_feat * p..(s + 1) * o_feat * p];
            for oc in 0..o_feat {
                let grow = &gs[oc * p..(oc + 1) * p];
                for ic in 0..i_feat {
                    let wv = weight.data()[oc * i_feat + ic];
                    for (g, &gv) in gxs[ic * p..(ic + 1) * p].iter_mut().zip(grow) {
                        *g = *g + wv * gv;
                    }
                }
            }
        });
        Some(Tensor::from_vec(x.shape().to_vec(), gx)?)
    } else {
        None
    };
    let gw = if need[1] {
        let partials: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|s| {
                let xs = &x.data()[s * i_feat * p..(s + 1) * i_feat * p];
                let gs = &grad_out.data()[s * o_feat * p..(s + 1) * o_feat * p];
                let mut gw = vec![T::zero(); o_feat * i_feat];
                for oc in 0..o_feat {
                    let grow = &gs[oc * p..(oc + 1) * p];
                    for ic in 0..i_feat {
                        gw[oc * i_feat + ic] =
                            grow.iter().zip(&xs[ic * p..(ic + 1) * p]).map(|(&a, &b)| a * b).sum();
                    }
                }
                gw
            })
            .collect();
        Some(Tensor::from_vec(weight.shape().to_vec(), sum_partials(partials, o_feat * i_feat))?)
    } else {
        None
    };
    let gb = if need[2] {
        let mut gb = vec![T::zero(); o_feat];
        for s in 0..n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                let base = (s * o_feat + oc) * p;
                let v: T = grad_out.data()[base..base + p].iter().copied().sum();
                *acc = *acc + v;
            }
        }
        Some(Tensor::from_vec(vec![o_feat], gb)?)
    } else {
        None
    };
    Ok((gin, gw, gb))
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err("mul", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

/// `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let inv = T::one() / T::from_f64((h * w) as f64);
    let data = x.data().chunks(h * w).map(|plane| plane.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec(vec![n, c], data)
}

pub fn global_avg_pool_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let plane = input_shape[2] * input_shape[3];
    let inv = T::one() / T::from_f64(plane as f64);
    let data = grad_out.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, plane)).collect();
    Tensor::from_vec(input_shape.to_vec(), data)
}

/// Mean softmax cross-entropy over every labeled position. Logits are
/// `(N, K)` or `(N, K, H, W)`; labels are laid out `(N, H, W)`. Returns the
/// loss and the softmax probabilities (same layout as the logits).
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let (n, k, p) = logits.channel_view("softmax_cross_entropy")?;
    if labels.len() != n * p {
        return shape_err(
            "softmax_cross_entropy",
            format!("{} labels for {} positions", labels.len(), n * p),
        );
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::LabelRange { label: bad, classes: k });
    }
    let mut probs = vec![T::zero(); logits.numel()];
    let mut total = 0.0f64;
    for s in 0..n {
        let ls = &logits.data()[s * k * p..(s + 1) * k * p];
        let ps = &mut probs[s * k * p..(s + 1) * k * p];
        for pos in 0..p {
            let mut mx = T::neg_infinity();
            for c in 0..k {
                mx = mx.max(ls[c * p + pos]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (ls[c * p + pos] - mx).exp();
                ps[c * p + pos] = e;
                z = z + e;
            }
            for c in 0..k {
                ps[c * p + pos] = ps[c * p + pos] / z;
            }
            let label = labels[s * p + pos];
            total += (z.ln() + mx - ls[label * p + pos]).as_f64();
        }
    }
    Ok((T::from_f64(total / (n * p) as f64), probs))
}

pub fn softmax_cross_entropy_backward<T: Element>(
    shape: &[usize],
    probs: &[T],
    labels: &[usize],
    grad_out: T,
) -> Result<Tensor<T>> {
    let (n, k) = (shape[0], shape[1]);
    let p: usize = shape[2..].iter().product();
    let scale = grad_out / T::from_f64((n * p) as f64);
    let mut g: Vec<T> = probs.iter().map(|&v| v * scale).collect();
    for s in 0..n {
        for pos in 0..p {
            let idx = (s * k + labels[s * p + pos]) * p + pos;
            g[idx] = g[idx] - scale;
        }
    }
    Tensor::from_vec(shape.to_vec(), g)
}

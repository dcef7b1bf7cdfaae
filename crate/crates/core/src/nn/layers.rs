//! Forward and backward math for each layer kind.
//!
//! Activations are batched NHWC (or (N, D) after flattening); weights for a
//! convolution are (kh, kw, in_c, out_c) so the im2col product maps straight
//! onto a row-major matrix multiply.

use ndarray::{Array1, Array2, Axis, IxDyn};

use crate::tensor::{matmul, Scalar, Tensor};

pub(crate) struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output size and implicit zero padding. `same` keeps `ceil(in / stride)`
/// positions and splits the padding with the extra row/column at the
/// bottom/right; `valid` uses no padding.
pub(crate) fn conv_geometry(
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    same: bool,
) -> Option<ConvGeometry> {
    if same {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + kh).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + kw).saturating_sub(in_w);
        Some(ConvGeometry {
            out_h,
            out_w,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        })
    } else {
        if in_h < kh || in_w < kw {
            return None;
        }
        Some(ConvGeometry {
            out_h: (in_h - kh) / stride + 1,
            out_w: (in_w - kw) / stride + 1,
            pad_top: 0,
            pad_left: 0,
        })
    }
}

fn dims4<F: Scalar>(x: &Tensor<F>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

/// Gather conv windows into a (N·oh·ow, kh·kw·C) matrix; out-of-image taps
/// stay zero.
fn im2col<F: Scalar>(
    x: &Tensor<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    geo: &ConvGeometry,
) -> Array2<F> {
    let (n, h, w, c) = dims4(x);
    let (oh, ow) = (geo.out_h, geo.out_w);
    let k = kh * kw * c;
    let xs = x.as_slice().expect("activations are standard layout");
    let mut cols = Array2::<F>::zeros((n * oh * ow, k));
    let cs = cols.as_slice_mut().expect("freshly allocated");
    for ni in 0..n {
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - geo.pad_top as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - geo.pad_left as isize;
                let row_off = ((ni * oh + oy) * ow + ox) * k;
                for dy in 0..kh {
                    let iy = iy0 + dy as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dx_lo = (-ix0).max(0) as usize;
                    let dx_hi = (w as isize - ix0).clamp(0, kw as isize) as usize;
                    if dx_lo >= dx_hi {
                        continue;
                    }
                    let src = ((ni * h + iy as usize) * w + (ix0 + dx_lo as isize) as usize) * c;
                    let dst = row_off + (dy * kw + dx_lo) * c;
                    let len = (dx_hi - dx_lo) * c;
                    cs[dst..dst + len].copy_from_slice(&xs[src..src + len]);
                }
            }
        }
    }
    cols
}

/// Scatter-add of an im2col-shaped gradient back onto the input raster.
fn col2im<F: Scalar>(
    cols: &Array2<F>,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    geo: &ConvGeometry,
) -> Tensor<F> {
    let (oh, ow) = (geo.out_h, geo.out_w);
    let k = kh * kw * c;
    let cs = cols.as_slice().expect("standard layout");
    let mut out = Tensor::<F>::zeros(IxDyn(&[n, h, w, c]));
    let os = out.as_slice_mut().expect("freshly allocated");
    for ni in 0..n {
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - geo.pad_top as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - geo.pad_left as isize;
                let row_off = ((ni * oh + oy) * ow + ox) * k;
                for dy in 0..kh {
                    let iy = iy0 + dy as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dx_lo = (-ix0).max(0) as usize;
                    let dx_hi = (w as isize - ix0).clamp(0, kw as isize) as usize;
                    if dx_lo >= dx_hi {
                        continue;
                    }
                    let dst = ((ni * h + iy as usize) * w + (ix0 + dx_lo as isize) as usize) * c;
                    let src = row_off + (dy * kw + dx_lo) * c;
                    for i in 0..(dx_hi - dx_lo) * c {
                        os[dst + i] += cs[src + i];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_forward<F: Scalar>(
    x: &Tensor<F>,
    weights: &Tensor<F>,
    bias: &Tensor<F>,
    stride: usize,
    same: bool,
) -> Tensor<F> {
    let (n, h, w, _c) = dims4(x);
    let ws = weights.shape();
    let (kh, kw, cin, cout) = (ws[0], ws[1], ws[2], ws[3]);
    let geo = conv_geometry(h, w, kh, kw, stride, same).expect("validated at build");
    let cols = im2col(x, kh, kw, stride, &geo);
    let w2 = weights
        .view()
        .into_shape_with_order((kh * kw * cin, cout))
        .expect("weights are standard layout");
    let mut out2 = matmul(cols.view(), w2);
    let b1 = bias
        .view()
        .into_shape_with_order((1, cout))
        .expect("bias is contiguous");
    out2 += &b1;
    out2
        .into_shape_with_order(IxDyn(&[n, geo.out_h, geo.out_w, cout]))
        .expect("sizes agree")
}

pub(crate) fn conv_backward<F: Scalar>(
    x: &Tensor<F>,
    weights: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    same: bool,
    want_param_grads: bool,
) -> (Tensor<F>, Option<(Tensor<F>, Tensor<F>)>) {
    let (n, h, w, c) = dims4(x);
    let ws = weights.shape();
    let (kh, kw, cin, cout) = (ws[0], ws[1], ws[2], ws[3]);
    let geo = conv_geometry(h, w, kh, kw, stride, same).expect("validated at build");
    let rows = n * geo.out_h * geo.out_w;
    let g2 = grad_out
        .view()
        .into_shape_with_order((rows, cout))
        .expect("gradient is standard layout");
    let w2 = weights
        .view()
        .into_shape_with_order((kh * kw * cin, cout))
        .expect("weights are standard layout");

    let param_grads = if want_param_grads {
        let cols = im2col(x, kh, kw, stride, &geo);
        let dw2 = matmul(cols.t(), g2);
        let dw = dw2
            .into_shape_with_order(IxDyn(&[kh, kw, cin, cout]))
            .expect("sizes agree");
        let db = g2.sum_axis(Axis(0)).into_dyn();
        Some((dw, db))
    } else {
        None
    };

    let dcols = matmul(g2, w2.t());
    let dx = col2im(&dcols, n, h, w, c, kh, kw, stride, &geo);
    (dx, param_grads)
}

/// Max pooling; among tied maxima the first in row-major window scan order
/// wins, and the backward pass routes the gradient to that same tap.
pub(crate) fn max_pool_forward<F: Scalar>(
    x: &Tensor<F>,
    ph: usize,
    pw: usize,
    stride: usize,
) -> Tensor<F> {
    let (n, h, w, c) = dims4(x);
    let oh = (h - ph) / stride + 1;
    let ow = (w - pw) / stride + 1;
    let xs = x.as_slice().expect("standard layout");
    let mut out = Tensor::<F>::zeros(IxDyn(&[n, oh, ow, c]));
    let os = out.as_slice_mut().expect("freshly allocated");
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((ni * oh + oy) * ow + ox) * c;
                let (y0, x0) = (oy * stride, ox * stride);
                let first = ((ni * h + y0) * w + x0) * c;
                os[dst..dst + c].copy_from_slice(&xs[first..first + c]);
                for dy in 0..ph {
                    for dx in 0..pw {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let src = ((ni * h + y0 + dy) * w + x0 + dx) * c;
                        for ch in 0..c {
                            if xs[src + ch] > os[dst + ch] {
                                os[dst + ch] = xs[src + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn max_pool_backward<F: Scalar>(
    x: &Tensor<F>,
    grad_out: &Tensor<F>,
    ph: usize,
    pw: usize,
    stride: usize,
) -> Tensor<F> {
    let (n, h, w, c) = dims4(x);
    let oh = (h - ph) / stride + 1;
    let ow = (w - pw) / stride + 1;
    let xs = x.as_slice().expect("standard layout");
    let gs = grad_out.as_slice().expect("standard layout");
    let mut dx = Tensor::<F>::zeros(IxDyn(&[n, h, w, c]));
    let ds = dx.as_slice_mut().expect("freshly allocated");
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let gsrc = ((ni * oh + oy) * ow + ox) * c;
                let (y0, x0) = (oy * stride, ox * stride);
                for ch in 0..c {
                    let mut best_idx = ((ni * h + y0) * w + x0) * c + ch;
                    let mut best = xs[best_idx];
                    for dy in 0..ph {
                        for dx_ in 0..pw {
                            if dy == 0 && dx_ == 0 {
                                continue;
                            }
                            let idx = ((ni * h + y0 + dy) * w + x0 + dx_) * c + ch;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    ds[best_idx] += gs[gsrc + ch];
                }
            }
        }
    }
    dx
}

pub(crate) fn global_max_pool_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (n, h, w, c) = dims4(x);
    let xs = x.as_slice().expect("standard layout");
    let mut out = Tensor::<F>::zeros(IxDyn(&[n, c]));
    let os = out.as_slice_mut().expect("freshly allocated");
    for ni in 0..n {
        let base = ni * h * w * c;
        os[ni * c..(ni + 1) * c].copy_from_slice(&xs[base..base + c]);
        for p in 1..h * w {
            let src = base + p * c;
            for ch in 0..c {
                if xs[src + ch] > os[ni * c + ch] {
                    os[ni * c + ch] = xs[src + ch];
                }
            }
        }
    }
    out
}

pub(crate) fn global_max_pool_backward<F: Scalar>(
    x: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let (n, h, w, c) = dims4(x);
    let xs = x.as_slice().expect("standard layout");
    let gs = grad_out.as_slice().expect("standard layout");
    let mut dx = Tensor::<F>::zeros(IxDyn(&[n, h, w, c]));
    let ds = dx.as_slice_mut().expect("freshly allocated");
    for ni in 0..n {
        let base = ni * h * w * c;
        for ch in 0..c {
            let mut best_idx = base + ch;
            let mut best = xs[best_idx];
            for p in 1..h * w {
                let idx = base + p * c + ch;
                if xs[idx] > best {
                    best = xs[idx];
                    best_idx = idx;
                }
            }
            ds[best_idx] += gs[ni * c + ch];
        }
    }
    dx
}

pub(crate) fn global_avg_pool_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (n, h, w, c) = dims4(x);
    let scale = F::cast(1.0 / (h * w) as f64);
    let xs = x.as_slice().expect("standard layout");
    let mut out = Tensor::<F>::zeros(IxDyn(&[n, c]));
    let os = out.as_slice_mut().expect("freshly allocated");
    for ni in 0..n {
        let base = ni * h * w * c;
        for p in 0..h * w {
            let src = base + p * c;
            for ch in 0..c {
                os[ni * c + ch] += xs[src + ch];
            }
        }
        for ch in 0..c {
            os[ni * c + ch] *= scale;
        }
    }
    out
}

pub(crate) fn global_avg_pool_backward<F: Scalar>(
    shape: &[usize],
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let scale = F::cast(1.0 / (h * w) as f64);
    let gs = grad_out.as_slice().expect("standard layout");
    let mut dx = Tensor::<F>::zeros(IxDyn(&[n, h, w, c]));
    let ds = dx.as_slice_mut().expect("freshly allocated");
    for ni in 0..n {
        let base = ni * h * w * c;
        for p in 0..h * w {
            let dst = base + p * c;
            for ch in 0..c {
                ds[dst + ch] = gs[ni * c + ch] * scale;
            }
        }
    }
    dx
}

/// Fully connected layer; inputs with more than one trailing dimension are
/// flattened per sample.
pub(crate) fn fully_connected_forward<F: Scalar>(
    x: &Tensor<F>,
    weights: &Tensor<F>,
    bias: &Tensor<F>,
) -> Tensor<F> {
    let n = x.shape()[0];
    let d = x.len() / n;
    let units = bias.len();
    let x2 = x
        .view()
        .into_shape_with_order((n, d))
        .expect("standard layout");
    let w2 = weights
        .view()
        .into_shape_with_order((d, units))
        .expect("weights are standard layout");
    let mut out = matmul(x2, w2);
    let b1 = bias
        .view()
        .into_shape_with_order((1, units))
        .expect("bias is contiguous");
    out += &b1;
    out.into_shape_with_order(IxDyn(&[n, units])).expect("sizes agree")
}

pub(crate) fn fully_connected_backward<F: Scalar>(
    x: &Tensor<F>,
    weights: &Tensor<F>,
    grad_out: &Tensor<F>,
    want_param_grads: bool,
) -> (Tensor<F>, Option<(Tensor<F>, Tensor<F>)>) {
    let n = x.shape()[0];
    let d = x.len() / n;
    let units = grad_out.shape()[1];
    let x2 = x
        .view()
        .into_shape_with_order((n, d))
        .expect("standard layout");
    let g2 = grad_out
        .view()
        .into_shape_with_order((n, units))
        .expect("standard layout");
    let w2 = weights
        .view()
        .into_shape_with_order((d, units))
        .expect("weights are standard layout");

    let param_grads = if want_param_grads {
        let dw = matmul(x2.t(), g2)
            .into_shape_with_order(IxDyn(&[d, units]))
            .expect("sizes agree");
        let db = g2.sum_axis(Axis(0)).into_dyn();
        Some((dw, db))
    } else {
        None
    };

    let dx2 = matmul(g2, w2.t());
    let dx = dx2
        .into_shape_with_order(IxDyn(x.shape()))
        .expect("sizes agree");
    (dx, param_grads)
}

pub(crate) fn relu_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub(crate) fn relu_backward<F: Scalar>(out: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let mut dx = grad_out.clone();
    dx.zip_mut_with(out, |g, y| {
        if *y <= F::zero() {
            *g = F::zero();
        }
    });
    dx
}

pub(crate) fn sigmoid_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

pub(crate) fn sigmoid_backward<F: Scalar>(out: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let mut dx = grad_out.clone();
    dx.zip_mut_with(out, |g, y| *g = *g * *y * (F::one() - *y));
    dx
}

/// Numerically stable softmax over the last axis.
pub(crate) fn softmax_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let c = *x.shape().last().expect("softmax input has an axis");
    let rows = x.len() / c;
    let xs = x.as_slice().expect("standard layout");
    let mut out = Tensor::<F>::zeros(IxDyn(x.shape()));
    let os = out.as_slice_mut().expect("freshly allocated");
    for r in 0..rows {
        let row = &xs[r * c..(r + 1) * c];
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        let mut sum = F::zero();
        for (i, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            os[r * c + i] = e;
            sum += e;
        }
        for i in 0..c {
            os[r * c + i] /= sum;
        }
    }
    out
}

pub(crate) fn softmax_backward<F: Scalar>(out: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let c = *out.shape().last().expect("softmax output has an axis");
    let rows = out.len() / c;
    let ys = out.as_slice().expect("standard layout");
    let gs = grad_out.as_slice().expect("standard layout");
    let mut dx = Tensor::<F>::zeros(IxDyn(out.shape()));
    let ds = dx.as_slice_mut().expect("freshly allocated");
    for r in 0..rows {
        let off = r * c;
        let mut dot = F::zero();
        for i in 0..c {
            dot += gs[off + i] * ys[off + i];
        }
        for i in 0..c {
            ds[off + i] = ys[off + i] * (gs[off + i] - dot);
        }
    }
    dx
}

/// Inverted-scaling dropout mask: kept taps carry 1/(1-rate), dropped taps 0.
pub(crate) fn dropout_mask<F: Scalar>(
    shape: &[usize],
    rate: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor<F> {
    use rand::Rng;
    let scale = F::cast(1.0 / (1.0 - rate));
    let len: usize = shape.iter().product();
    let data: Vec<F> = (0..len)
        .map(|_| {
            let u: f64 = rng.gen();
            if u < rate {
                F::zero()
            } else {
                scale
            }
        })
        .collect();
    Tensor::from_shape_vec(IxDyn(shape), data).expect("sizes agree")
}

pub(crate) fn bias_like<F: Scalar>(units: usize) -> Tensor<F> {
    Array1::<F>::zeros(units).into_dyn()
}

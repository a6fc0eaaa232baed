//! Stateless differentiable layers: 2D convolution, batch normalization,
//! max/avg pooling (2D and 3D), linear projection.
//!
//! Spatial layers treat the trailing three axes as (C, H, W); any leading
//! axes (time, batch) are folded into the batch. Batch norm mutates its
//! running statistics only during training forwards.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct Conv2dParams {
    /// `[out_ch, in_ch, kH, kW]`
    pub weight: Tensor,
    /// `[out_ch]`
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        if weight.ndim() != 4 {
            return Err(Error::Dim(format!(
                "conv weight must be rank 4 [O,I,kH,kW], got {:?}",
                weight.shape()
            )));
        }
        let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::Dim(format!(
                "conv kernel dims and stride must be >= 1 (k = {kh}x{kw}, stride = {stride})"
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::ShapeMismatch {
                    left: b.shape().to_vec(),
                    right: vec![weight.shape()[0]],
                    context: "conv bias vs out channels".into(),
                });
            }
        }
        Ok(Conv2dParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Kaiming-normal initialized, bias-free (BN follows everywhere here).
    pub fn kaiming<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Tensor::randn(&[out_ch, in_ch, kernel, kernel], std, rng).with_grad();
        Conv2dParams {
            weight,
            bias: None,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Standard cross-correlation over the trailing (C, H, W) axes.
/// Output spatial dims: `H' = (H + 2*pad - kH)/stride + 1`.
pub fn conv2d(tape: &Tape, x: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    if x.ndim() < 3 {
        return Err(Error::Dim(format!(
            "conv2d input must have trailing (C,H,W), got {:?}",
            x.shape()
        )));
    }
    let rank = x.ndim();
    let (c, h, w) = (x.shape()[rank - 3], x.shape()[rank - 2], x.shape()[rank - 1]);
    let (out_ch, in_ch) = (p.out_channels(), p.in_channels());
    let (kh, kw) = (p.weight.shape()[2], p.weight.shape()[3]);
    if c != in_ch {
        return Err(Error::Dim(format!(
            "conv2d expected {in_ch} input channels, got {c} (input {:?})",
            x.shape()
        )));
    }
    if h + 2 * p.padding < kh || w + 2 * p.padding < kw {
        return Err(Error::Dim(format!(
            "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * p.padding,
            w + 2 * p.padding
        )));
    }
    let stride = p.stride;
    let pad = p.padding;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let batch: usize = x.shape()[..rank - 3].iter().product();

    let mut out_shape = x.shape()[..rank - 3].to_vec();
    out_shape.extend_from_slice(&[out_ch, oh, ow]);
    let mut data = vec![0.0; batch * out_ch * oh * ow];
    {
        let xv = x.data();
        let wv = p.weight.data();
        let bias = p.bias.as_ref().map(|b| b.to_vec());
        conv2d_forward(
            &mut data, &xv, &wv, bias.as_deref(),
            batch, in_ch, h, w, out_ch, kh, kw, stride, pad, oh, ow,
        );
    }
    let out = Tensor::new_raw(out_shape, data);

    let mut inputs = vec![x, &p.weight];
    if let Some(b) = &p.bias {
        inputs.push(b);
    }
    if tape.should_record(&inputs) {
        let (x, weight, bias, o) = (x.clone(), p.weight.clone(), p.bias.clone(), out.clone());
        tape.record(
            &out,
            Box::new(move || {
                let dout = o.grad_ref();
                let Some(dout) = dout.as_ref() else { return };
                if weight.is_tracked() {
                    let xv = x.data();
                    weight.accum_grad(|gw| {
                        conv2d_backward_weight(
                            gw, &xv, dout, batch, in_ch, h, w, out_ch, kh, kw, stride, pad, oh, ow,
                        );
                    });
                }
                if x.is_tracked() {
                    let wv = weight.data();
                    x.accum_grad(|gx| {
                        conv2d_backward_input(
                            gx, &wv, dout, batch, in_ch, h, w, out_ch, kh, kw, stride, pad, oh, ow,
                        );
                    });
                }
                if let Some(b) = &bias {
                    if b.is_tracked() {
                        b.accum_grad(|gb| {
                            for bi in 0..batch {
                                for (oc, g) in gb.iter_mut().enumerate() {
                                    let base = (bi * out_ch + oc) * oh * ow;
                                    let s: f64 = dout[base..base + oh * ow].iter().sum();
                                    *g += s;
                                }
                            }
                        });
                    }
                }
            }),
        );
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    out: &mut [f64], x: &[f64], wgt: &[f64], bias: Option<&[f64]>,
    batch: usize, in_ch: usize, h: usize, w: usize,
    out_ch: usize, kh: usize, kw: usize, stride: usize, pad: usize,
    oh: usize, ow: usize,
) {
    for bi in 0..batch {
        let x_b = &x[bi * in_ch * h * w..(bi + 1) * in_ch * h * w];
        let o_b = &mut out[bi * out_ch * oh * ow..(bi + 1) * out_ch * oh * ow];
        for oc in 0..out_ch {
            let o_c = &mut o_b[oc * oh * ow..(oc + 1) * oh * ow];
            if let Some(bias) = bias {
                o_c.fill(bias[oc]);
            }
            for ic in 0..in_ch {
                let x_c = &x_b[ic * h * w..(ic + 1) * h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wgt[((oc * in_ch + ic) * kh + ki) * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_rows(o_c, x_c, wv, h, w, ki, kj, stride, pad, oh, ow, false);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    gx: &mut [f64], wgt: &[f64], dout: &[f64],
    batch: usize, in_ch: usize, h: usize, w: usize,
    out_ch: usize, kh: usize, kw: usize, stride: usize, pad: usize,
    oh: usize, ow: usize,
) {
    for bi in 0..batch {
        let g_b = &mut gx[bi * in_ch * h * w..(bi + 1) * in_ch * h * w];
        let d_b = &dout[bi * out_ch * oh * ow..(bi + 1) * out_ch * oh * ow];
        for oc in 0..out_ch {
            let d_c = &d_b[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..in_ch {
                let g_c = &mut g_b[ic * h * w..(ic + 1) * h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wgt[((oc * in_ch + ic) * kh + ki) * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_rows(g_c, d_c, wv, h, w, ki, kj, stride, pad, oh, ow, true);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    gw: &mut [f64], x: &[f64], dout: &[f64],
    batch: usize, in_ch: usize, h: usize, w: usize,
    out_ch: usize, kh: usize, kw: usize, stride: usize, pad: usize,
    oh: usize, ow: usize,
) {
    for bi in 0..batch {
        let x_b = &x[bi * in_ch * h * w..(bi + 1) * in_ch * h * w];
        let d_b = &dout[bi * out_ch * oh * ow..(bi + 1) * out_ch * oh * ow];
        for oc in 0..out_ch {
            let d_c = &d_b[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..in_ch {
                let x_c = &x_b[ic * h * w..(ic + 1) * h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let mut acc = 0.0;
                        for_each_valid_row(h, w, ki, kj, stride, pad, oh, ow, |o_start, x_start, len| {
                            let d_slice = &d_c[o_start..o_start + len];
                            if stride == 1 {
                                let x_slice = &x_c[x_start..x_start + len];
                                for (&d, &xv) in d_slice.iter().zip(x_slice) {
                                    acc += d * xv;
                                }
                            } else {
                                for (idx, &d) in d_slice.iter().enumerate() {
                                    acc += d * x_c[x_start + idx * stride];
                                }
                            }
                        });
                        gw[((oc * in_ch + ic) * kh + ki) * kw + kj] += acc;
                    }
                }
            }
        }
    }
}

/// Visits the valid output rows for one (ki, kj) kernel offset, yielding
/// (output start offset, input start offset, run length). Offsets index
/// into one output / input plane respectively; consecutive j within a run
/// step the input by `stride`.
#[allow(clippy::too_many_arguments)]
fn for_each_valid_row(
    h: usize, w: usize, ki: usize, kj: usize,
    stride: usize, pad: usize, oh: usize, ow: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    // iw = ow*stride + kj - pad must lie in [0, w)
    let shift = kj as isize - pad as isize;
    let lo = if shift < 0 {
        ((-shift) as usize).div_ceil(stride)
    } else {
        0
    };
    let hi_num = w as isize - 1 - shift;
    if hi_num < 0 {
        return;
    }
    let hi = ((hi_num as usize) / stride + 1).min(ow);
    if lo >= hi {
        return;
    }
    let len = hi - lo;
    for orow in 0..oh {
        let ih = orow as isize * stride as isize + ki as isize - pad as isize;
        if ih < 0 || ih >= h as isize {
            continue;
        }
        let x_start = (ih as usize * w) as isize + (lo * stride) as isize + shift;
        f(orow * ow + lo, x_start as usize, len);
    }
}

/// `out[o + j] += wv * inp[x + j*stride]` over each valid run, or the
/// reverse scatter (`inp[x + j*stride] += wv * out[o + j]`) for the conv
/// input gradient.
#[allow(clippy::too_many_arguments)]
fn accumulate_rows(
    dst: &mut [f64], src: &[f64], wv: f64,
    h: usize, w: usize, ki: usize, kj: usize,
    stride: usize, pad: usize, oh: usize, ow: usize,
    scatter: bool,
) {
    for_each_valid_row(h, w, ki, kj, stride, pad, oh, ow, |o_start, x_start, len| {
        if scatter {
            // dst is the input-gradient plane, src is dout
            if stride == 1 {
                let d = &mut dst[x_start..x_start + len];
                let s = &src[o_start..o_start + len];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv += wv * sv;
                }
            } else {
                for j in 0..len {
                    dst[x_start + j * stride] += wv * src[o_start + j];
                }
            }
        } else if stride == 1 {
            let d = &mut dst[o_start..o_start + len];
            let s = &src[x_start..x_start + len];
            for (dv, &sv) in d.iter_mut().zip(s) {
                *dv += wv * sv;
            }
        } else {
            for j in 0..len {
                dst[o_start + j] += wv * src[x_start + j * stride];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[channels]).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }
}

/// Batch norm with the channel axis at `ndim - 3` (conv layout).
pub fn batchnorm(tape: &Tape, x: &Tensor, p: &BatchNormParams, training: bool) -> Result<Tensor> {
    if x.ndim() < 3 {
        return Err(Error::Dim(format!(
            "batchnorm expects conv layout (.., C, H, W), got {:?}",
            x.shape()
        )));
    }
    batchnorm_axis(tape, x, p, x.ndim() - 3, training)
}

/// Batch norm normalizing over every axis except `channel_axis`.
pub fn batchnorm_axis(
    tape: &Tape,
    x: &Tensor,
    p: &BatchNormParams,
    channel_axis: usize,
    training: bool,
) -> Result<Tensor> {
    let rank = x.ndim();
    if channel_axis >= rank {
        return Err(Error::InvalidAxis {
            axis: channel_axis,
            rank,
        });
    }
    let c = x.shape()[channel_axis];
    if c != p.channels() {
        return Err(Error::Dim(format!(
            "batchnorm has {} channels but input axis {} has {} (input {:?})",
            p.channels(),
            channel_axis,
            c,
            x.shape()
        )));
    }
    let reduce_axes: Vec<usize> = (0..rank).filter(|&d| d != channel_axis).collect();
    // Broadcast shape [C, 1, .., 1] aligning C with channel_axis from the right.
    let mut bshape = vec![1usize; rank - channel_axis];
    bshape[0] = c;

    let (mean_b, denom_b) = if training {
        let mu = tape.mean(x, Some(&reduce_axes))?;
        let mu_b = tape.reshape(&mu, &bshape)?;
        let xc = tape.sub(x, &mu_b)?;
        let var = tape.mean(&tape.mul(&xc, &xc)?, Some(&reduce_axes))?;

        // Running statistics track detached batch stats.
        let m = p.momentum;
        let (mu_v, var_v) = (mu.to_vec(), var.to_vec());
        p.running_mean.apply(|rm| {
            for (r, &b) in rm.iter_mut().zip(&mu_v) {
                *r = (1.0 - m) * *r + m * b;
            }
        });
        p.running_var.apply(|rv| {
            for (r, &b) in rv.iter_mut().zip(&var_v) {
                *r = (1.0 - m) * *r + m * b;
            }
        });

        let denom = tape.sqrt(&tape.add_scalar(&var, p.eps));
        (mu_b, tape.reshape(&denom, &bshape)?)
    } else {
        let rm = p.running_mean.detach();
        let denom = tape.sqrt(&tape.add_scalar(&p.running_var.detach(), p.eps));
        (tape.reshape(&rm, &bshape)?, tape.reshape(&denom, &bshape)?)
    };

    let xn = tape.div(&tape.sub(x, &mean_b)?, &denom_b)?;
    let gamma_b = tape.reshape(&p.gamma, &bshape)?;
    let beta_b = tape.reshape(&p.beta, &bshape)?;
    tape.add(&tape.mul(&xn, &gamma_b)?, &beta_b)
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Max pooling over the trailing (H, W) axes. Padding cells never win the
/// max; the backward pass routes each window's gradient to its argmax,
/// ties breaking to the lowest flat index.
pub fn maxpool2d(
    tape: &Tape,
    x: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    pool2d(tape, x, kernel, stride, padding, PoolKind::Max)
}

/// Average pooling over the trailing (H, W) axes; padding counts as zeros
/// (every window divides by kernel^2).
pub fn avgpool2d(
    tape: &Tape,
    x: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    pool2d(tape, x, kernel, stride, padding, PoolKind::Avg)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PoolKind {
    Max,
    Avg,
}

fn pool2d(
    tape: &Tape,
    x: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    kind: PoolKind,
) -> Result<Tensor> {
    if x.ndim() < 2 {
        return Err(Error::Dim(format!(
            "pooling needs trailing (H, W), got {:?}",
            x.shape()
        )));
    }
    if kernel == 0 || stride == 0 {
        return Err(Error::Dim("pool kernel and stride must be >= 1".into()));
    }
    if padding >= kernel {
        return Err(Error::Dim(format!(
            "pool padding {padding} must be smaller than kernel {kernel}"
        )));
    }
    let rank = x.ndim();
    let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    if h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(Error::Dim(format!(
            "pool window {kernel} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let maps: usize = x.shape()[..rank - 2].iter().product();

    let mut out_shape = x.shape()[..rank - 2].to_vec();
    out_shape.extend_from_slice(&[oh, ow]);
    let mut data = vec![0.0; maps * oh * ow];
    let mut argmax = if kind == PoolKind::Max {
        vec![0usize; maps * oh * ow]
    } else {
        Vec::new()
    };
    {
        let xv = x.data();
        let inv_area = 1.0 / (kernel * kernel) as f64;
        for m in 0..maps {
            let x_m = &xv[m * h * w..(m + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    let mut acc = 0.0;
                    for ki in 0..kernel {
                        let ih = (oi * stride + ki) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let iw = (oj * stride + kj) as isize - padding as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = ih as usize * w + iw as usize;
                            let v = x_m[idx];
                            match kind {
                                PoolKind::Max => {
                                    if v > best || best_idx == usize::MAX {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                                PoolKind::Avg => acc += v,
                            }
                        }
                    }
                    let o_idx = (m * oh + oi) * ow + oj;
                    match kind {
                        PoolKind::Max => {
                            data[o_idx] = best;
                            argmax[o_idx] = m * h * w + best_idx;
                        }
                        PoolKind::Avg => data[o_idx] = acc * inv_area,
                    }
                }
            }
        }
    }
    let out = Tensor::new_raw(out_shape, data);
    if tape.should_record(&[x]) {
        let (x, o) = (x.clone(), out.clone());
        tape.record(
            &out,
            Box::new(move || {
                let dout = o.grad_ref();
                let Some(dout) = dout.as_ref() else { return };
                x.accum_grad(|gx| match kind {
                    PoolKind::Max => {
                        for (oi, &src) in argmax.iter().enumerate() {
                            gx[src] += dout[oi];
                        }
                    }
                    PoolKind::Avg => {
                        let inv_area = 1.0 / (kernel * kernel) as f64;
                        for m in 0..maps {
                            let g_m = &mut gx[m * h * w..(m + 1) * h * w];
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    let d = dout[(m * oh + oi) * ow + oj] * inv_area;
                                    for ki in 0..kernel {
                                        let ih = (oi * stride + ki) as isize - padding as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        for kj in 0..kernel {
                                            let iw =
                                                (oj * stride + kj) as isize - padding as isize;
                                            if iw < 0 || iw >= w as isize {
                                                continue;
                                            }
                                            g_m[ih as usize * w + iw as usize] += d;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }),
        );
    }
    Ok(out)
}

/// Max pooling jointly over (T, H, W) of a `[T, B, C, H, W]` tensor.
/// `pad_t` pads the time axis (before, after); spatial padding is
/// symmetric. Padding cells never win.
pub fn maxpool3d(
    tape: &Tape,
    x: &Tensor,
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
    pad_t: (usize, usize),
    pad_hw: usize,
) -> Result<Tensor> {
    if x.ndim() != 5 {
        return Err(Error::Dim(format!(
            "maxpool3d expects [T,B,C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (t, b, c, h, w) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    let (kt, kh, kw) = kernel;
    let (st, sh, sw) = stride;
    if kt == 0 || kh == 0 || kw == 0 || st == 0 || sh == 0 || sw == 0 {
        return Err(Error::Dim("maxpool3d kernel and stride must be >= 1".into()));
    }
    if t + pad_t.0 + pad_t.1 < kt || h + 2 * pad_hw < kh || w + 2 * pad_hw < kw {
        return Err(Error::Dim(format!(
            "maxpool3d window {kt}x{kh}x{kw} exceeds padded input {}x{}x{}",
            t + pad_t.0 + pad_t.1,
            h + 2 * pad_hw,
            w + 2 * pad_hw
        )));
    }
    let ot = (t + pad_t.0 + pad_t.1 - kt) / st + 1;
    let oh = (h + 2 * pad_hw - kh) / sh + 1;
    let ow = (w + 2 * pad_hw - kw) / sw + 1;

    let plane = h * w;
    let frame = b * c * plane; // one timestep
    let out_plane = oh * ow;
    let out_frame = b * c * out_plane;
    let mut data = vec![0.0; ot * out_frame];
    let mut argmax = vec![0usize; ot * out_frame];
    {
        let xv = x.data();
        for oti in 0..ot {
            for bc in 0..b * c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for kti in 0..kt {
                            let it = (oti * st + kti) as isize - pad_t.0 as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for ki in 0..kh {
                                let ih = (oi * sh + ki) as isize - pad_hw as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let iw = (oj * sw + kj) as isize - pad_hw as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let idx = it as usize * frame
                                        + bc * plane
                                        + ih as usize * w
                                        + iw as usize;
                                    if xv[idx] > best || best_idx == usize::MAX {
                                        best = xv[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        let o_idx = oti * out_frame + bc * out_plane + oi * ow + oj;
                        data[o_idx] = best;
                        argmax[o_idx] = best_idx;
                    }
                }
            }
        }
    }
    let out = Tensor::new_raw(vec![ot, b, c, oh, ow], data);
    if tape.should_record(&[x]) {
        let (x, o) = (x.clone(), out.clone());
        tape.record(
            &out,
            Box::new(move || {
                let dout = o.grad_ref();
                let Some(dout) = dout.as_ref() else { return };
                x.accum_grad(|gx| {
                    for (oi, &src) in argmax.iter().enumerate() {
                        gx[src] += dout[oi];
                    }
                });
            }),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct LinearParams {
    /// `[in_features, out_features]`
    pub weight: Tensor,
    /// `[out_features]`
    pub bias: Tensor,
}

impl LinearParams {
    pub fn init<R: Rng>(in_features: usize, out_features: usize, std: f64, rng: &mut R) -> Self {
        LinearParams {
            weight: Tensor::randn(&[in_features, out_features], std, rng).with_grad(),
            bias: Tensor::zeros(&[out_features]).with_grad(),
        }
    }
}

/// `x @ W + b` over the trailing feature axis.
pub fn linear(tape: &Tape, x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let y = tape.matmul(x, &p.weight)?;
    tape.add(&y, &p.bias)
}

// ---------------------------------------------------------------------------
// Conv + BN composite
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct ConvBn {
    pub conv: Conv2dParams,
    pub bn: BatchNormParams,
}

impl ConvBn {
    pub fn init<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        ConvBn {
            conv: Conv2dParams::kaiming(in_ch, out_ch, kernel, stride, padding, rng),
            bn: BatchNormParams::new(out_ch),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = conv2d(tape, x, &self.conv)?;
        batchnorm(tape, &y, &self.bn, training)
    }
}

//! Stand-alone operator kernels. Each differentiable operator has a
//! forward function and the matching vector-Jacobian product; the graph
//! in [`super::graph`] only records which of these to call.
//!
//! Every output element is produced by exactly one task in a fixed
//! summation order, and batch reductions are summed sequentially after
//! the parallel section, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Element, Shape, Tensor};
use crate::error::{Axis, Error, Result};

/// Convolution hyper-parameters. Padding is always "same":
/// `dilation * (kernel - 1) / 2` on every side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            dilation: 1,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn dense(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation: 1,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn depthwise(channels: usize, stride: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel: 3,
            stride,
            dilation,
            groups: channels,
            has_bias: false,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.in_channels == self.out_channels
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        )
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("conv spec: {msg}")));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return bad("stride, dilation and groups must be positive".into());
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return bad(format!(
                "groups {} must divide in {} and out {}",
                self.groups, self.in_channels, self.out_channels
            ));
        }
        if self.groups > 1 && self.groups == self.in_channels && self.in_channels != self.out_channels
        {
            return bad("depthwise convolution requires in_channels == out_channels".into());
        }
        Ok(())
    }
}

fn expect_eq(op: &'static str, axis: Axis, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::dim(op, axis, expected, got))
    }
}

fn check_conv<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<()> {
    spec.validate()?;
    expect_eq("conv2d", Axis::Channel, spec.in_channels, x.shape().c)?;
    let ws = spec.weight_shape();
    let got = w.shape();
    expect_eq("conv2d weight", Axis::Batch, ws.n, got.n)?;
    expect_eq("conv2d weight", Axis::Channel, ws.c, got.c)?;
    expect_eq("conv2d weight", Axis::Height, ws.h, got.h)?;
    expect_eq("conv2d weight", Axis::Width, ws.w, got.w)?;
    match (b, spec.has_bias) {
        (Some(b), true) => expect_eq("conv2d bias", Axis::Channel, spec.out_channels, b.len()),
        (None, false) => Ok(()),
        (Some(_), false) => Err(Error::shape("conv2d", "bias given but spec has no bias")),
        (None, true) => Err(Error::shape("conv2d", "spec requires a bias tensor")),
    }
}

pub fn conv_output_shape(x: Shape, spec: &ConvSpec) -> Shape {
    let (oh, ow) = spec.output_hw(x.h, x.w);
    Shape::new(x.n, spec.out_channels, oh, ow)
}

/// Unfolds one group of one sample into a `(cin_g*k*k) x (oh*ow)` matrix.
fn im2col<T: Element>(
    x: &[T],
    h: usize,
    w: usize,
    cin_g: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let k = spec.kernel;
    let pad = spec.padding() as isize;
    let (s, d) = (spec.stride as isize, spec.dilation as isize);
    let opl = oh * ow;
    for ci in 0..cin_g {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * opl..(row + 1) * opl];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize * d - pad;
                    for ox in 0..ow {
                        let ix = ox as isize * s + kx as isize * d - pad;
                        dst[oy * ow + ox] =
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                plane[iy as usize * w + ix as usize]
                            } else {
                                T::zero()
                            };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(
    cols: &[T],
    h: usize,
    w: usize,
    cin_g: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let k = spec.kernel;
    let pad = spec.padding() as isize;
    let (s, d) = (spec.stride as isize, spec.dilation as isize);
    let opl = oh * ow;
    for ci in 0..cin_g {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * opl..(row + 1) * opl];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize * d - pad;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox as isize * s + kx as isize * d - pad;
                        if ix >= 0 && (ix as usize) < w {
                            plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_plain_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1
}

/// Direct depthwise correlation for one channel plane.
fn depthwise_plane<T: Element>(
    x: &[T],
    h: usize,
    w: usize,
    taps: &[T],
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let k = spec.kernel;
    let pad = spec.padding() as isize;
    let (s, d) = (spec.stride as isize, spec.dilation as isize);
    for oy in 0..oh {
        let row = &mut out[oy * ow..(oy + 1) * ow];
        for ky in 0..k {
            let iy = oy as isize * s + ky as isize * d - pad;
            if iy < 0 || iy as usize >= h {
                continue;
            }
            let src = &x[iy as usize * w..(iy as usize + 1) * w];
            for kx in 0..k {
                let tap = taps[ky * k + kx];
                let off = kx as isize * d - pad;
                for (ox, o) in row.iter_mut().enumerate() {
                    let ix = ox as isize * s + off;
                    if ix >= 0 && (ix as usize) < w {
                        *o += tap * src[ix as usize];
                    }
                }
            }
        }
    }
}

/// 2-D convolution (cross-correlation) with zero "same" padding.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    check_conv(x, w, b, spec)?;
    let xs = x.shape();
    let os = conv_output_shape(xs, spec);
    let (oh, ow) = (os.h, os.w);
    let opl = oh * ow;
    let mut out = vec![T::zero(); os.numel()];

    if spec.is_depthwise() {
        let c = xs.c;
        let kk = spec.kernel * spec.kernel;
        out.par_chunks_mut(opl).enumerate().for_each(|(i, dst)| {
            let ch = i % c;
            let src = &x.data()[i * xs.plane()..(i + 1) * xs.plane()];
            depthwise_plane(src, xs.h, xs.w, &w.data()[ch * kk..(ch + 1) * kk], spec, oh, ow, dst);
        });
    } else {
        let g = spec.groups;
        let cin_g = spec.in_channels / g;
        let cout_g = spec.out_channels / g;
        let kdim = cin_g * spec.kernel * spec.kernel;
        let in_per = xs.c * xs.plane();
        let out_per = os.c * opl;
        out.par_chunks_mut(out_per).enumerate().for_each(|(n, dst)| {
            let sample = &x.data()[n * in_per..(n + 1) * in_per];
            let mut cols = if is_plain_pointwise(spec) {
                Vec::new()
            } else {
                vec![T::zero(); kdim * opl]
            };
            for gi in 0..g {
                let xg = &sample[gi * cin_g * xs.plane()..(gi + 1) * cin_g * xs.plane()];
                let mat: &[T] = if is_plain_pointwise(spec) {
                    xg
                } else {
                    im2col(xg, xs.h, xs.w, cin_g, spec, oh, ow, &mut cols);
                    &cols
                };
                let wg = &w.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
                let og = &mut dst[gi * cout_g * opl..(gi + 1) * cout_g * opl];
                T::gemm(
                    cout_g,
                    kdim,
                    opl,
                    T::one(),
                    wg,
                    kdim as isize,
                    1,
                    mat,
                    opl as isize,
                    1,
                    T::zero(),
                    og,
                    opl as isize,
                    1,
                );
            }
        });
    }

    if let Some(b) = b {
        out.par_chunks_mut(opl).enumerate().for_each(|(i, dst)| {
            let bias = b.data()[i % os.c];
            dst.iter_mut().for_each(|v| *v += bias);
        });
    }
    Ok(Tensor::from_parts(os, out))
}

/// Gradients of [`conv2d`]: `(dx, dw, db)`. `dx` is only computed when
/// `need_dx` is set.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>) {
    let xs = x.shape();
    let os = dy.shape();
    let (oh, ow) = (os.h, os.w);
    let opl = oh * ow;
    let ws = spec.weight_shape();
    let wlen = ws.numel();

    let (dx, dw) = if spec.is_depthwise() {
        let c = xs.c;
        let k = spec.kernel;
        let kk = k * k;
        let pad = spec.padding() as isize;
        let (s, d) = (spec.stride as isize, spec.dilation as isize);
        // Per-plane weight partials, reduced over the batch in order below.
        let partials: Vec<Vec<T>> = (0..xs.n * c)
            .into_par_iter()
            .map(|i| {
                let src = &x.data()[i * xs.plane()..(i + 1) * xs.plane()];
                let g = &dy.data()[i * opl..(i + 1) * opl];
                let mut acc = vec![T::zero(); kk];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut sum = T::zero();
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize * d - pad;
                            if iy < 0 || iy as usize >= xs.h {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx as isize * d - pad;
                                if ix >= 0 && (ix as usize) < xs.w {
                                    sum += g[oy * ow + ox] * src[iy as usize * xs.w + ix as usize];
                                }
                            }
                        }
                        acc[ky * k + kx] = sum;
                    }
                }
                acc
            })
            .collect();
        let mut dw = vec![T::zero(); wlen];
        for (i, p) in partials.iter().enumerate() {
            let ch = i % c;
            for (dst, v) in dw[ch * kk..(ch + 1) * kk].iter_mut().zip(p) {
                *dst += *v;
            }
        }
        let dx = need_dx.then(|| {
            let mut dx = vec![T::zero(); xs.numel()];
            dx.par_chunks_mut(xs.plane()).enumerate().for_each(|(i, dst)| {
                let ch = i % c;
                let taps = &w.data()[ch * kk..(ch + 1) * kk];
                let g = &dy.data()[i * opl..(i + 1) * opl];
                for oy in 0..oh {
                    for ky in 0..k {
                        let iy = oy as isize * s + ky as isize * d - pad;
                        if iy < 0 || iy as usize >= xs.h {
                            continue;
                        }
                        let row = &mut dst[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                        for kx in 0..k {
                            let tap = taps[ky * k + kx];
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx as isize * d - pad;
                                if ix >= 0 && (ix as usize) < xs.w {
                                    row[ix as usize] += tap * g[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            });
            Tensor::from_parts(xs, dx)
        });
        (dx, Tensor::from_parts(ws, dw))
    } else {
        let g = spec.groups;
        let cin_g = spec.in_channels / g;
        let cout_g = spec.out_channels / g;
        let kdim = cin_g * spec.kernel * spec.kernel;
        let in_per = xs.c * xs.plane();
        let out_per = os.c * opl;
        let pointwise = is_plain_pointwise(spec);
        let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..xs.n)
            .into_par_iter()
            .map(|n| {
                let sample = &x.data()[n * in_per..(n + 1) * in_per];
                let gsample = &dy.data()[n * out_per..(n + 1) * out_per];
                let mut dw = vec![T::zero(); wlen];
                let mut dx = need_dx.then(|| vec![T::zero(); in_per]);
                let mut cols = if pointwise {
                    Vec::new()
                } else {
                    vec![T::zero(); kdim * opl]
                };
                let mut dcols = vec![T::zero(); if need_dx { kdim * opl } else { 0 }];
                for gi in 0..g {
                    let xg = &sample[gi * cin_g * xs.plane()..(gi + 1) * cin_g * xs.plane()];
                    let mat: &[T] = if pointwise {
                        xg
                    } else {
                        im2col(xg, xs.h, xs.w, cin_g, spec, oh, ow, &mut cols);
                        &cols
                    };
                    let gg = &gsample[gi * cout_g * opl..(gi + 1) * cout_g * opl];
                    // dW_g = dY_g * cols^T
                    T::gemm(
                        cout_g,
                        opl,
                        kdim,
                        T::one(),
                        gg,
                        opl as isize,
                        1,
                        mat,
                        1,
                        opl as isize,
                        T::zero(),
                        &mut dw[gi * cout_g * kdim..(gi + 1) * cout_g * kdim],
                        kdim as isize,
                        1,
                    );
                    if let Some(dx) = dx.as_mut() {
                        let wg = &w.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
                        let dxg = &mut dx[gi * cin_g * xs.plane()..(gi + 1) * cin_g * xs.plane()];
                        // dcols = W_g^T * dY_g
                        let target: &mut [T] = if pointwise { dxg } else { &mut dcols };
                        T::gemm(
                            kdim,
                            cout_g,
                            opl,
                            T::one(),
                            wg,
                            1,
                            kdim as isize,
                            gg,
                            opl as isize,
                            1,
                            T::zero(),
                            target,
                            opl as isize,
                            1,
                        );
                        if !pointwise {
                            col2im(&dcols, xs.h, xs.w, cin_g, spec, oh, ow, dxg);
                        }
                    }
                }
                (dw, dx)
            })
            .collect();
        let mut dw = vec![T::zero(); wlen];
        let mut dx = need_dx.then(|| Vec::with_capacity(xs.numel()));
        for (pw, px) in per_sample {
            for (a, b) in dw.iter_mut().zip(pw) {
                *a += b;
            }
            if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
                dx.extend_from_slice(&px);
            }
        }
        (
            dx.map(|d| Tensor::from_parts(xs, d)),
            Tensor::from_parts(ws, dw),
        )
    };

    let db = spec.has_bias.then(|| {
        let mut db = vec![T::zero(); os.c];
        for n in 0..os.n {
            for (c, acc) in db.iter_mut().enumerate() {
                let base = (n * os.c + c) * opl;
                for &v in &dy.data()[base..base + opl] {
                    *acc += v;
                }
            }
        }
        Tensor::from_parts(Shape::vector(os.c), db)
    });
    (dx, dw, db)
}

/// Batch statistics saved by a train-mode batch norm for its backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<T: Element> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance (the one used for normalization).
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

fn check_channel_vec<T: Element>(op: &'static str, x: Shape, v: &Tensor<T>) -> Result<()> {
    expect_eq(op, Axis::Channel, x.c, v.len())
}

/// Train-mode batch normalization over (n, h, w) per channel.
pub fn batch_norm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let s = x.shape();
    check_channel_vec("batch_norm gamma", s, gamma)?;
    check_channel_vec("batch_norm beta", s, beta)?;
    if eps <= 0.0 {
        return Err(Error::Numeric(format!("batch_norm epsilon must be positive, got {eps}")));
    }
    let plane = s.plane();
    let count = s.n * plane;
    let cnt = T::of(count as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for &v in &x.data()[base..base + plane] {
                acc += v;
            }
        }
        let m = acc / cnt;
        let mut sq = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for &v in &x.data()[base..base + plane] {
                let d = v - m;
                sq += d * d;
            }
        }
        mean[c] = m;
        var[c] = sq / cnt;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
    let mut xhat = vec![T::zero(); s.numel()];
    let mut y = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let (m, is, g, b) = (mean[c], inv_std[c], gamma.data()[c], beta.data()[c]);
            for i in base..base + plane {
                let h = (x.data()[i] - m) * is;
                xhat[i] = h;
                y[i] = g * h + b;
            }
        }
    }
    Ok((
        Tensor::from_parts(s, y),
        BatchNormSaved {
            xhat: Tensor::from_parts(s, xhat),
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

/// Eval-mode batch normalization with running statistics.
pub fn batch_norm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    let s = x.shape();
    for (name, v) in [
        ("batch_norm gamma", gamma),
        ("batch_norm beta", beta),
        ("batch_norm running_mean", running_mean),
        ("batch_norm running_var", running_var),
    ] {
        check_channel_vec(name, s, v)?;
    }
    let mut inv_std = Vec::with_capacity(s.c);
    for &v in running_var.data() {
        let denom = v.f64() + eps;
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::Numeric(format!(
                "batch_norm variance plus epsilon is not positive ({denom})"
            )));
        }
        inv_std.push(T::of(1.0 / denom.sqrt()));
    }
    let plane = s.plane();
    let mut y = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let scale = gamma.data()[c] * inv_std[c];
            let shift = beta.data()[c] - running_mean.data()[c] * scale;
            for i in base..base + plane {
                y[i] = x.data()[i] * scale + shift;
            }
        }
    }
    Ok((Tensor::from_parts(s, y), inv_std))
}

/// Train-mode batch norm gradients: `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Element>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let plane = s.plane();
    let m = T::of(saved.count as f64);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in base..base + plane {
                dgamma[c] += dy.data()[i] * saved.xhat.data()[i];
                dbeta[c] += dy.data()[i];
            }
        }
    }
    let mut dx = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let g = gamma.data()[c];
            let k = g * saved.inv_std[c] / m;
            for i in base..base + plane {
                dx[i] = k * (m * dy.data()[i] - dbeta[c] - saved.xhat.data()[i] * dgamma[c]);
            }
        }
    }
    (
        Tensor::from_parts(s, dx),
        Tensor::from_parts(Shape::vector(s.c), dgamma),
        Tensor::from_parts(Shape::vector(s.c), dbeta),
    )
}

/// Eval-mode batch norm gradients: `(dx, dgamma, dbeta)`.
pub fn batch_norm_eval_backward<T: Element>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    inv_std: &[T],
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let plane = s.plane();
    let mut dx = vec![T::zero(); s.numel()];
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let (is, g, mu) = (inv_std[c], gamma.data()[c], running_mean.data()[c]);
            for i in base..base + plane {
                let d = dy.data()[i];
                dx[i] = d * g * is;
                dgamma[c] += d * (x.data()[i] - mu) * is;
                dbeta[c] += d;
            }
        }
    }
    (
        Tensor::from_parts(s, dx),
        Tensor::from_parts(Shape::vector(s.c), dgamma),
        Tensor::from_parts(Shape::vector(s.c), dbeta),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Element>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => x.map(sigmoid_scalar),
    }
}

/// `x` is the activation input, `y` its output.
pub fn activation_backward<T: Element>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    dy: &Tensor<T>,
    kind: Activation,
) -> Tensor<T> {
    let data = match kind {
        Activation::Relu => x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
        Activation::Sigmoid => y
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect(),
    };
    Tensor::from_parts(x.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Mul,
    Add,
}

/// Whether `b` broadcasts as a per-channel vector over `a`'s spatial extent.
fn broadcast_kind(op: &'static str, a: Shape, b: Shape) -> Result<bool> {
    if a == b {
        return Ok(false);
    }
    if b.h == 1 && b.w == 1 && b.n == a.n && b.c == a.c {
        return Ok(true);
    }
    for (axis, x, y) in [
        (Axis::Batch, a.n, b.n),
        (Axis::Channel, a.c, b.c),
        (Axis::Height, a.h, b.h),
        (Axis::Width, a.w, b.w),
    ] {
        if x != y {
            return Err(Error::dim(op, axis, x, y));
        }
    }
    unreachable!("shapes differ on some axis")
}

/// Elementwise `a (op) b`; `b` may be an `(n, c, 1, 1)` vector that is
/// replicated across space.
pub fn elementwise_binary<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    kind: BinaryKind,
) -> Result<Tensor<T>> {
    let s = a.shape();
    let bcast = broadcast_kind("elementwise_binary", s, b.shape())?;
    let plane = s.plane();
    let f = |x: T, y: T| match kind {
        BinaryKind::Mul => x * y,
        BinaryKind::Add => x + y,
    };
    let data = if bcast {
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i / plane]))
            .collect()
    } else {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    };
    Ok(Tensor::from_parts(s, data))
}

/// Gradients of [`elementwise_binary`]: `(da, db)`, with `db` reduced
/// back to the broadcast shape.
pub fn elementwise_binary_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
    kind: BinaryKind,
) -> (Tensor<T>, Tensor<T>) {
    let s = a.shape();
    let bcast = b.shape() != s;
    let plane = s.plane();
    let bval = |i: usize| if bcast { b.data()[i / plane] } else { b.data()[i] };
    let da: Vec<T> = match kind {
        BinaryKind::Add => dy.data().to_vec(),
        BinaryKind::Mul => dy.data().iter().enumerate().map(|(i, &g)| g * bval(i)).collect(),
    };
    let contrib = |i: usize, g: T| match kind {
        BinaryKind::Add => g,
        BinaryKind::Mul => g * a.data()[i],
    };
    let db = if bcast {
        let mut db = vec![T::zero(); b.len()];
        for (i, &g) in dy.data().iter().enumerate() {
            db[i / plane] += contrib(i, g);
        }
        db
    } else {
        dy.data().iter().enumerate().map(|(i, &g)| contrib(i, g)).collect()
    };
    (Tensor::from_parts(s, da), Tensor::from_parts(b.shape(), db))
}

pub fn concat_channels<T: Element>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
        .shape();
    let mut c_total = 0;
    for x in xs {
        let s = x.shape();
        expect_eq("concat_channels", Axis::Batch, first.n, s.n)?;
        expect_eq("concat_channels", Axis::Height, first.h, s.h)?;
        expect_eq("concat_channels", Axis::Width, first.w, s.w)?;
        c_total += s.c;
    }
    let out = Shape::new(first.n, c_total, first.h, first.w);
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..first.n {
        for x in xs {
            let per = x.shape().c * first.plane();
            data.extend_from_slice(&x.data()[n * per..(n + 1) * per]);
        }
    }
    Ok(Tensor::from_parts(out, data))
}

/// Splits an upstream gradient back into the channel blocks of a concat.
pub fn concat_channels_backward<T: Element>(dy: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let s = dy.shape();
    let plane = s.plane();
    let mut parts: Vec<Vec<T>> = channels.iter().map(|c| Vec::with_capacity(s.n * c * plane)).collect();
    for n in 0..s.n {
        let mut offset = n * s.c * plane;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&dy.data()[offset..offset + c * plane]);
            offset += c * plane;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_parts(Shape::new(s.n, c, s.h, s.w), d))
        .collect()
}

/// Source taps for one output coordinate of a half-pixel bilinear resize.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            Tap {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers (align-corners off).
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", "target extents must be at least 1"));
    }
    let s = x.shape();
    if s.h == out_h && s.w == out_w {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    let out = Shape::new(s.n, s.c, out_h, out_w);
    let mut data = vec![T::zero(); out.numel()];
    data.par_chunks_mut(out_h * out_w).enumerate().for_each(|(i, dst)| {
        let src = &x.data()[i * s.plane()..(i + 1) * s.plane()];
        for (oy, ty) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(ty.frac), T::of(1.0 - ty.frac));
            let r0 = &src[ty.i0 * s.w..(ty.i0 + 1) * s.w];
            let r1 = &src[ty.i1 * s.w..(ty.i1 + 1) * s.w];
            for (ox, tx) in tx.iter().enumerate() {
                let (fx, gx) = (T::of(tx.frac), T::of(1.0 - tx.frac));
                let top = r0[tx.i0] * gx + r0[tx.i1] * fx;
                let bot = r1[tx.i0] * gx + r1[tx.i1] * fx;
                dst[oy * out_w + ox] = top * gy + bot * fy;
            }
        }
    });
    Ok(Tensor::from_parts(out, data))
}

pub fn bilinear_resize_backward<T: Element>(dy: &Tensor<T>, input: Shape) -> Tensor<T> {
    let os = dy.shape();
    if os.h == input.h && os.w == input.w {
        return dy.clone();
    }
    let ty = bilinear_taps(input.h, os.h);
    let tx = bilinear_taps(input.w, os.w);
    let mut data = vec![T::zero(); input.numel()];
    data.par_chunks_mut(input.plane()).enumerate().for_each(|(i, dst)| {
        let g = &dy.data()[i * os.plane()..(i + 1) * os.plane()];
        for (oy, ty) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(ty.frac), T::of(1.0 - ty.frac));
            for (ox, tx) in tx.iter().enumerate() {
                let (fx, gx) = (T::of(tx.frac), T::of(1.0 - tx.frac));
                let v = g[oy * os.w + ox];
                dst[ty.i0 * input.w + tx.i0] += v * gy * gx;
                dst[ty.i0 * input.w + tx.i1] += v * gy * fx;
                dst[ty.i1 * input.w + tx.i0] += v * fy * gx;
                dst[ty.i1 * input.w + tx.i1] += v * fy * fx;
            }
        }
    });
    Tensor::from_parts(input, data)
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let inv = T::of(1.0 / plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| {
            let mut acc = T::zero();
            for &v in p {
                acc += v;
            }
            acc * inv
        })
        .collect();
    Tensor::from_parts(Shape::new(s.n, s.c, 1, 1), data)
}

pub fn global_avg_pool_backward<T: Element>(dy: &Tensor<T>, input: Shape) -> Tensor<T> {
    let plane = input.plane();
    let inv = T::of(1.0 / plane as f64);
    let mut data = Vec::with_capacity(input.numel());
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::from_parts(input, data)
}

/// `y = W x + b` for each batch row; `x` is `(n, c, 1, 1)` and `w` is
/// `(out, c, 1, 1)`.
pub fn fully_connected<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape("fully_connected", format!("input must be (n, c, 1, 1), got {s}")));
    }
    let ws = w.shape();
    expect_eq("fully_connected", Axis::Channel, ws.c, s.c)?;
    if ws.h != 1 || ws.w != 1 {
        return Err(Error::shape("fully_connected", format!("weight must be (out, c, 1, 1), got {ws}")));
    }
    if let Some(b) = b {
        expect_eq("fully_connected bias", Axis::Channel, ws.n, b.len())?;
    }
    let out = ws.n;
    let mut y = vec![T::zero(); s.n * out];
    T::gemm(
        s.n,
        s.c,
        out,
        T::one(),
        x.data(),
        s.c as isize,
        1,
        w.data(),
        1,
        s.c as isize,
        T::zero(),
        &mut y,
        out as isize,
        1,
    );
    if let Some(b) = b {
        for row in y.chunks_mut(out) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(s.n, out, 1, 1), y))
}

/// `(dx, dw, db)` for [`fully_connected`].
pub fn fully_connected_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let out = w.shape().n;
    let mut dx = vec![T::zero(); s.numel()];
    T::gemm(
        s.n,
        out,
        s.c,
        T::one(),
        dy.data(),
        out as isize,
        1,
        w.data(),
        s.c as isize,
        1,
        T::zero(),
        &mut dx,
        s.c as isize,
        1,
    );
    let mut dw = vec![T::zero(); out * s.c];
    T::gemm(
        out,
        s.n,
        s.c,
        T::one(),
        dy.data(),
        1,
        out as isize,
        x.data(),
        s.c as isize,
        1,
        T::zero(),
        &mut dw,
        s.c as isize,
        1,
    );
    let mut db = vec![T::zero(); out];
    for row in dy.data().chunks(out) {
        for (a, &g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    (
        Tensor::from_parts(s, dx),
        Tensor::from_parts(w.shape(), dw),
        Tensor::from_parts(Shape::vector(out), db),
    )
}

// Non-differentiable image utilities used by data loading and evaluation.

/// Nearest-neighbour resize with half-pixel centers; keeps binary masks binary.
pub fn resize_nearest<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape();
    let map = |o: usize, input: usize, output: usize| {
        (((o as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
    };
    let ys: Vec<usize> = (0..out_h).map(|o| map(o, s.h, out_h)).collect();
    let xs: Vec<usize> = (0..out_w).map(|o| map(o, s.w, out_w)).collect();
    let out = Shape::new(s.n, s.c, out_h, out_w);
    let mut data = Vec::with_capacity(out.numel());
    for p in x.data().chunks(s.plane()) {
        for &y in &ys {
            for &xx in &xs {
                data.push(p[y * s.w + xx]);
            }
        }
    }
    Tensor::from_parts(out, data)
}

pub fn flip_horizontal<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks(s.w) {
        data.extend(row.iter().rev());
    }
    Tensor::from_parts(s, data)
}

/// Crops the window `[top, top + h) x [left, left + w)` from every plane.
pub fn crop<T: Element>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h == 0 || w == 0 || top + h > s.h || left + w > s.w {
        return Err(Error::shape(
            "crop",
            format!("window {h}x{w} at ({top},{left}) exceeds {}x{}", s.h, s.w),
        ));
    }
    let mut data = Vec::with_capacity(s.n * s.c * h * w);
    for p in x.data().chunks(s.plane()) {
        for y in top..top + h {
            data.extend_from_slice(&p[y * s.w + left..y * s.w + left + w]);
        }
    }
    Ok(Tensor::from_parts(Shape::new(s.n, s.c, h, w), data))
}

/// Mirror index without edge repetition, periodic for pads wider than the input.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflection-pads the bottom and right edges up to `(out_h, out_w)`.
pub fn pad_reflect<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h < s.h || out_w < s.w {
        return Err(Error::shape("pad_reflect", "target must not be smaller than input"));
    }
    let mut data = Vec::with_capacity(s.n * s.c * out_h * out_w);
    for p in x.data().chunks(s.plane()) {
        for y in 0..out_h {
            let sy = reflect_index(y as isize, s.h);
            for xx in 0..out_w {
                data.push(p[sy * s.w + reflect_index(xx as isize, s.w)]);
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(s.n, s.c, out_h, out_w), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_pointwise_kernel_is_identity() {
        let x = Tensor::from_fn(Shape::new(2, 1, 3, 4), |n, _, y, x| (n * 12 + y * 4 + x) as f64 - 5.0);
        let w = Tensor::ones(Shape::new(1, 1, 1, 1));
        let y = conv2d(&x, &w, None, &ConvSpec::pointwise(1, 1)).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn depthwise_all_ones_counts_taps() {
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 3, 3));
        let w = Tensor::ones(Shape::new(1, 1, 3, 3));
        let spec = ConvSpec::depthwise(1, 1, 1);
        // groups == in == out == 1 is treated as dense; same answer.
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);

        let x2 = Tensor::<f64>::ones(Shape::new(1, 2, 3, 3));
        let w2 = Tensor::ones(Shape::new(2, 1, 3, 3));
        let y2 = conv2d(&x2, &w2, None, &ConvSpec::depthwise(2, 1, 1)).unwrap();
        assert_eq!(y2.at(0, 1, 1, 1), 9.0);
        assert_eq!(y2.at(0, 1, 0, 0), 4.0);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let x = Tensor::from_fn(Shape::new(1, 3, 5, 5), |_, c, y, x| (c + y * x) as f64);
        let spec = ConvSpec::dense(3, 4, 3, 2).with_bias(true);
        let y = conv2d(
            &x,
            &Tensor::zeros(spec.weight_shape()),
            Some(&Tensor::zeros(Shape::vector(4))),
            &spec,
        )
        .unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 3, 3));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_names_axis() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let spec = ConvSpec::pointwise(2, 2);
        let err = conv2d(&x, &Tensor::zeros(spec.weight_shape()), None, &spec).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: Axis::Channel, expected: 2, got: 3, .. }));
    }

    #[test]
    fn depthwise_requires_square_channels() {
        let spec = ConvSpec {
            in_channels: 4,
            out_channels: 8,
            kernel: 3,
            stride: 1,
            dilation: 1,
            groups: 2,
            has_bias: false,
        };
        assert!(spec.validate().is_ok());
        assert!(!spec.is_depthwise());
        assert!(ConvSpec { groups: 4, ..spec }.validate().is_err());
        assert!(ConvSpec { out_channels: 6, groups: 4, ..spec }.validate().is_err());
    }

    #[test]
    fn stride_two_maps_to_ceil_half() {
        for h in 1..=64 {
            let spec = ConvSpec::depthwise(1, 2, 1);
            assert_eq!(spec.output_hw(h, h), (h.div_ceil(2), h.div_ceil(2)));
            let x = Tensor::<f64>::ones(Shape::new(1, 1, h, 3));
            let y = conv2d(&x, &Tensor::ones(Shape::new(1, 1, 3, 3)), None, &ConvSpec::dense(1, 1, 3, 2)).unwrap();
            assert_eq!(y.shape().h, h.div_ceil(2));
        }
    }

    #[test]
    fn batch_norm_eval_identity_statistics() {
        let x = Tensor::from_fn(Shape::new(2, 2, 2, 2), |n, c, y, x| (n + c + y) as f64 - x as f64 * 0.5);
        let ones = Tensor::ones(Shape::vector(2));
        let zeros = Tensor::zeros(Shape::vector(2));
        // eps = 0 is allowed in eval mode as long as var + eps > 0.
        let (y, _) = batch_norm_eval(&x, &ones, &zeros, &zeros, &ones, 0.0).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn batch_norm_eval_rejects_nonpositive_variance() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let v = Tensor::zeros(Shape::vector(1));
        let err = batch_norm_eval(&x, &v, &v, &v, &v, 0.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn batch_norm_train_constant_input_gives_beta() {
        let x = Tensor::full(Shape::new(3, 2, 2, 2), 4.0);
        let gamma = t(Shape::vector(2), &[2.0, 3.0]);
        let beta = t(Shape::vector(2), &[0.5, -1.0]);
        let (y, _) = batch_norm_train(&x, &gamma, &beta, 1e-5).unwrap();
        for n in 0..3 {
            assert_eq!(y.at(n, 0, 1, 1), 0.5);
            assert_eq!(y.at(n, 1, 0, 1), -1.0);
        }
    }

    #[test]
    fn batch_norm_train_plus_minus_one() {
        let x = t(Shape::new(2, 1, 1, 1), &[-1.0, 1.0]);
        let (y, saved) = batch_norm_train(&x, &Tensor::ones(Shape::vector(1)), &Tensor::zeros(Shape::vector(1)), 1e-5).unwrap();
        // mean 0, biased variance 1
        assert_eq!(saved.mean[0], 0.0);
        assert_eq!(saved.var[0], 1.0);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
        assert!((expect - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn activations() {
        let x = t(Shape::new(1, 1, 1, 4), &[-2.0, 3.0, 0.0, 20.0]);
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 3.0, 0.0, 20.0]);
        let s = activation(&x, Activation::Sigmoid);
        assert_eq!(s.data()[2], 0.5);
        assert!((s.data()[3] - 1.0).abs() < 1e-8);
        assert!(sigmoid_scalar(-20.0f64) < 1e-8);
        assert!(sigmoid_scalar(-20.0f64) > 0.0);
    }

    #[test]
    fn binary_identities_and_broadcast() {
        let a = Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, y, x| (n * 7 + c * 3 + y * 2 + x) as f64 * 0.1);
        let ones = Tensor::ones(a.shape());
        let zeros = Tensor::zeros(a.shape());
        assert!(elementwise_binary(&a, &ones, BinaryKind::Mul).unwrap().bit_eq(&a));
        assert!(elementwise_binary(&a, &zeros, BinaryKind::Add).unwrap().bit_eq(&a));

        let v = Tensor::from_fn(Shape::new(2, 3, 1, 1), |n, c, _, _| (n + 1) as f64 * (c as f64 - 1.0));
        let explicit = Tensor::from_fn(a.shape(), |n, c, _, _| v.at(n, c, 0, 0));
        let got = elementwise_binary(&a, &v, BinaryKind::Mul).unwrap();
        let want = elementwise_binary(&a, &explicit, BinaryKind::Mul).unwrap();
        assert!(got.bit_eq(&want));

        let bad = Tensor::<f64>::zeros(Shape::new(2, 3, 2, 3));
        assert!(matches!(
            elementwise_binary(&a, &bad, BinaryKind::Add).unwrap_err(),
            Error::Dimension { axis: Axis::Width, .. }
        ));
    }

    #[test]
    fn concat_ordering_and_errors() {
        let a = Tensor::<f64>::full(Shape::new(1, 2, 2, 2), 1.0);
        let b = Tensor::from_fn(Shape::new(1, 3, 2, 2), |_, c, _, _| 10.0 + c as f64);
        assert!(concat_channels(&[&a]).unwrap().bit_eq(&a));
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape().c, 5);
        for k in 0..3 {
            assert_eq!(y.at(0, 2 + k, 1, 0), 10.0 + k as f64);
        }
        let five: Vec<Tensor<f64>> = (0..5).map(|_| Tensor::zeros(Shape::new(1, 256, 1, 1))).collect();
        let refs: Vec<&Tensor<f64>> = five.iter().collect();
        assert_eq!(concat_channels(&refs).unwrap().shape().c, 1280);
        let c = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 2));
        assert!(matches!(concat_channels(&[&a, &c]).unwrap_err(), Error::Dimension { axis: Axis::Height, .. }));
    }

    #[test]
    fn bilinear_half_pixel() {
        let x = t(Shape::new(1, 1, 1, 2), &[0.0, 1.0]);
        let y = bilinear_resize(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
        let c = Tensor::<f64>::full(Shape::new(1, 2, 3, 5), 0.7);
        let up = bilinear_resize(&c, 7, 2).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(bilinear_resize(&c, 3, 5).unwrap().bit_eq(&c));
        assert!(bilinear_resize(&c, 0, 5).is_err());
    }

    #[test]
    fn gap_and_fc() {
        let x = t(Shape::new(1, 1, 2, 2), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(global_avg_pool(&x).data(), &[1.5]);
        let single = t(Shape::new(1, 2, 1, 1), &[1.0, 2.0]);
        assert!(global_avg_pool(&single).bit_eq(&single));

        let w = t(Shape::new(2, 2, 1, 1), &[1.0, 1.0, 0.0, 3.0]);
        let b = t(Shape::vector(2), &[0.0, 1.0]);
        assert_eq!(fully_connected(&single, &w, Some(&b)).unwrap().data(), &[3.0, 7.0]);
        let eye = t(Shape::new(2, 2, 1, 1), &[1.0, 0.0, 0.0, 1.0]);
        assert!(fully_connected(&single, &eye, None).unwrap().bit_eq(&single));
        let zero_w = Tensor::zeros(Shape::new(2, 2, 1, 1));
        let beta = t(Shape::vector(2), &[0.25, 0.25]);
        assert_eq!(fully_connected(&single, &zero_w, Some(&beta)).unwrap().data(), &[0.25, 0.25]);
        let bad = Tensor::<f64>::zeros(Shape::new(2, 3, 1, 1));
        assert!(fully_connected(&single, &bad, None).is_err());
    }

    #[test]
    fn image_utilities() {
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 3), |_, _, y, x| (y * 3 + x) as f64);
        assert_eq!(flip_horizontal(&x).data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert!(flip_horizontal(&flip_horizontal(&x)).bit_eq(&x));
        assert_eq!(crop(&x, 1, 1, 1, 2).unwrap().data(), &[4.0, 5.0]);
        assert!(crop(&x, 1, 1, 2, 2).is_err());
        let p = pad_reflect(&x, 3, 5).unwrap();
        assert_eq!(&p.data()[..5], &[0.0, 1.0, 2.0, 1.0, 0.0]);
        assert_eq!(&p.data()[10..], &[0.0, 1.0, 2.0, 1.0, 0.0]);
        let m = t(Shape::new(1, 1, 2, 2), &[0.0, 1.0, 1.0, 0.0]);
        let up = resize_nearest(&m, 4, 4);
        assert!(up.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(up.at(0, 0, 0, 3), 1.0);
    }
}

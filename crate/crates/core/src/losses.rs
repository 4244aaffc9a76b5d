//! Training losses: binary cross-entropy, Dice, SSIM and the hybrid total.
//!
//! Each loss exists twice: a plain function returning an `f64`, and a graph
//! operator that records the same value together with its analytic
//! gradient with respect to the prediction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Axis, Error, Result};
use crate::tensor::{Element, Graph, Shape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the depth-restoration term.
    pub lambda: f64,
    pub dice_smooth: f64,
    /// Predictions are clamped to `[bce_clamp, 1 - bce_clamp]` before the logs.
    pub bce_clamp: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub dynamic_range: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.3,
            dice_smooth: 1.0,
            bce_clamp: 1e-7,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.bce_clamp > 0.0 && self.bce_clamp < 0.5) {
            return Err(Error::Config(format!("bce_clamp must lie in (0, 0.5), got {}", self.bce_clamp)));
        }
        if self.dice_smooth <= 0.0 || self.ssim_sigma <= 0.0 || self.dynamic_range <= 0.0 {
            return Err(Error::Config("dice_smooth, ssim_sigma and dynamic_range must be positive".into()));
        }
        if self.ssim_window == 0 || self.ssim_window % 2 == 0 {
            return Err(Error::Config(format!("ssim_window must be odd, got {}", self.ssim_window)));
        }
        Ok(())
    }

    fn ssim_constants(&self) -> (f64, f64) {
        let l = self.dynamic_range;
        ((self.ssim_k1 * l).powi(2), (self.ssim_k2 * l).powi(2))
    }
}

pub(crate) fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
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
    Ok(())
}

fn to_f64<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.f64()).collect()
}

fn from_f64<T: Element>(shape: Shape, v: Vec<f64>) -> Tensor<T> {
    Tensor::from_vec(shape, v.into_iter().map(T::of).collect()).expect("shape preserved")
}

fn bce_parts(p: &[f64], g: &[f64], clamp: f64) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &gi) in p.iter().zip(g) {
        let q = pi.clamp(clamp, 1.0 - clamp);
        total -= gi * q.ln() + (1.0 - gi) * (1.0 - q).ln();
        let d = if pi > clamp && pi < 1.0 - clamp {
            (-gi / q + (1.0 - gi) / (1.0 - q)) / n
        } else {
            0.0
        };
        grad.push(d);
    }
    (total / n, grad)
}

/// Mean binary cross-entropy over every element.
pub fn bce<T: Element>(p: &Tensor<T>, g: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    same_shape("bce", p.shape(), g.shape())?;
    Ok(bce_parts(&to_f64(p), &to_f64(g), cfg.bce_clamp).0)
}

fn dice_parts(p: &[f64], g: &[f64], shape: Shape, eps: f64) -> (f64, Vec<f64>) {
    let per = shape.c * shape.plane();
    let n = shape.n as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; p.len()];
    for b in 0..shape.n {
        let (pb, gb) = (&p[b * per..(b + 1) * per], &g[b * per..(b + 1) * per]);
        let inter: f64 = pb.iter().zip(gb).map(|(a, c)| a * c).sum();
        let denom = pb.iter().sum::<f64>() + gb.iter().sum::<f64>() + eps;
        let num = 2.0 * inter + eps;
        total += 1.0 - num / denom;
        for (d, &gi) in grad[b * per..(b + 1) * per].iter_mut().zip(gb) {
            *d = -(2.0 * gi * denom - num) / (denom * denom) / n;
        }
    }
    (total / n, grad)
}

/// `1 - (2|P∩G| + ε) / (|P| + |G| + ε)` per image, averaged over the batch.
pub fn dice<T: Element>(p: &Tensor<T>, g: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    same_shape("dice", p.shape(), g.shape())?;
    Ok(dice_parts(&to_f64(p), &to_f64(g), p.shape(), cfg.dice_smooth).0)
}

/// Separable Gaussian window, cropped about its centre and renormalised
/// along any axis shorter than the nominal size.
#[derive(Debug, Clone)]
struct Window {
    ty: Vec<f64>,
    tx: Vec<f64>,
}

fn gaussian_taps(size: usize, sigma: f64, extent: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let full: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let taps = if extent < size {
        let start = (size - extent) / 2;
        full[start..start + extent].to_vec()
    } else {
        full
    };
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

impl Window {
    fn new(cfg: &LossConfig, h: usize, w: usize) -> Self {
        Window {
            ty: gaussian_taps(cfg.ssim_window, cfg.ssim_sigma, h),
            tx: gaussian_taps(cfg.ssim_window, cfg.ssim_sigma, w),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 1 - self.ty.len(), w + 1 - self.tx.len())
    }

    /// Valid-mode correlation.
    fn filter(&self, src: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.out_hw(h, w);
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                rows[y * ow + x] = self.tx.iter().enumerate().map(|(k, t)| t * src[y * w + x + k]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = self.ty.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
            }
        }
        out
    }

    /// Adjoint of [`Window::filter`].
    fn filter_t(&self, dst: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.out_hw(h, w);
        let mut rows = vec![0.0; h * ow];
        for y in 0..oh {
            for x in 0..ow {
                let d = dst[y * ow + x];
                for (k, t) in self.ty.iter().enumerate() {
                    rows[(y + k) * ow + x] += t * d;
                }
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..ow {
                let d = rows[y * ow + x];
                for (k, t) in self.tx.iter().enumerate() {
                    out[y * w + x + k] += t * d;
                }
            }
        }
        out
    }
}

/// Mean SSIM of one plane and, optionally, its gradient with respect to
/// both inputs.
fn ssim_plane(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    win: &Window,
    (c1, c2): (f64, f64),
    want_grad: bool,
) -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = win.filter(x, h, w);
    let my = win.filter(y, h, w);
    let exx = win.filter(&sq(x, x), h, w);
    let eyy = win.filter(&sq(y, y), h, w);
    let exy = win.filter(&sq(x, y), h, w);
    let m = mx.len();
    let scale = 1.0 / m as f64;

    let mut total = 0.0;
    let (mut g_mx, mut g_my) = (vec![0.0; m], vec![0.0; m]);
    let (mut g_exx, mut g_eyy, mut g_exy) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for i in 0..m {
        let (ux, uy) = (mx[i], my[i]);
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * (exy[i] - ux * uy) + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = (exx[i] - ux * ux) + (eyy[i] - uy * uy) + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let bb = b1 * b2;
            g_mx[i] = scale * ((2.0 * uy * a2 - 2.0 * uy * a1) / bb - s * (2.0 * ux / b1 - 2.0 * ux / b2));
            g_my[i] = scale * ((2.0 * ux * a2 - 2.0 * ux * a1) / bb - s * (2.0 * uy / b1 - 2.0 * uy / b2));
            g_exx[i] = -scale * s / b2;
            g_eyy[i] = -scale * s / b2;
            g_exy[i] = scale * 2.0 * a1 / bb;
        }
    }
    if !want_grad {
        return (total * scale, None);
    }
    let (bmx, bmy) = (win.filter_t(&g_mx, h, w), win.filter_t(&g_my, h, w));
    let (bxx, byy, bxy) = (
        win.filter_t(&g_exx, h, w),
        win.filter_t(&g_eyy, h, w),
        win.filter_t(&g_exy, h, w),
    );
    let dx = (0..h * w).map(|i| bmx[i] + 2.0 * x[i] * bxx[i] + y[i] * bxy[i]).collect();
    let dy = (0..h * w).map(|i| bmy[i] + 2.0 * y[i] * byy[i] + x[i] * bxy[i]).collect();
    (total * scale, Some((dx, dy)))
}

type SsimGrads = Option<(Vec<f64>, Vec<f64>)>;

fn ssim_parts(x: &[f64], y: &[f64], shape: Shape, cfg: &LossConfig, want_grad: bool) -> (f64, SsimGrads) {
    let (h, w) = (shape.h, shape.w);
    let plane = h * w;
    let planes = shape.n * shape.c;
    let win = Window::new(cfg, h, w);
    let consts = cfg.ssim_constants();
    let per: Vec<_> = (0..planes)
        .into_par_iter()
        .map(|p| {
            let r = p * plane..(p + 1) * plane;
            ssim_plane(&x[r.clone()], &y[r], h, w, &win, consts, want_grad)
        })
        .collect();
    let mean = per.iter().map(|(s, _)| s).sum::<f64>() / planes as f64;
    if !want_grad {
        return (mean, None);
    }
    let inv = 1.0 / planes as f64;
    let (mut dx, mut dy) = (Vec::with_capacity(x.len()), Vec::with_capacity(y.len()));
    for (_, g) in per {
        let (gx, gy) = g.expect("gradient requested");
        dx.extend(gx.into_iter().map(|v| v * inv));
        dy.extend(gy.into_iter().map(|v| v * inv));
    }
    (mean, Some((dx, dy)))
}

/// Mean local SSIM over every plane, using a Gaussian window and
/// valid-mode filtering.
pub fn ssim<T: Element>(x: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    same_shape("ssim", x.shape(), y.shape())?;
    Ok(ssim_parts(&to_f64(x), &to_f64(y), x.shape(), cfg, false).0)
}

/// Records mean binary cross-entropy of prediction `p` against target `g`.
pub fn bce_loss<T: Element>(graph: &mut Graph<T>, p: Var, g: Var, cfg: &LossConfig) -> Result<Var> {
    let shape = graph.shape(p);
    same_shape("bce", shape, graph.shape(g))?;
    let (value, grad) = if graph.is_shape_only() {
        (0.0, Vec::new())
    } else {
        bce_parts(&to_f64(graph.value(p)), &to_f64(graph.value(g)), cfg.bce_clamp)
    };
    let grad: Tensor<T> = if grad.is_empty() { Tensor::zeros(shape) } else { from_f64(shape, grad) };
    Ok(graph.custom(
        &[p, g],
        Tensor::scalar(T::of(value)),
        Box::new(move |dy| {
            let s = dy.data()[0];
            vec![Some(grad.map(|v| v * s)), None]
        }),
    ))
}

/// Records the batch-averaged Dice loss.
pub fn dice_loss<T: Element>(graph: &mut Graph<T>, p: Var, g: Var, cfg: &LossConfig) -> Result<Var> {
    let shape = graph.shape(p);
    same_shape("dice", shape, graph.shape(g))?;
    let (value, grad) = if graph.is_shape_only() {
        (0.0, Vec::new())
    } else {
        dice_parts(&to_f64(graph.value(p)), &to_f64(graph.value(g)), shape, cfg.dice_smooth)
    };
    let grad: Tensor<T> = if grad.is_empty() { Tensor::zeros(shape) } else { from_f64(shape, grad) };
    Ok(graph.custom(
        &[p, g],
        Tensor::scalar(T::of(value)),
        Box::new(move |dy| {
            let s = dy.data()[0];
            vec![Some(grad.map(|v| v * s)), None]
        }),
    ))
}

/// Records mean SSIM between `x` and `y`, differentiable in both.
pub fn ssim_index<T: Element>(graph: &mut Graph<T>, x: Var, y: Var, cfg: &LossConfig) -> Result<Var> {
    let shape = graph.shape(x);
    same_shape("ssim", shape, graph.shape(y))?;
    if graph.is_shape_only() {
        let zero = Tensor::zeros(shape);
        return Ok(graph.custom(
            &[x, y],
            Tensor::scalar(T::zero()),
            Box::new(move |_| vec![Some(zero.clone()), Some(zero.clone())]),
        ));
    }
    let (value, grads) = ssim_parts(&to_f64(graph.value(x)), &to_f64(graph.value(y)), shape, cfg, true);
    let (gx, gy) = grads.expect("gradient requested");
    let (gx, gy): (Tensor<T>, Tensor<T>) = (from_f64(shape, gx), from_f64(shape, gy));
    Ok(graph.custom(
        &[x, y],
        Tensor::scalar(T::of(value)),
        Box::new(move |dy| {
            let s = dy.data()[0];
            vec![Some(gx.map(|v| v * s)), Some(gy.map(|v| v * s))]
        }),
    ))
}

/// `1 - SSIM(restored, target)`.
pub fn idr_loss<T: Element>(graph: &mut Graph<T>, restored: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    let s = ssim_index(graph, restored, target, cfg)?;
    Ok(graph.affine(s, -1.0, 1.0))
}

/// Per-term values of the hybrid loss, for logging.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `bce + dice` for each side output, finest first.
    pub side: Vec<f64>,
    pub saliency: f64,
    pub idr: Option<f64>,
}

/// Sum over side outputs of `bce + dice`, plus `lambda * idr_loss` when a
/// restored depth map is supplied.
pub fn total_loss<T: Element>(
    graph: &mut Graph<T>,
    sides: &[Var],
    gt: Var,
    depth: Option<(Var, Var)>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if sides.is_empty() {
        return Err(Error::State("total_loss needs at least one side output".into()));
    }
    if depth.is_none() && cfg.lambda > 0.0 {
        return Err(Error::State(format!(
            "restored depth is missing but lambda is {}",
            cfg.lambda
        )));
    }
    let mut breakdown = LossBreakdown::default();
    let mut acc: Option<Var> = None;
    for &p in sides {
        let b = bce_loss(graph, p, gt, cfg)?;
        let d = dice_loss(graph, p, gt, cfg)?;
        let term = graph.add(b, d)?;
        breakdown.side.push(graph.value(term).data()[0].f64());
        acc = Some(match acc {
            Some(a) => graph.add(a, term)?,
            None => term,
        });
    }
    let mut total = acc.expect("at least one side output");
    breakdown.saliency = graph.value(total).data()[0].f64();
    if let Some((restored, target)) = depth {
        let idr = idr_loss(graph, restored, target, cfg)?;
        breakdown.idr = Some(graph.value(idr).data()[0].f64());
        let weighted = graph.affine(idr, cfg.lambda, 0.0);
        total = graph.add(total, weighted)?;
    }
    breakdown.total = graph.value(total).data()[0].f64();
    Ok((total, breakdown))
}

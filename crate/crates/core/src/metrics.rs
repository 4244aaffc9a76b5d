//! Saliency evaluation: precision/recall over 255 thresholds, maximum
//! F-measure, MAE, PSNR and SSIM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, same_shape, LossConfig};
use crate::tensor::{Element, Tensor};

pub const NUM_THRESHOLDS: usize = 255;

/// How the configured F-measure coefficient is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaConvention {
    /// The coefficient is β² directly.
    #[default]
    Squared,
    /// The coefficient is β and is squared before use.
    Plain,
}

impl BetaConvention {
    pub fn beta_sq(self, coefficient: f64) -> f64 {
        match self {
            BetaConvention::Squared => coefficient,
            BetaConvention::Plain => coefficient * coefficient,
        }
    }
}

/// Threshold `k / 256` for bin `k - 1`.
pub fn threshold(bin: usize) -> f64 {
    (bin + 1) as f64 / 256.0
}

/// Per-bin precision and recall averaged over images.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionRecallCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub num_images: usize,
}

impl PrecisionRecallCurve {
    pub fn thresholds(&self) -> impl Iterator<Item = f64> {
        (0..NUM_THRESHOLDS).map(threshold)
    }
}

/// Precision and recall of one image at every threshold.
fn image_pr(p: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    // hist[k]: pixels whose highest passed threshold index is k (0 = none).
    let mut fg = [0u64; NUM_THRESHOLDS + 1];
    let mut bg = [0u64; NUM_THRESHOLDS + 1];
    for (&pv, &gv) in p.iter().zip(g) {
        let k = ((pv.clamp(0.0, 1.0) * 256.0).floor() as usize).min(NUM_THRESHOLDS);
        if gv >= 0.5 {
            fg[k] += 1;
        } else {
            bg[k] += 1;
        }
    }
    let total_fg: u64 = fg.iter().sum();
    let mut precision = vec![0.0; NUM_THRESHOLDS];
    let mut recall = vec![0.0; NUM_THRESHOLDS];
    let (mut tp, mut fp) = (0u64, 0u64);
    for k in (1..=NUM_THRESHOLDS).rev() {
        tp += fg[k];
        fp += bg[k];
        precision[k - 1] = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        recall[k - 1] = if total_fg > 0 { tp as f64 / total_fg as f64 } else { 1.0 };
    }
    (precision, recall)
}

/// Binarises each prediction at thresholds `1/256 ..= 255/256` (`P >= t`)
/// and averages per-image precision and recall.
pub fn f_measure_curve<T: Element>(preds: &[Tensor<T>], gts: &[Tensor<T>]) -> Result<PrecisionRecallCurve> {
    if preds.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Dataset(format!(
            "{} predictions but {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    for (p, g) in preds.iter().zip(gts) {
        same_shape("f_measure_curve", p.shape(), g.shape())?;
    }
    let per: Vec<_> = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| {
            let pv: Vec<f64> = p.data().iter().map(|v| v.f64()).collect();
            let gv: Vec<f64> = g.data().iter().map(|v| v.f64()).collect();
            image_pr(&pv, &gv)
        })
        .collect();
    let n = per.len() as f64;
    let mut precision = vec![0.0; NUM_THRESHOLDS];
    let mut recall = vec![0.0; NUM_THRESHOLDS];
    for (p, r) in &per {
        for k in 0..NUM_THRESHOLDS {
            precision[k] += p[k];
            recall[k] += r[k];
        }
    }
    precision.iter_mut().chain(recall.iter_mut()).for_each(|v| *v /= n);
    Ok(PrecisionRecallCurve {
        precision,
        recall,
        num_images: per.len(),
    })
}

pub fn f_beta(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom > 0.0 {
        (1.0 + beta_sq) * precision * recall / denom
    } else {
        0.0
    }
}

pub fn f_beta_max(curve: &PrecisionRecallCurve, beta_sq: f64) -> f64 {
    curve
        .precision
        .iter()
        .zip(&curve.recall)
        .map(|(&p, &r)| f_beta(p, r, beta_sq))
        .fold(0.0, f64::max)
}

/// Mean absolute error of one image.
pub fn mae_image<T: Element>(p: &Tensor<T>, g: &Tensor<T>) -> Result<f64> {
    same_shape("mae", p.shape(), g.shape())?;
    let s: f64 = p.data().iter().zip(g.data()).map(|(a, b)| (a.f64() - b.f64()).abs()).sum();
    Ok(s / p.len() as f64)
}

/// Per-image MAE averaged over the dataset.
pub fn mae<T: Element>(preds: &[Tensor<T>], gts: &[Tensor<T>]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Dataset(format!(
            "mae needs matching nonempty sets, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    let per = preds.iter().zip(gts).map(|(p, g)| mae_image(p, g)).collect::<Result<Vec<_>>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Element>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape("psnr", x.shape(), y.shape())?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

pub fn ssim<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    losses::ssim(x, y, &LossConfig::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub num_images: usize,
    pub f_beta_max: f64,
    pub mae: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

impl MetricsReport {
    /// Saliency metrics for one dataset.
    pub fn evaluate<T: Element>(dataset: &str, preds: &[Tensor<T>], gts: &[Tensor<T>], beta_sq: f64) -> Result<Self> {
        let curve = f_measure_curve(preds, gts)?;
        Ok(MetricsReport {
            dataset: dataset.to_string(),
            num_images: curve.num_images,
            f_beta_max: f_beta_max(&curve, beta_sq),
            mae: mae(preds, gts)?,
            psnr: None,
            ssim: None,
            curve: curve
                .thresholds()
                .zip(curve.precision.iter().zip(&curve.recall))
                .map(|(t, (&precision, &recall))| CurvePoint { t, precision, recall })
                .collect(),
        })
    }

    /// Adds dataset-mean PSNR and SSIM between restored and reference maps.
    pub fn with_restoration<T: Element>(mut self, restored: &[Tensor<T>], reference: &[Tensor<T>]) -> Result<Self> {
        if restored.is_empty() || restored.len() != reference.len() {
            return Err(Error::Dataset("restoration sets must be nonempty and matched".into()));
        }
        let n = restored.len() as f64;
        let mut p = 0.0;
        let mut s = 0.0;
        for (r, g) in restored.iter().zip(reference) {
            p += psnr(r, g, 1.0)?;
            s += ssim(r, g)?;
        }
        self.psnr = Some(p / n);
        self.ssim = Some(s / n);
        Ok(self)
    }
}

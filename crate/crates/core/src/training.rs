//! Optimizer, learning-rate schedule, augmentation, batching and the
//! training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::network::{MobileSal, MAX_STRIDE};
use crate::params::ParamStore;
use crate::tensor::graph::BnConfig;
use crate::tensor::ops;
use crate::tensor::{Element, Graph, Mode, Tensor};

/// Per-channel mean and standard deviation used to normalise RGB input.
pub const RGB_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const RGB_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub poly_power: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub scales: Vec<usize>,
    pub lambda: f64,
    pub seed: u64,
    pub augment: bool,
    /// Smallest crop area relative to the image.
    pub min_crop_area: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 60,
            batch: 10,
            poly_power: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            scales: vec![256, 288, 320],
            lambda: 0.3,
            seed: 0,
            augment: true,
            min_crop_area: 0.7,
        }
    }
}

impl TrainConfig {
    /// Overfit preset for eight 64×64 synthetic samples.
    pub fn toy() -> Self {
        TrainConfig {
            lr: 2e-3,
            epochs: 300,
            batch: 4,
            weight_decay: 0.0,
            scales: vec![64],
            augment: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.poly_power, self.adam_eps];
        if positive.iter().any(|v| !(*v > 0.0)) || self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("lr, poly_power, adam_eps, epochs and batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("weight_decay and lambda must be non-negative".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| *s == 0 || s % MAX_STRIDE != 0) {
            return Err(Error::Config(format!(
                "scales must be nonempty multiples of {MAX_STRIDE}, got {:?}",
                self.scales
            )));
        }
        if !(self.min_crop_area > 0.0 && self.min_crop_area <= 1.0) {
            return Err(Error::Config("min_crop_area must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            ..Default::default()
        }
    }
}

/// `lr · (1 − epoch / epochs)^power`.
pub fn poly_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!("epoch {epoch} out of range for {} epochs", cfg.epochs)));
    }
    Ok(cfg.lr * (1.0 - epoch as f64 / cfg.epochs as f64).powf(cfg.poly_power))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub t: u64,
}

impl<T: Element> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }
}

/// One Adam step with bias correction. Weight decay is decoupled and
/// applied first, skipping batch-norm parameters. Gradients are cleared.
pub fn adam_step<T: Element>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if let Some((name, _)) = store.iter().find(|(_, p)| p.kind.trainable() && p.grad.is_none()) {
        return Err(Error::State(format!("parameter `{name}` has no gradient")));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let c1 = T::of(1.0 - cfg.adam_beta1.powi(t));
    let c2 = T::of(1.0 - cfg.adam_beta2.powi(t));
    let (lr_t, eps, decay) = (T::of(lr), T::of(cfg.adam_eps), T::of(lr * cfg.weight_decay));
    for (name, p) in store.iter_mut() {
        if !p.kind.trainable() {
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        let len = p.value.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); len]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); len]);
        let decays = p.kind.decays() && cfg.weight_decay > 0.0;
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            if decays {
                *w -= decay * *w;
            }
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    store.clear_grads();
    Ok(())
}

/// Axis-aligned crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

/// Flips and crops all modalities identically, then resizes back to the
/// original size (bilinear for images, nearest for the mask).
pub fn augment_with(sample: &Sample, flip: bool, crop: CropBox) -> Result<Sample> {
    let (h, w) = sample.hw();
    let apply = |t: &Tensor, nearest: bool| -> Result<Tensor> {
        let t = if flip { ops::flip_horizontal(t) } else { t.clone() };
        if (crop.h, crop.w) == (h, w) {
            return Ok(t);
        }
        let c = ops::crop(&t, crop.top, crop.left, crop.h, crop.w)?;
        if nearest {
            Ok(ops::resize_nearest(&c, h, w))
        } else {
            ops::bilinear_resize(&c, h, w)
        }
    };
    Sample::new(
        sample.id.clone(),
        apply(&sample.rgb, false)?,
        apply(&sample.depth, false)?,
        apply(&sample.gt, true)?,
    )
}

/// Random horizontal flip (p = 0.5) and one random crop whose area ratio is
/// uniform in `[min_area, 1]` with the original aspect ratio.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R, min_area: f64) -> Result<Sample> {
    let (h, w) = sample.hw();
    let flip = rng.gen_bool(0.5);
    let area = if min_area < 1.0 { rng.gen_range(min_area..=1.0) } else { 1.0 };
    let side = area.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let top = rng.gen_range(0..=h - ch);
    let left = rng.gen_range(0..=w - cw);
    augment_with(sample, flip, CropBox { top, left, h: ch, w: cw })
}

/// Network-ready tensors for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub gt: Tensor,
    pub scale: Option<usize>,
}

pub fn normalize_rgb(rgb: &Tensor) -> Tensor {
    let s = rgb.shape();
    Tensor::from_fn(s, |n, c, y, x| (rgb.at(n, c, y, x) - RGB_MEAN[c % 3]) / RGB_STD[c % 3])
}

/// Per-image min-max scaling to [0, 1]; constant maps become 0.
pub fn normalize_depth(depth: &Tensor) -> Tensor {
    let (lo, hi) = depth.min_max();
    let range = hi - lo;
    if range > 0.0 {
        depth.map(|v| (v - lo) / range)
    } else {
        depth.map(|_| 0.0)
    }
}

/// Resizes (when `size` is given) and normalises one sample.
pub fn prepare(sample: &Sample, size: Option<usize>) -> Result<(Tensor, Tensor, Tensor)> {
    let (rgb, depth, gt) = match size {
        Some(s) if sample.hw() != (s, s) => (
            ops::bilinear_resize(&sample.rgb, s, s)?,
            ops::bilinear_resize(&sample.depth, s, s)?,
            ops::resize_nearest(&sample.gt, s, s),
        ),
        _ => (sample.rgb.clone(), sample.depth.clone(), sample.gt.clone()),
    };
    Ok((normalize_rgb(&rgb), normalize_depth(&depth), gt))
}

/// Draws one scale uniformly and stacks the resized, normalised samples.
pub fn multi_scale_batch<R: Rng>(samples: &[Sample], rng: &mut R, scales: &[usize]) -> Result<Batch> {
    if samples.is_empty() || scales.is_empty() {
        return Err(Error::Dataset("empty batch or scale list".into()));
    }
    let scale = *scales.choose(rng).expect("nonempty");
    let mut rgb = Vec::with_capacity(samples.len());
    let mut depth = Vec::with_capacity(samples.len());
    let mut gt = Vec::with_capacity(samples.len());
    for s in samples {
        let (r, d, g) = prepare(s, Some(scale))?;
        rgb.push(r);
        depth.push(d);
        gt.push(g);
    }
    Ok(Batch {
        rgb: Tensor::stack_batch(&rgb)?,
        depth: Tensor::stack_batch(&depth)?,
        gt: Tensor::stack_batch(&gt)?,
        scale: Some(scale),
    })
}

/// Smallest multiple of 32 not below `v`.
pub fn pad_to_stride(v: usize) -> usize {
    v.div_ceil(MAX_STRIDE) * MAX_STRIDE
}

/// Eval-mode `P1` at the sample's own size: the input is reflection-padded
/// to a multiple of 32 and the prediction cropped back.
pub fn predict(net: &MobileSal, store: &ParamStore<f32>, rgb: &Tensor, depth: &Tensor) -> Result<Tensor> {
    let s = rgb.shape();
    let (ph, pw) = (pad_to_stride(s.h), pad_to_stride(s.w));
    let rgb = ops::pad_reflect(&normalize_rgb(rgb), ph, pw)?;
    let depth = ops::pad_reflect(&normalize_depth(depth), ph, pw)?;
    let mut g = Graph::new(store, Mode::Eval);
    let (r, d) = (g.input(rgb), g.input(depth));
    let out = net.forward(&mut g, r, d)?;
    ops::crop(g.value(out.sides[0]), 0, 0, s.h, s.w)
}

/// One line of the loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_sal: f64,
    pub loss_idr: f64,
}

/// Mutable training state: parameters, optimizer moments and the RNG.
pub struct Trainer<'n> {
    pub net: &'n MobileSal,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub cfg: TrainConfig,
    pub bn: BnConfig,
    rng: ChaCha8Rng,
}

impl<'n> Trainer<'n> {
    pub fn new(net: &'n MobileSal, store: ParamStore<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
        Ok(Trainer {
            net,
            store,
            adam: AdamState::default(),
            cfg,
            bn: BnConfig::default(),
            rng,
        })
    }

    /// Forward, loss, backward and one optimizer step on a prepared batch.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
        let loss_cfg = self.cfg.loss_config();
        let (grads, updates, breakdown) = {
            let mut g = Graph::new(&self.store, Mode::Train).with_bn_config(self.bn);
            let rgb = g.input(batch.rgb.clone());
            let depth = g.input(batch.depth.clone());
            let gt = g.input(batch.gt.clone());
            let out = self.net.forward(&mut g, rgb, depth)?;
            let restored = out.depth.ok_or_else(|| Error::State("train-mode forward produced no depth".into()))?;
            let (loss, breakdown) = total_loss(&mut g, &out.sides, gt, Some((restored, depth)), &loss_cfg)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numeric(format!("loss is {}", breakdown.total)));
            }
            let grads = g.backward(loss)?.into_params();
            (grads, g.running_updates().to_vec(), breakdown)
        };
        self.store.set_grads(grads)?;
        adam_step(&mut self.store, &mut self.adam, lr, &self.cfg)?;
        self.store.apply_running_updates(&updates, self.bn.momentum)?;
        Ok(breakdown)
    }

    /// One pass over `data` in a shuffled order.
    pub fn epoch(&mut self, data: &[Sample], epoch: usize) -> Result<EpochRecord> {
        let lr = poly_lr(epoch, &self.cfg)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut sal, mut idr) = (0.0, 0.0, 0.0);
        let mut batches = 0;
        for (bi, chunk) in order.chunks(self.cfg.batch).enumerate() {
            let mut samples = Vec::with_capacity(chunk.len());
            for &i in chunk {
                samples.push(if self.cfg.augment {
                    augment(&data[i], &mut self.rng, self.cfg.min_crop_area)?
                } else {
                    data[i].clone()
                });
            }
            let batch = multi_scale_batch(&samples, &mut self.rng, &self.cfg.scales)?;
            let b = self.step(&batch, lr).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, batch {bi}: {msg}")),
                other => other,
            })?;
            total += b.total;
            sal += b.saliency;
            idr += b.idr.unwrap_or(0.0);
            batches += 1;
        }
        let n = batches as f64;
        Ok(EpochRecord {
            epoch,
            lr,
            loss_total: total / n,
            loss_sal: sal / n,
            loss_idr: idr / n,
        })
    }
}

/// Runs every epoch, calling `on_epoch` after each one.
pub fn train_loop(
    net: &MobileSal,
    store: ParamStore<f32>,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ParamStore<f32>) -> Result<()>,
) -> Result<(ParamStore<f32>, Vec<EpochRecord>)> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut trainer = Trainer::new(net, store, cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let rec = trainer.epoch(data, epoch)?;
        on_epoch(&rec, &trainer.store)?;
        history.push(rec);
    }
    Ok((trainer.store, history))
}

/// Eval-mode predictions for every sample at its own resolution.
pub fn predict_all(net: &MobileSal, store: &ParamStore<f32>, data: &[Sample]) -> Result<Vec<Tensor>> {
    data.iter().map(|s| predict(net, store, &s.rgb, &s.depth)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Shape;

    #[test]
    fn poly_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(poly_lr(0, &cfg).unwrap(), 1e-4);
        assert!(poly_lr(60, &cfg).is_err());
        assert!((poly_lr(59, &cfg).unwrap() - 1e-4 * (1.0f64 / 60.0).powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::ones(Shape::vector(2)), ParamKind::Weight).unwrap();
        let err = adam_step(&mut s, &mut AdamState::default(), 0.1, &TrainConfig::default());
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn bn_params_skip_decay() {
        let mut s = ParamStore::<f64>::new();
        s.insert("bn.weight", Tensor::ones(Shape::vector(1)), ParamKind::BnWeight).unwrap();
        s.insert("w", Tensor::ones(Shape::vector(1)), ParamKind::Weight).unwrap();
        let zero = [("bn.weight", 1), ("w", 1)]
            .into_iter()
            .map(|(n, c)| (n.to_string(), Tensor::zeros(Shape::vector(c))))
            .collect();
        s.set_grads(zero).unwrap();
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        adam_step(&mut s, &mut AdamState::default(), 0.1, &cfg).unwrap();
        assert_eq!(s.get("bn.weight").unwrap().value.data()[0], 1.0);
        assert!((s.get("w").unwrap().value.data()[0] - 0.95).abs() < 1e-15);
        assert!(s.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn constant_depth_normalises_to_zero() {
        let d = Tensor::full(Shape::new(1, 1, 2, 2), 0.4f32);
        assert_eq!(normalize_depth(&d).sum(), 0.0);
    }
}

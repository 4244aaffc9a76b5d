//! Named, insertion-ordered parameter storage with gradient slots.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::graph::RunningUpdate;
use crate::tensor::{ConvSpec, Element, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnWeight,
    BnBias,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Learnable by the optimizer (running statistics are buffers).
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Subject to weight decay. Batch-norm affine parameters are exempt.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub grad: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element = f32> {
    entries: Vec<(String, Param<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((
            name.to_string(),
            Param {
                value,
                kind,
                grad: None,
            },
        ));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total element count of trainable parameters whose name passes `filter`.
    pub fn count_trainable(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(n, p)| p.kind.trainable() && filter(n))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// A copy without the entries whose names start with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> Self {
        let mut out = ParamStore::new();
        for (n, p) in self.iter() {
            if !n.starts_with(prefix) {
                out.insert(n, p.value.clone(), p.kind).expect("names are unique");
            }
        }
        out
    }

    pub fn set_grads(&mut self, grads: BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(&name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "set_grads",
                    format!("gradient for `{name}` has shape {}, parameter {}", g.shape(), p.value.shape()),
                ));
            }
            p.grad = Some(g);
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for (_, p) in self.iter_mut() {
            p.grad = None;
        }
    }

    /// Exponential moving average of running statistics:
    /// `r <- (1 - momentum) * r + momentum * batch`.
    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate<T>], momentum: f64) -> Result<()> {
        let m = T::of(momentum);
        let keep = T::one() - m;
        for u in updates {
            for (suffix, stat) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let name = format!("{}.{suffix}", u.prefix);
                let p = self.get_mut(&name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
                for (r, &b) in p.value.data_mut().iter_mut().zip(stat.iter()) {
                    *r = keep * *r + m * b;
                }
            }
        }
        Ok(())
    }

    /// Converts every tensor to another precision (gradients are dropped).
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, p) in self.iter() {
            out.insert(n, p.value.cast(), p.kind).expect("names are unique");
        }
        out
    }

    /// Bitwise equality of names, order, kinds and values.
    pub fn bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, a), (nb, b))| na == nb && a.kind == b.kind && a.value.bit_eq(&b.value))
    }
}

/// Helpers that register freshly initialized parameters.
pub struct Initializer<'a, R: Rng, T: Element> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<R: Rng, T: Element> Initializer<'_, R, T> {
    /// Zero-mean normal with variance `2 / fan_in`.
    pub fn he_normal(&mut self, name: &str, shape: Shape, fan_in: usize) -> Result<()> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..shape.numel()).map(|_| T::of(normal.sample(self.rng))).collect();
        self.store.insert(name, Tensor::from_vec(shape, data)?, ParamKind::Weight)
    }

    pub fn conv(&mut self, prefix: &str, spec: &ConvSpec) -> Result<()> {
        let ws = spec.weight_shape();
        self.he_normal(&format!("{prefix}.weight"), ws, ws.c * ws.h * ws.w)?;
        if spec.has_bias {
            self.store.insert(
                &format!("{prefix}.bias"),
                Tensor::zeros(Shape::vector(spec.out_channels)),
                ParamKind::Bias,
            )?;
        }
        Ok(())
    }

    pub fn zero_conv(&mut self, prefix: &str, spec: &ConvSpec) -> Result<()> {
        self.store.insert(
            &format!("{prefix}.weight"),
            Tensor::zeros(spec.weight_shape()),
            ParamKind::Weight,
        )?;
        if spec.has_bias {
            self.store.insert(
                &format!("{prefix}.bias"),
                Tensor::zeros(Shape::vector(spec.out_channels)),
                ParamKind::Bias,
            )?;
        }
        Ok(())
    }

    pub fn linear(&mut self, prefix: &str, inputs: usize, outputs: usize) -> Result<()> {
        self.he_normal(&format!("{prefix}.weight"), Shape::new(outputs, inputs, 1, 1), inputs)?;
        self.store.insert(
            &format!("{prefix}.bias"),
            Tensor::zeros(Shape::vector(outputs)),
            ParamKind::Bias,
        )
    }

    pub fn batch_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        let v = Shape::vector(channels);
        self.store.insert(&format!("{prefix}.weight"), Tensor::ones(v), ParamKind::BnWeight)?;
        self.store.insert(&format!("{prefix}.bias"), Tensor::zeros(v), ParamKind::BnBias)?;
        self.store.insert(&format!("{prefix}.running_mean"), Tensor::zeros(v), ParamKind::RunningMean)?;
        self.store.insert(&format!("{prefix}.running_var"), Tensor::ones(v), ParamKind::RunningVar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected_and_order_stable() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b", Tensor::zeros(Shape::vector(1)), ParamKind::Bias).unwrap();
        s.insert("a", Tensor::zeros(Shape::vector(2)), ParamKind::Weight).unwrap();
        assert!(s.insert("a", Tensor::zeros(Shape::vector(2)), ParamKind::Weight).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), ["b", "a"]);
    }

    #[test]
    fn pointwise_320_to_1_with_bias_is_321_params() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Initializer { store: &mut store, rng: &mut rng };
        init.conv("side", &ConvSpec::pointwise(320, 1).with_bias(true)).unwrap();
        assert_eq!(store.count_trainable(|_| true), 321);
    }

    #[test]
    fn he_normal_variance() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Initializer { store: &mut store, rng: &mut rng };
        init.he_normal("w", Shape::new(200, 50, 1, 1), 50).unwrap();
        let w = &store.get("w").unwrap().value;
        let mean = w.mean();
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 0.04).abs() < 0.003, "variance {var}");
    }

    #[test]
    fn running_stats_moving_average() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Initializer { store: &mut store, rng: &mut rng }.batch_norm("bn", 2).unwrap();
        let upd = RunningUpdate {
            prefix: "bn".into(),
            mean: vec![1.0, 2.0],
            var: vec![3.0, 5.0],
        };
        store.apply_running_updates(&[upd], 0.1).unwrap();
        let m = store.get("bn.running_mean").unwrap().value.data().to_vec();
        let v = store.get("bn.running_var").unwrap().value.data().to_vec();
        assert!((m[0] - 0.1).abs() < 1e-12 && (m[1] - 0.2).abs() < 1e-12);
        assert!((v[0] - 1.2).abs() < 1e-12 && (v[1] - 1.4).abs() < 1e-12);
        assert_eq!(store.count_trainable(|_| true), 4);
    }
}

//! Finite-difference suites for every parameterised block, every loss and
//! the assembled network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{ChannelAttention, Cmf, Cpr, IdrHead, Irb};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::network::{MobileSal, MobileSalConfig};
use crate::params::{Initializer, ParamKind, ParamStore};
use crate::tensor::gradcheck::{grad_check, GradCheckConfig, GradCheckReport, KinkPolicy};
use crate::tensor::{Element, Graph, Mode, Shape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckTarget {
    Irb,
    Attention,
    Cmf,
    Cpr,
    Idr,
    Bce,
    Dice,
    Ssim,
    Total,
    Network,
}

impl CheckTarget {
    pub fn name(self) -> &'static str {
        match self {
            CheckTarget::Irb => "irb",
            CheckTarget::Attention => "attention",
            CheckTarget::Cmf => "cmf",
            CheckTarget::Cpr => "cpr",
            CheckTarget::Idr => "idr",
            CheckTarget::Bce => "bce",
            CheckTarget::Dice => "dice",
            CheckTarget::Ssim => "ssim",
            CheckTarget::Total => "total",
            CheckTarget::Network => "network",
        }
    }

    /// Targets selected by a `--block` value.
    pub fn group(name: &str) -> Result<Vec<CheckTarget>> {
        use CheckTarget::*;
        Ok(match name {
            "all" => vec![Irb, Attention, Cmf, Cpr, Idr, Bce, Dice, Ssim, Total],
            "irb" => vec![Irb],
            "attention" => vec![Attention],
            "cmf" => vec![Cmf],
            "cpr" => vec![Cpr],
            "idr" => vec![Idr],
            "losses" => vec![Bce, Dice, Ssim, Total],
            "bce" => vec![Bce],
            "dice" => vec![Dice],
            "ssim" => vec![Ssim],
            "network" => vec![Network],
            other => return Err(Error::Config(format!("unknown gradient-check block `{other}`"))),
        })
    }
}

struct Fixture<T: Element> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Element> Fixture<T> {
    fn new(seed: u64) -> Self {
        Fixture {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn init(&mut self, f: impl FnOnce(&mut Initializer<ChaCha8Rng, T>) -> Result<()>) -> Result<()> {
        f(&mut Initializer {
            store: &mut self.store,
            rng: &mut self.rng,
        })
    }

    fn random(&mut self, shape: Shape, lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_, _, _, _| T::of(self.rng.gen_range(lo..hi)))
    }

    /// Registers a random tensor as a differentiable input.
    fn input(&mut self, name: &str, shape: Shape, lo: f64, hi: f64) -> Result<()> {
        let t = self.random(shape, lo, hi);
        self.store.insert(name, t, ParamKind::Weight)
    }

    /// Moves batch-norm affine parameters away from the identity.
    fn jitter_bn(&mut self) {
        let rng = &mut self.rng;
        for (_, p) in self.store.iter_mut() {
            let (lo, hi) = match p.kind {
                ParamKind::BnWeight => (0.5, 1.5),
                ParamKind::BnBias => (-0.5, 0.5),
                _ => continue,
            };
            for v in p.value.data_mut() {
                *v = T::of(rng.gen_range(lo..hi));
            }
        }
    }
}

/// `mean(y ⊗ r)` for a fixed random `r`, so every output element matters
/// while the objective stays of order one.
fn project<T: Element>(g: &mut Graph<T>, y: Var, r: &Tensor<T>) -> Result<Var> {
    let r = g.input(r.clone());
    let p = g.mul(y, r)?;
    let n = g.value(p).len() as f64;
    let s = g.sum(p);
    Ok(g.affine(s, 1.0 / n, 0.0))
}

/// Input side of the end-to-end check, the smallest the stride-32 encoder
/// accepts.
pub const NET_HW: usize = 32;

/// Settings for the end-to-end check. Batch statistics over a handful of
/// elements pack ReLU kinks densely into parameter space, so differences
/// start at 1e-6 and shrink around kinks.
pub fn end_to_end_config(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        epsilon: 1e-6,
        tolerance: 1e-3,
        abs_floor: 1e-3,
        coords_per_param: 2,
        seed,
        mode: Mode::Train,
        kinks: Some(KinkPolicy {
            smooth_tolerance: 1e-3,
            min_epsilon: 1e-8,
            max_non_smooth: 0.1,
        }),
    }
}

pub fn run_check<T: Element>(target: CheckTarget, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut fx = Fixture::<T>::new(cfg.seed ^ 0x6c0f);
    let all = |_: &str| true;
    match target {
        CheckTarget::Irb => {
            let a = Irb::new("irb_a", 3, 5, 4, 2);
            let b = Irb::new("irb_b", 5, 5, 4, 1);
            fx.init(|i| a.init(i))?;
            fx.init(|i| b.init(i))?;
            fx.jitter_bn();
            fx.input("x", Shape::new(2, 3, 6, 6), -1.0, 1.0)?;
            let r = fx.random(Shape::new(2, 5, 3, 3), -1.0, 1.0);
            let build = |g: &mut Graph<T>| {
                let x = g.param("x")?;
                let y = a.forward(g, x)?;
                let y = b.forward(g, y)?;
                project(g, y, &r)
            };
            grad_check(&fx.store, build, all, cfg)
        }
        CheckTarget::Attention => {
            let att = ChannelAttention::new("att", 4);
            fx.init(|i| att.init(i))?;
            fx.input("x", Shape::new(2, 4, 3, 3), -1.0, 1.0)?;
            let r = fx.random(Shape::new(2, 4, 1, 1), -1.0, 1.0);
            let build = |g: &mut Graph<T>| {
                let x = g.param("x")?;
                let v = att.forward(g, x)?;
                project(g, v, &r)
            };
            grad_check(&fx.store, build, all, cfg)
        }
        CheckTarget::Cmf => {
            let cmf = Cmf::new("cmf", 4, 4);
            fx.init(|i| cmf.init(i))?;
            fx.jitter_bn();
            fx.input("c5", Shape::new(2, 4, 3, 3), -1.0, 1.0)?;
            fx.input("d5", Shape::new(2, 4, 3, 3), -1.0, 1.0)?;
            let r = fx.random(Shape::new(2, 4, 3, 3), -1.0, 1.0);
            let build = |g: &mut Graph<T>| {
                let (c, d) = (g.param("c5")?, g.param("d5")?);
                let y = cmf.forward(g, c, d)?;
                project(g, y, &r)
            };
            grad_check(&fx.store, build, all, cfg)
        }
        CheckTarget::Cpr => {
            let cpr = Cpr::new("cpr", 8, 4, [1, 2, 3]);
            fx.init(|i| cpr.init(i))?;
            fx.jitter_bn();
            fx.input("x", Shape::new(1, 8, 6, 6), -1.0, 1.0)?;
            let r = fx.random(Shape::new(1, 8, 6, 6), -1.0, 1.0);
            let build = |g: &mut Graph<T>| {
                let x = g.param("x")?;
                let y = cpr.forward(g, x)?;
                project(g, y, &r)
            };
            grad_check(&fx.store, build, all, cfg)
        }
        CheckTarget::Idr => {
            let chans = [2, 3, 4, 5, 6];
            let head = IdrHead::new("idr", chans, 4, 6);
            fx.init(|i| head.init(i))?;
            fx.jitter_bn();
            for (i, &c) in chans.iter().enumerate() {
                let s = 16 >> i;
                fx.input(&format!("f{}", i + 1), Shape::new(2, c, s, s), -1.0, 1.0)?;
            }
            let r = fx.random(Shape::new(2, 1, 32, 32), -1.0, 1.0);
            let build = |g: &mut Graph<T>| {
                let mut fs = Vec::with_capacity(5);
                for i in 0..5 {
                    fs.push(g.param(&format!("f{}", i + 1))?);
                }
                let y = head.forward(g, fs.try_into().expect("five levels"), (32, 32))?;
                project(g, y, &r)
            };
            grad_check(&fx.store, build, all, cfg)
        }
        CheckTarget::Bce | CheckTarget::Dice => {
            let shape = Shape::new(2, 1, 5, 5);
            fx.input("p", shape, 0.05, 0.95)?;
            let gt = Tensor::from_fn(shape, |n, _, y, x| T::of(((x * 3 + y + n) % 4 < 2) as u8 as f64));
            let lc = LossConfig::default();
            let build = |g: &mut Graph<T>| {
                let p = g.param("p")?;
                let gv = g.input(gt.clone());
                if target == CheckTarget::Bce {
                    losses::bce_loss(g, p, gv, &lc)
                } else {
                    losses::dice_loss(g, p, gv, &lc)
                }
            };
            grad_check(&fx.store, build, all, cfg)
        }
        CheckTarget::Ssim => {
            // One map larger than the window and one smaller, so both the
            // full and the cropped window are exercised.
            fx.input("x_large", Shape::new(1, 1, 14, 13), 0.0, 1.0)?;
            fx.input("y_large", Shape::new(1, 1, 14, 13), 0.0, 1.0)?;
            fx.input("x_small", Shape::new(2, 1, 6, 7), 0.0, 1.0)?;
            let y_small = fx.random(Shape::new(2, 1, 6, 7), 0.0, 1.0);
            let lc = LossConfig::default();
            let build = |g: &mut Graph<T>| {
                let (x, y) = (g.param("x_large")?, g.param("y_large")?);
                let a = losses::idr_loss(g, x, y, &lc)?;
                let xs = g.param("x_small")?;
                let ys = g.input(y_small.clone());
                let b = losses::idr_loss(g, xs, ys, &lc)?;
                g.add(a, b)
            };
            grad_check(&fx.store, build, all, cfg)
        }
        CheckTarget::Total => {
            let shape = Shape::new(2, 1, 12, 12);
            for i in 1..=3 {
                fx.input(&format!("p{i}"), shape, 0.05, 0.95)?;
            }
            fx.input("dr", shape, 0.05, 0.95)?;
            let dg = fx.random(shape, 0.0, 1.0);
            let gt = Tensor::from_fn(shape, |_, _, y, x| T::of((x + y < 12) as u8 as f64));
            let lc = LossConfig::default();
            let build = |g: &mut Graph<T>| {
                let sides = [g.param("p1")?, g.param("p2")?, g.param("p3")?];
                let (dr, gv, dgv) = (g.param("dr")?, g.input(gt.clone()), g.input(dg.clone()));
                Ok(losses::total_loss(g, &sides, gv, Some((dr, dgv)), &lc)?.0)
            };
            grad_check(&fx.store, build, all, cfg)
        }
        CheckTarget::Network => {
            let problem = NetworkProblem::<T>::new(NET_HW, cfg.seed)?;
            grad_check(&problem.store, |g| problem.loss(g), all, cfg)
        }
    }
}

/// Full train-mode objective of a narrow network on random data.
pub struct NetworkProblem<T: Element> {
    pub net: MobileSal,
    pub store: ParamStore<T>,
    rgb: Tensor<T>,
    depth: Tensor<T>,
    gt: Tensor<T>,
}

impl<T: Element> NetworkProblem<T> {
    pub fn new(hw: usize, seed: u64) -> Result<Self> {
        let net = MobileSal::new(MobileSalConfig {
            input_size: (hw, hw),
            width_mult: 0.125,
            include_idr_at_inference: true,
            ..Default::default()
        })?;
        let mut fx = Fixture::<T>::new(seed ^ 0x6c0f);
        fx.store = net.init_params(seed)?;
        // Non-zero side outputs so every decoder path carries gradient.
        for (name, p) in fx.store.iter_mut() {
            if name.contains(".side.") {
                for v in p.value.data_mut() {
                    *v = T::of(fx.rng.gen_range(-0.5..0.5));
                }
            }
        }
        // With zero shifts a dead channel normalises to exactly zero and
        // parks the following ReLU on its kink.
        fx.jitter_bn();
        let rgb = fx.random(Shape::new(2, 3, hw, hw), -1.0, 1.0);
        let depth = fx.random(Shape::new(2, 1, hw, hw), 0.0, 1.0);
        let gt = Tensor::from_fn(Shape::new(2, 1, hw, hw), |n, _, y, x| T::of((x + y + 8 * n < hw) as u8 as f64));
        let mut problem = NetworkProblem {
            net,
            store: fx.store,
            rgb,
            depth,
            gt,
        };
        problem.calibrate()?;
        Ok(problem)
    }

    /// Replaces the running statistics with those of one train-mode pass
    /// over the problem's batch.
    pub fn calibrate(&mut self) -> Result<()> {
        let updates = {
            let mut g = Graph::new(&self.store, Mode::Train);
            self.loss(&mut g)?;
            g.running_updates().to_vec()
        };
        self.store.apply_running_updates(&updates, 1.0)
    }

    pub fn loss(&self, g: &mut Graph<T>) -> Result<Var> {
        let (r, d, gv) = (g.input(self.rgb.clone()), g.input(self.depth.clone()), g.input(self.gt.clone()));
        let out = self.net.forward(g, r, d)?;
        let restored = out.depth.ok_or_else(|| Error::State("no restored depth in train mode".into()))?;
        Ok(losses::total_loss(g, &out.sides, gv, Some((restored, d)), &LossConfig::default())?.0)
    }
}

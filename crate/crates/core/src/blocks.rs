//! Reusable network blocks. Each block is a plain description (names and
//! channel counts); `init` registers its parameters and `forward` records
//! it on a graph.

use rand::Rng;

use crate::error::{Axis, Error, Result};
use crate::params::Initializer;
use crate::tensor::{ConvSpec, Element, Graph, Var};

fn expect_channels<T: Element>(g: &Graph<T>, x: Var, op: &'static str, expected: usize) -> Result<()> {
    let got = g.shape(x).c;
    if got != expected {
        return Err(Error::dim(op, Axis::Channel, expected, got));
    }
    Ok(())
}

/// Convolution optionally followed by batch norm and ReLU. Parameters live
/// at `{prefix}.conv.*` and `{prefix}.bn.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub prefix: String,
    pub spec: ConvSpec,
    pub bn: bool,
    pub relu: bool,
}

impl ConvUnit {
    pub fn new(prefix: impl Into<String>, spec: ConvSpec, bn: bool, relu: bool) -> Self {
        ConvUnit {
            prefix: prefix.into(),
            spec,
            bn,
            relu,
        }
    }

    /// 1×1 convolution + BN + ReLU.
    pub fn pointwise_bn_relu(prefix: impl Into<String>, cin: usize, cout: usize) -> Self {
        ConvUnit::new(prefix, ConvSpec::pointwise(cin, cout), true, true)
    }

    pub fn init<R: Rng, T: Element>(&self, init: &mut Initializer<R, T>) -> Result<()> {
        init.conv(&format!("{}.conv", self.prefix), &self.spec)?;
        if self.bn {
            init.batch_norm(&format!("{}.bn", self.prefix), self.spec.out_channels)?;
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.conv.weight", self.prefix))?;
        let b = if self.spec.has_bias {
            Some(g.param(&format!("{}.conv.bias", self.prefix))?)
        } else {
            None
        };
        let mut y = g.conv2d(x, w, b, self.spec)?;
        if self.bn {
            y = g.batch_norm(y, &format!("{}.bn", self.prefix))?;
        }
        if self.relu {
            y = g.relu(y);
        }
        Ok(y)
    }
}

/// Inverted residual block: expand 1×1, depthwise 3×3, linear squeeze 1×1.
#[derive(Debug, Clone, PartialEq)]
pub struct Irb {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub stride: usize,
}

impl Irb {
    pub fn new(prefix: impl Into<String>, in_channels: usize, out_channels: usize, expansion: usize, stride: usize) -> Self {
        Irb {
            prefix: prefix.into(),
            in_channels,
            out_channels,
            expansion,
            stride,
        }
    }

    pub fn hidden(&self) -> usize {
        self.expansion * self.in_channels
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    /// Expansion 1 has no expand convolution.
    fn units(&self) -> Vec<ConvUnit> {
        let h = self.hidden();
        let p = &self.prefix;
        let mut units = Vec::with_capacity(3);
        if self.expansion != 1 {
            units.push(ConvUnit::pointwise_bn_relu(format!("{p}.expand"), self.in_channels, h));
        }
        units.push(ConvUnit::new(format!("{p}.dw"), ConvSpec::depthwise(h, self.stride, 1), true, true));
        units.push(ConvUnit::new(
            format!("{p}.project"),
            ConvSpec::pointwise(h, self.out_channels),
            true,
            false,
        ));
        units
    }

    pub fn init<R: Rng, T: Element>(&self, init: &mut Initializer<R, T>) -> Result<()> {
        if self.expansion == 0 || !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Config(format!(
                "{}: expansion must be positive and stride 1 or 2",
                self.prefix
            )));
        }
        self.units().iter().try_for_each(|u| u.init(init))
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        expect_channels(g, x, "irb", self.in_channels)?;
        let mut y = x;
        for u in self.units() {
            y = u.forward(g, y)?;
        }
        if self.has_residual() {
            y = g.add(y, x)?;
        }
        Ok(y)
    }
}

/// `sigmoid(FC2(ReLU(FC1(GAP(x)))))`, both layers channel-preserving.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention {
    pub prefix: String,
    pub channels: usize,
}

impl ChannelAttention {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        ChannelAttention {
            prefix: prefix.into(),
            channels,
        }
    }

    pub fn init<R: Rng, T: Element>(&self, init: &mut Initializer<R, T>) -> Result<()> {
        init.linear(&format!("{}.fc1", self.prefix), self.channels, self.channels)?;
        init.linear(&format!("{}.fc2", self.prefix), self.channels, self.channels)
    }

    /// Returns an `(n, c, 1, 1)` vector with entries in (0, 1).
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        expect_channels(g, x, "channel_attention", self.channels)?;
        let p = &self.prefix;
        let pooled = g.global_avg_pool(x);
        let (w1, b1) = (g.param(&format!("{p}.fc1.weight"))?, g.param(&format!("{p}.fc1.bias"))?);
        let h = g.fully_connected(pooled, w1, Some(b1))?;
        let h = g.relu(h);
        let (w2, b2) = (g.param(&format!("{p}.fc2.weight"))?, g.param(&format!("{p}.fc2.bias"))?);
        let o = g.fully_connected(h, w2, Some(b2))?;
        Ok(g.sigmoid(o))
    }
}

/// Cross-modality fusion at the coarsest scale:
/// `T = IRB(c5 ⊗ d5)`, `v = att(c5)`, output `IRB(v ⊗ T ⊗ d5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cmf {
    pub gate: Irb,
    pub attention: ChannelAttention,
    pub fuse: Irb,
}

impl Cmf {
    pub fn new(prefix: &str, channels: usize, expansion: usize) -> Self {
        Cmf {
            gate: Irb::new(format!("{prefix}.gate"), channels, channels, expansion, 1),
            attention: ChannelAttention::new(format!("{prefix}.att"), channels),
            fuse: Irb::new(format!("{prefix}.fuse"), channels, channels, expansion, 1),
        }
    }

    pub fn init<R: Rng, T: Element>(&self, init: &mut Initializer<R, T>) -> Result<()> {
        self.gate.init(init)?;
        self.attention.init(init)?;
        self.fuse.init(init)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, c5: Var, d5: Var) -> Result<Var> {
        let (sc, sd) = (g.shape(c5), g.shape(d5));
        crate::losses::same_shape("cmf", sc, sd)?;
        let prod = g.mul(c5, d5)?;
        let t = self.gate.forward(g, prod)?;
        let v = self.attention.forward(g, c5)?;
        let vt = g.mul(t, v)?;
        let gated = g.mul(vt, d5)?;
        self.fuse.forward(g, gated)
    }
}

/// Compact pyramid refinement: expand, three parallel dilated depthwise
/// convolutions, squeeze with residual, 1×1, channel recalibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Cpr {
    pub prefix: String,
    pub channels: usize,
    pub expansion: usize,
    pub dilations: [usize; 3],
}

impl Cpr {
    pub fn new(prefix: impl Into<String>, channels: usize, expansion: usize, dilations: [usize; 3]) -> Self {
        Cpr {
            prefix: prefix.into(),
            channels,
            expansion,
            dilations,
        }
    }

    fn hidden(&self) -> usize {
        self.expansion * self.channels
    }

    fn expand(&self) -> ConvUnit {
        ConvUnit::pointwise_bn_relu(format!("{}.expand", self.prefix), self.channels, self.hidden())
    }

    fn branch(&self, i: usize) -> ConvUnit {
        ConvUnit::new(
            format!("{}.branch{i}", self.prefix),
            ConvSpec::depthwise(self.hidden(), 1, self.dilations[i]),
            false,
            false,
        )
    }

    fn squeeze(&self) -> ConvUnit {
        ConvUnit::new(
            format!("{}.squeeze", self.prefix),
            ConvSpec::pointwise(self.hidden(), self.channels),
            true,
            false,
        )
    }

    fn out(&self) -> ConvUnit {
        ConvUnit::new(
            format!("{}.out", self.prefix),
            ConvSpec::pointwise(self.channels, self.channels),
            true,
            false,
        )
    }

    fn attention(&self) -> ChannelAttention {
        ChannelAttention::new(format!("{}.att", self.prefix), self.channels)
    }

    pub fn init<R: Rng, T: Element>(&self, init: &mut Initializer<R, T>) -> Result<()> {
        if self.expansion == 0 || self.dilations.contains(&0) {
            return Err(Error::Config(format!("{}: expansion and dilations must be positive", self.prefix)));
        }
        self.expand().init(init)?;
        for i in 0..3 {
            self.branch(i).init(init)?;
        }
        init.batch_norm(&format!("{}.branch_bn", self.prefix), self.hidden())?;
        self.squeeze().init(init)?;
        self.out().init(init)?;
        self.attention().init(init)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        expect_channels(g, x, "cpr", self.channels)?;
        let x1 = self.expand().forward(g, x)?;
        let mut sum = self.branch(0).forward(g, x1)?;
        for i in 1..3 {
            let b = self.branch(i).forward(g, x1)?;
            sum = g.add(sum, b)?;
        }
        let x2 = g.batch_norm(sum, &format!("{}.branch_bn", self.prefix))?;
        let x2 = g.relu(x2);
        let sq = self.squeeze().forward(g, x2)?;
        let x3 = g.add(sq, x)?;
        let y = self.out().forward(g, x3)?;
        let v = self.attention().forward(g, x)?;
        g.mul(y, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdrOutput {
    pub restored: Var,
    /// Merged 1280-to-mid map at the fusion resolution.
    pub fused: Var,
}

/// Depth-restoration head: squeeze each backbone level, resize to the
/// stride-8 level, concatenate, merge, refine and predict one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct IdrHead {
    pub prefix: String,
    pub in_channels: [usize; 5],
    pub mid: usize,
    pub expansion: usize,
    pub blocks: usize,
}

impl IdrHead {
    pub fn new(prefix: impl Into<String>, in_channels: [usize; 5], mid: usize, expansion: usize) -> Self {
        IdrHead {
            prefix: prefix.into(),
            in_channels,
            mid,
            expansion,
            blocks: 4,
        }
    }

    fn squeeze(&self, i: usize) -> ConvUnit {
        ConvUnit::new(
            format!("{}.squeeze{}", self.prefix, i + 1),
            ConvSpec::pointwise(self.in_channels[i], self.mid).with_bias(true),
            false,
            false,
        )
    }

    fn merge(&self) -> ConvUnit {
        ConvUnit::pointwise_bn_relu(format!("{}.merge", self.prefix), 5 * self.mid, self.mid)
    }

    fn refine(&self, i: usize) -> Irb {
        Irb::new(format!("{}.irb{}", self.prefix, i + 1), self.mid, self.mid, self.expansion, 1)
    }

    fn predict(&self) -> ConvUnit {
        ConvUnit::new(
            format!("{}.predict", self.prefix),
            ConvSpec::pointwise(self.mid, 1).with_bias(true),
            false,
            false,
        )
    }

    pub fn init<R: Rng, T: Element>(&self, init: &mut Initializer<R, T>) -> Result<()> {
        for i in 0..5 {
            self.squeeze(i).init(init)?;
        }
        self.merge().init(init)?;
        for i in 0..self.blocks {
            self.refine(i).init(init)?;
        }
        self.predict().init(init)
    }

    /// `features` are the five levels at strides 2..32; the fusion runs at
    /// the resolution of the third.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, features: [Var; 5], target_hw: (usize, usize)) -> Result<Var> {
        Ok(self.forward_detailed(g, features, target_hw)?.restored)
    }

    pub fn forward_detailed<T: Element>(
        &self,
        g: &mut Graph<T>,
        features: [Var; 5],
        target_hw: (usize, usize),
    ) -> Result<IdrOutput> {
        let s0 = g.shape(features[0]);
        for (i, &f) in features.iter().enumerate() {
            let s = g.shape(f);
            let (eh, ew) = (s0.h.div_ceil(1 << i), s0.w.div_ceil(1 << i));
            if s.n != s0.n || s.h != eh || s.w != ew {
                return Err(Error::shape(
                    "idr_head",
                    format!("level {} has shape {s}, expected {eh}x{ew} spatial for an input pyramid starting at {s0}", i + 1),
                ));
            }
        }
        let fused_hw = (g.shape(features[2]).h, g.shape(features[2]).w);
        let mut squeezed = Vec::with_capacity(5);
        for (i, &f) in features.iter().enumerate() {
            let s = self.squeeze(i).forward(g, f)?;
            squeezed.push(if i == 2 { s } else { g.resize_bilinear(s, fused_hw.0, fused_hw.1)? });
        }
        let cat = g.concat_channels(&squeezed)?;
        let fused = self.merge().forward(g, cat)?;
        let mut y = fused;
        for i in 0..self.blocks {
            y = self.refine(i).forward(g, y)?;
        }
        let logits = self.predict().forward(g, y)?;
        let p = g.sigmoid(logits);
        let restored = g.resize_bilinear(p, target_hw.0, target_hw.1)?;
        Ok(IdrOutput { restored, fused })
    }
}

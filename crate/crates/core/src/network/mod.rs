//! The full RGB-D saliency network: a truncated MobileNetV2 RGB stream, a
//! light depth stream, cross-modality fusion at stride 32, a CPR decoder
//! with five side outputs, and the training-only depth-restoration head.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::{Cmf, ConvUnit, Cpr, IdrHead, Irb};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore};
use crate::tensor::graph::MacCounter;
use crate::tensor::{ConvSpec, Element, Graph, Mode, Shape, Tensor, Var};

/// Every stream downsamples five times.
pub const MAX_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobileSalConfig {
    /// `(height, width)` used for accounting; forward passes accept any
    /// multiple of 32.
    pub input_size: (usize, usize),
    pub width_mult: f64,
    pub m_depth: usize,
    pub m_cpr: usize,
    pub m_idr: usize,
    pub m_cmf: usize,
    pub cpr_dilations: [usize; 3],
    pub idr_channels: usize,
    pub include_idr_at_inference: bool,
}

impl Default for MobileSalConfig {
    fn default() -> Self {
        MobileSalConfig {
            input_size: (320, 320),
            width_mult: 1.0,
            m_depth: 4,
            m_cpr: 4,
            m_idr: 6,
            m_cmf: 4,
            cpr_dilations: [1, 2, 3],
            idr_channels: 256,
            include_idr_at_inference: false,
        }
    }
}

impl MobileSalConfig {
    pub fn toy() -> Self {
        MobileSalConfig {
            input_size: (64, 64),
            width_mult: 0.25,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_input_hw(self.input_size.0, self.input_size.1)?;
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return Err(Error::Config(format!("width_mult must be positive, got {}", self.width_mult)));
        }
        if [self.m_depth, self.m_cpr, self.m_idr, self.m_cmf].contains(&0) || self.cpr_dilations.contains(&0) {
            return Err(Error::Config("expansion factors and dilations must be positive".into()));
        }
        Ok(())
    }

    /// Scaled channel count, never below 1.
    pub fn ch(&self, c: usize) -> usize {
        ((c as f64 * self.width_mult).round() as usize).max(1)
    }

    /// SHA-256 of the JSON-serialised configuration.
    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&json).into()
    }
}

pub fn check_input_hw(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
        return Err(Error::Config(format!(
            "input size {h}x{w} must be a positive multiple of {MAX_STRIDE} on both axes"
        )));
    }
    Ok(())
}

/// Base channel counts of the five RGB levels.
pub const RGB_CHANNELS: [usize; 5] = [16, 24, 32, 96, 320];
/// Base channel counts of the five depth levels.
pub const DEPTH_CHANNELS: [usize; 5] = [16, 32, 64, 96, 320];

/// MobileNetV2 bottleneck settings `(expansion, channels, repeats, stride)`
/// paired with the level each group ends.
const BOTTLENECKS: [(usize, usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1, 0),
    (6, 24, 2, 2, 1),
    (6, 32, 3, 2, 2),
    (6, 64, 4, 2, 3),
    (6, 96, 3, 1, 3),
    (6, 160, 3, 2, 4),
    (6, 320, 1, 1, 4),
];

/// Stride-2, 4, 8, 16 and 32 feature maps of one stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pyramid(pub [Var; 5]);

#[derive(Debug, Clone, PartialEq)]
pub struct RgbStream {
    pub stem: ConvUnit,
    pub blocks: Vec<Irb>,
    /// Index of the last block of each level.
    pub level_ends: [usize; 5],
}

impl RgbStream {
    fn new(cfg: &MobileSalConfig) -> Self {
        let stem_c = cfg.ch(32);
        let stem = ConvUnit::new("rgb.stem", ConvSpec::dense(3, stem_c, 3, 2), true, true);
        let mut blocks = Vec::new();
        let mut level_ends = [0; 5];
        let mut cin = stem_c;
        for (t, c, n, s, level) in BOTTLENECKS {
            let cout = cfg.ch(c);
            for i in 0..n {
                let stride = if i == 0 { s } else { 1 };
                blocks.push(Irb::new(format!("rgb.block{}", blocks.len()), cin, cout, t, stride));
                cin = cout;
            }
            level_ends[level] = blocks.len() - 1;
        }
        RgbStream {
            stem,
            blocks,
            level_ends,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, rgb: Var) -> Result<Pyramid> {
        let mut x = self.stem.forward(g, rgb)?;
        let mut out = Vec::with_capacity(5);
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.forward(g, x)?;
            if self.level_ends.contains(&i) {
                out.push(x);
            }
        }
        Ok(Pyramid(out.try_into().expect("five levels")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthStream {
    pub stages: Vec<[Irb; 2]>,
}

impl DepthStream {
    fn new(cfg: &MobileSalConfig) -> Self {
        let mut cin = 1;
        let stages = DEPTH_CHANNELS
            .iter()
            .enumerate()
            .map(|(s, &c)| {
                let cout = cfg.ch(c);
                let p = format!("depth.stage{}", s + 1);
                let pair = [
                    Irb::new(format!("{p}.irb1"), cin, cout, cfg.m_depth, 2),
                    Irb::new(format!("{p}.irb2"), cout, cout, cfg.m_depth, 1),
                ];
                cin = cout;
                pair
            })
            .collect();
        DepthStream { stages }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, depth: Var) -> Result<Pyramid> {
        let mut x = depth;
        let mut out = Vec::with_capacity(5);
        for [a, b] in &self.stages {
            x = a.forward(g, x)?;
            x = b.forward(g, x)?;
            out.push(x);
        }
        Ok(Pyramid(out.try_into().expect("five levels")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage {
    /// Channel-halving 1×1 for the upsampled map from the stage above and
    /// for the encoder feature. Absent at the top stage.
    pub reduce: Option<(ConvUnit, ConvUnit)>,
    pub cpr: Cpr,
    /// Single-channel side-output projection.
    pub side: ConvUnit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// Finest first: `stages[0]` works at stride 2.
    pub stages: Vec<DecoderStage>,
}

impl Decoder {
    fn new(cfg: &MobileSalConfig) -> Self {
        let rgb = RGB_CHANNELS.map(|c| cfg.ch(c));
        let mut widths = [0; 5];
        widths[4] = rgb[4];
        for i in (0..4).rev() {
            widths[i] = (widths[i + 1] / 2).max(1) + (rgb[i] / 2).max(1);
        }
        let stages = (0..5)
            .map(|i| {
                let p = format!("decoder.stage{}", i + 1);
                let reduce = (i < 4).then(|| {
                    (
                        ConvUnit::pointwise_bn_relu(format!("{p}.reduce_top"), widths[i + 1], (widths[i + 1] / 2).max(1)),
                        ConvUnit::pointwise_bn_relu(format!("{p}.reduce_skip"), rgb[i], (rgb[i] / 2).max(1)),
                    )
                });
                DecoderStage {
                    reduce,
                    cpr: Cpr::new(format!("{p}.cpr"), widths[i], cfg.m_cpr, cfg.cpr_dilations),
                    side: ConvUnit::new(
                        format!("{p}.side"),
                        ConvSpec::pointwise(widths[i], 1).with_bias(true),
                        false,
                        false,
                    ),
                }
            })
            .collect();
        Decoder { stages }
    }

    pub fn widths(&self) -> [usize; 5] {
        std::array::from_fn(|i| self.stages[i].cpr.channels)
    }

    /// Returns the five refined maps, finest first.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, rgb: &Pyramid, c5d: Var) -> Result<[Var; 5]> {
        let mut out = [c5d; 5];
        out[4] = self.stages[4].cpr.forward(g, c5d)?;
        for i in (0..4).rev() {
            let stage = &self.stages[i];
            let skip = rgb.0[i];
            let (h, w) = (g.shape(skip).h, g.shape(skip).w);
            let up = g.resize_bilinear(out[i + 1], h, w)?;
            let (top, side) = stage.reduce.as_ref().expect("lower stages reduce");
            let a = top.forward(g, up)?;
            let b = side.forward(g, skip)?;
            let cat = g.concat_channels(&[a, b])?;
            out[i] = stage.cpr.forward(g, cat)?;
        }
        Ok(out)
    }
}

/// Recorded outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutputs {
    /// `P1..P5` at input resolution.
    pub sides: [Var; 5],
    /// Restored depth at input resolution (train mode only by default).
    pub depth: Option<Var>,
    pub rgb: Pyramid,
    pub depth_features: Pyramid,
    pub fused: Var,
    pub decoder: [Var; 5],
    /// Merged map inside the restoration head.
    pub idr_fusion: Option<Var>,
}

/// Parameter-name groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    Inference,
    Rgb,
    Depth,
    Cmf,
    Decoder,
    Idr,
}

impl Scope {
    pub const ALL: [Scope; 7] = [
        Scope::All,
        Scope::Inference,
        Scope::Rgb,
        Scope::Depth,
        Scope::Cmf,
        Scope::Decoder,
        Scope::Idr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::Inference => "inference",
            Scope::Rgb => "rgb",
            Scope::Depth => "depth",
            Scope::Cmf => "cmf",
            Scope::Decoder => "decoder",
            Scope::Idr => "idr",
        }
    }

    pub fn contains(self, param: &str) -> bool {
        let head = param.split('.').next().unwrap_or("");
        match self {
            Scope::All => true,
            Scope::Inference => head != "idr",
            s => head == s.name(),
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scope `{s}`")))
    }
}

pub fn count_params<T: Element>(store: &ParamStore<T>, scope: Scope) -> usize {
    store.count_trainable(|n| scope.contains(n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobileSal {
    pub config: MobileSalConfig,
    pub rgb: RgbStream,
    pub depth: DepthStream,
    pub cmf: Cmf,
    pub decoder: Decoder,
    pub idr: IdrHead,
}

impl MobileSal {
    pub fn new(config: MobileSalConfig) -> Result<Self> {
        config.validate()?;
        let rgb = RgbStream::new(&config);
        let depth = DepthStream::new(&config);
        let c5 = config.ch(RGB_CHANNELS[4]);
        let cmf = Cmf::new("cmf", c5, config.m_cmf);
        let decoder = Decoder::new(&config);
        let mut idr_in = RGB_CHANNELS.map(|c| config.ch(c));
        idr_in[4] = c5;
        let idr = IdrHead::new("idr", idr_in, config.ch(config.idr_channels), config.m_idr);
        Ok(MobileSal {
            config,
            rgb,
            depth,
            cmf,
            decoder,
            idr,
        })
    }

    /// Freshly initialised parameters; identical for identical seeds.
    pub fn init_params<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer {
            store: &mut store,
            rng: &mut rng,
        };
        self.rgb.stem.init(&mut init)?;
        for b in &self.rgb.blocks {
            b.init(&mut init)?;
        }
        for [a, b] in &self.depth.stages {
            a.init(&mut init)?;
            b.init(&mut init)?;
        }
        self.cmf.init(&mut init)?;
        for stage in &self.decoder.stages {
            if let Some((a, b)) = &stage.reduce {
                a.init(&mut init)?;
                b.init(&mut init)?;
            }
            stage.cpr.init(&mut init)?;
            init.zero_conv(&format!("{}.conv", stage.side.prefix), &stage.side.spec)?;
        }
        self.idr.init(&mut init)?;
        Ok(store)
    }

    /// Runs both streams, fusion and decoder. The restoration head runs in
    /// train mode, or in eval mode when the config asks for it.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, rgb: Var, depth: Var) -> Result<NetworkOutputs> {
        let (sr, sd) = (g.shape(rgb), g.shape(depth));
        check_input_hw(sr.h, sr.w)?;
        if sr.c != 3 || sd.c != 1 || sr.n != sd.n || sr.h != sd.h || sr.w != sd.w {
            return Err(Error::shape(
                "forward",
                format!("expected rgb n×3×H×W and depth n×1×H×W, got {sr} and {sd}"),
            ));
        }
        let prev = g.set_scope("rgb");
        let c = self.rgb.forward(g, rgb)?;
        g.set_scope("depth");
        let d = self.depth.forward(g, depth)?;
        g.set_scope("cmf");
        let fused = self.cmf.forward(g, c.0[4], d.0[4])?;
        g.set_scope("decoder");
        let dec = self.decoder.forward(g, &c, fused)?;
        let mut sides = dec;
        for (i, stage) in self.decoder.stages.iter().enumerate() {
            let logits = stage.side.forward(g, dec[i])?;
            let p = g.sigmoid(logits);
            sides[i] = g.resize_bilinear(p, sr.h, sr.w)?;
        }
        let (mut restored, mut idr_fusion) = (None, None);
        if g.mode() == Mode::Train || self.config.include_idr_at_inference {
            g.set_scope("idr");
            let feats = [c.0[0], c.0[1], c.0[2], c.0[3], fused];
            let out = self.idr.forward_detailed(g, feats, (sr.h, sr.w))?;
            restored = Some(out.restored);
            idr_fusion = Some(out.fused);
        }
        g.set_scope(&prev);
        Ok(NetworkOutputs {
            sides,
            depth: restored,
            rgb: c,
            depth_features: d,
            fused,
            decoder: dec,
            idr_fusion,
        })
    }

    /// Multiply-accumulate counts per scope for one `batch × H × W` pass.
    pub fn count_macs(&self, mode: Mode, batch: usize, hw: (usize, usize)) -> Result<MacCounter> {
        let store: ParamStore<f32> = self.init_params(0)?;
        self.count_macs_with(&store, mode, batch, hw)
    }

    pub fn count_macs_with(&self, store: &ParamStore<f32>, mode: Mode, batch: usize, (h, w): (usize, usize)) -> Result<MacCounter> {
        let mut g = Graph::shape_only(store, mode);
        let rgb = g.input(Tensor::zeros(Shape::new(batch, 3, h, w)));
        let depth = g.input(Tensor::zeros(Shape::new(batch, 1, h, w)));
        self.forward(&mut g, rgb, depth)?;
        Ok(g.macs().clone())
    }
}

/// MACs of a stand-alone fusion block on `channels × h × w` inputs.
pub fn cmf_macs(channels: usize, expansion: usize, h: usize, w: usize) -> Result<u64> {
    let cmf = Cmf::new("cmf", channels, expansion);
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    cmf.init(&mut Initializer {
        store: &mut store,
        rng: &mut rng,
    })?;
    let mut g = Graph::shape_only(&store, Mode::Eval);
    let c5 = g.input(Tensor::zeros(Shape::new(1, channels, h, w)));
    let d5 = g.input(Tensor::zeros(Shape::new(1, channels, h, w)));
    cmf.forward(&mut g, c5, d5)?;
    Ok(g.macs().total())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoder_widths_at_full_width() {
        let net = MobileSal::new(MobileSalConfig::default()).unwrap();
        assert_eq!(net.decoder.widths(), [44, 72, 120, 208, 320]);
        assert_eq!(net.rgb.blocks.len(), 17);
        assert_eq!(net.rgb.level_ends, [0, 2, 5, 12, 16]);
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let cfg = MobileSalConfig {
            input_size: (48, 64),
            ..Default::default()
        };
        assert!(MobileSal::new(cfg).is_err());
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("idr".parse::<Scope>().unwrap(), Scope::Idr);
        assert!("head".parse::<Scope>().is_err());
        assert!(Scope::Inference.contains("decoder.stage1.side.conv.bias"));
        assert!(!Scope::Inference.contains("idr.merge.conv.weight"));
    }
}

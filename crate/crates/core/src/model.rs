//! Detector assembly: backbone -> neck -> three-scale head, with per-module
//! toggles, box decoding and greedy non-maximum suppression.
//!
//! Scale layout: a two-convolution stem brings the input to 1/4 resolution,
//! and each of the three stages halves it again, producing features at the
//! configured strides (8/16/32 by default). The attention block sits at the
//! end of the deepest stage; the depthwise-separable toggle appends one
//! dw+pw refinement block per stage; the neck fuses top-down with either the
//! gated upsampling block or a plain project-upsample-add.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::attention::{MapseBlock, MapseConfig};
use crate::error::{Error, Result};
use crate::nn::{
    seeded_rng, silu, silu_backward, sigmoid_scalar, upsample2x, upsample2x_backward, Conv2d,
    DwConv2d, InitRng, NamedParams, NamedParamsMut, UpsampleMode,
};
use crate::tensor::FeatureMap;
use crate::vgau::{VgauBlock, VgauCache, VgauConfig};

/// Clamp on the size logits before exponentiation.
pub const SIZE_LOG_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub use_dsc: bool,
    pub use_mapse: bool,
    pub use_vgau: bool,
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
    pub input_size: usize,
    pub strides: Vec<usize>,
    pub nms_iou: f64,
    pub conf_floor: f64,
    pub mapse: MapseConfig,
    pub upsample_mode: UpsampleMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            use_dsc: true,
            use_mapse: true,
            use_vgau: true,
            stage_channels: vec![16, 32, 64],
            num_classes: 3,
            input_size: 512,
            strides: vec![8, 16, 32],
            nms_iou: 0.45,
            conf_floor: 0.001,
            mapse: MapseConfig::default(),
            upsample_mode: UpsampleMode::Nearest,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 3 || self.strides.len() != 3 {
            return Err(Error::Config(format!(
                "expected 3 stage channels and 3 strides, got {} and {}",
                self.stage_channels.len(),
                self.strides.len()
            )));
        }
        if self.strides[1] != 2 * self.strides[0] || self.strides[2] != 4 * self.strides[0] {
            return Err(Error::Config(format!(
                "strides must double per scale, got {:?}",
                self.strides
            )));
        }
        let stem = self.strides[0] / 2;
        if self.strides[0] < 4 || !stem.is_power_of_two() {
            return Err(Error::Config(format!(
                "base stride must be >= 4 with a power-of-two stem, got {}",
                self.strides[0]
            )));
        }
        let max_stride = self.strides[2];
        if self.input_size == 0 || self.input_size % max_stride != 0 {
            return Err(Error::Config(format!(
                "input size {} must be divisible by the maximum stride {max_stride}",
                self.input_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(format!("nms_iou must be in [0,1], got {}", self.nms_iou)));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        Ok(())
    }
}

/// Axis-aligned box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Per-scale raw head outputs `(batch, 4 + num_classes, H_s, W_s)`,
/// finest stride first.
#[derive(Debug, Clone)]
pub struct RawPrediction {
    pub scales: Vec<Array4<f64>>,
    pub strides: Vec<usize>,
}

/// Gradient with respect to the raw head outputs, same layout.
pub type RawGrad = Vec<Array4<f64>>;

#[derive(Debug, Clone)]
struct ConvSilu {
    conv: Conv2d,
}

struct ConvSiluCache {
    pre: FeatureMap,
}

impl ConvSilu {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut InitRng) -> Self {
        Self { conv: Conv2d::new(cin, cout, k, stride, pad, rng) }
    }

    fn forward_train(&self, x: &FeatureMap) -> (FeatureMap, ConvSiluCache) {
        let pre = self.conv.forward(x);
        (silu(&pre), ConvSiluCache { pre })
    }

    fn backward(&mut self, x: &FeatureMap, cache: &ConvSiluCache, gy: &FeatureMap) -> FeatureMap {
        let g_pre = silu_backward(&cache.pre, gy);
        self.conv.backward(x, &g_pre)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: ConvSilu,
    conv2: Conv2d,
}

struct ResBlockCache {
    c1: ConvSiluCache,
    mid: FeatureMap,
    sum: FeatureMap,
}

impl ResBlock {
    fn new(c: usize, rng: &mut InitRng) -> Self {
        Self {
            conv1: ConvSilu::new(c, c, 3, 1, 1, rng),
            conv2: Conv2d::new(c, c, 3, 1, 1, rng),
        }
    }

    fn forward_train(&self, x: &FeatureMap) -> (FeatureMap, ResBlockCache) {
        let (mid, c1) = self.conv1.forward_train(x);
        let pre = self.conv2.forward(&mid);
        let sum = &pre + x;
        (silu(&sum), ResBlockCache { c1, mid, sum })
    }

    fn backward(&mut self, x: &FeatureMap, cache: &ResBlockCache, gy: &FeatureMap) -> FeatureMap {
        let g_sum = silu_backward(&cache.sum, gy);
        let g_mid = self.conv2.backward(&cache.mid, &g_sum);
        let mut gx = self.conv1.backward(x, &cache.c1, &g_mid);
        gx += &g_sum;
        gx
    }
}

/// Depthwise-separable refinement block: dw3x3 -> silu -> pw1x1, residual.
#[derive(Debug, Clone)]
struct DscBlock {
    dw: DwConv2d,
    pw: Conv2d,
}

struct DscBlockCache {
    dw_out: FeatureMap,
    act: FeatureMap,
    sum: FeatureMap,
}

impl DscBlock {
    fn new(c: usize, rng: &mut InitRng) -> Self {
        Self {
            dw: DwConv2d::new(c, 3, 1, 1, rng),
            pw: Conv2d::new(c, c, 1, 1, 0, rng),
        }
    }

    fn forward_train(&self, x: &FeatureMap) -> (FeatureMap, DscBlockCache) {
        let dw_out = self.dw.forward(x);
        let act = silu(&dw_out);
        let pre = self.pw.forward(&act);
        let sum = &pre + x;
        (silu(&sum), DscBlockCache { dw_out, act, sum })
    }

    fn backward(&mut self, x: &FeatureMap, cache: &DscBlockCache, gy: &FeatureMap) -> FeatureMap {
        let g_sum = silu_backward(&cache.sum, gy);
        let g_act = self.pw.backward(&cache.act, &g_sum);
        let g_dw = silu_backward(&cache.dw_out, &g_act);
        let mut gx = self.dw.backward(x, &g_dw);
        gx += &g_sum;
        gx
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: ConvSilu,
    block1: ResBlock,
    block2: ResBlock,
    dsc: Option<DscBlock>,
}

struct StageCache {
    input: FeatureMap,
    down: ConvSiluCache,
    x0: FeatureMap,
    b1: ResBlockCache,
    x1: FeatureMap,
    b2: ResBlockCache,
    x2: FeatureMap,
    dsc: Option<DscBlockCache>,
}

impl Stage {
    fn new(cin: usize, cout: usize, use_dsc: bool, rng: &mut InitRng) -> Self {
        Self {
            down: ConvSilu::new(cin, cout, 3, 2, 1, rng),
            block1: ResBlock::new(cout, rng),
            block2: ResBlock::new(cout, rng),
            dsc: if use_dsc { Some(DscBlock::new(cout, rng)) } else { None },
        }
    }

    fn forward_train(&self, x: &FeatureMap) -> (FeatureMap, StageCache) {
        let (x0, down) = self.down.forward_train(x);
        let (x1, b1) = self.block1.forward_train(&x0);
        let (x2, b2) = self.block2.forward_train(&x1);
        let (out, dsc) = match &self.dsc {
            Some(d) => {
                let (y, c) = d.forward_train(&x2);
                (y, Some(c))
            }
            None => (x2.clone(), None),
        };
        (
            out,
            StageCache { input: x.clone(), down, x0, b1, x1, b2, x2, dsc },
        )
    }

    fn backward(&mut self, cache: &StageCache, gy: &FeatureMap) -> FeatureMap {
        let g_x2 = match (&mut self.dsc, &cache.dsc) {
            (Some(d), Some(c)) => d.backward(&cache.x2, c, gy),
            _ => gy.to_owned(),
        };
        let g_x1 = self.block2.backward(&cache.x1, &cache.b2, &g_x2);
        let g_x0 = self.block1.backward(&cache.x0, &cache.b1, &g_x1);
        self.down.backward(&cache.input, &cache.down, &g_x0)
    }
}

#[derive(Debug, Clone)]
struct Backbone {
    stem: Vec<ConvSilu>,
    stages: Vec<Stage>,
    mapse: Option<MapseBlock>,
}

struct BackboneCache {
    stem: Vec<(FeatureMap, ConvSiluCache)>,
    stages: Vec<StageCache>,
    p5_pre: FeatureMap,
    mapse: Option<crate::attention::mapse::MapseCache>,
}

#[derive(Debug, Clone)]
enum Fusion {
    Vgau(VgauBlock),
    Plain { project: Conv2d, mode: UpsampleMode },
}

enum FusionCache {
    Vgau(VgauCache),
    Plain,
}

impl Fusion {
    fn forward_train(&self, high: &FeatureMap, low: &FeatureMap) -> Result<(FeatureMap, FusionCache)> {
        match self {
            Fusion::Vgau(v) => {
                let (y, c) = v.forward_train(high, low)?;
                Ok((y, FusionCache::Vgau(c)))
            }
            Fusion::Plain { project, mode } => {
                let up = upsample2x(&project.forward(high), *mode);
                Ok((&up + low, FusionCache::Plain))
            }
        }
    }

    fn backward(
        &mut self,
        high: &FeatureMap,
        low: &FeatureMap,
        cache: &FusionCache,
        gy: &FeatureMap,
    ) -> (FeatureMap, FeatureMap) {
        match (self, cache) {
            (Fusion::Vgau(v), FusionCache::Vgau(c)) => v.backward(high, low, c, gy),
            (Fusion::Plain { project, mode }, FusionCache::Plain) => {
                let g_proj = upsample2x_backward(gy, *mode);
                let g_high = project.backward(high, &g_proj);
                (g_high, gy.to_owned())
            }
            _ => unreachable!("fusion cache mismatch"),
        }
    }

    fn named(&self, prefix: &str) -> NamedParams<'_> {
        match self {
            Fusion::Vgau(v) => v.named(prefix),
            Fusion::Plain { project, .. } => project.named(&format!("{prefix}.project")),
        }
    }

    fn named_mut(&mut self, prefix: &str) -> NamedParamsMut<'_> {
        match self {
            Fusion::Vgau(v) => v.named_mut(prefix),
            Fusion::Plain { project, .. } => project.named_mut(&format!("{prefix}.project")),
        }
    }
}

#[derive(Debug, Clone)]
struct Head {
    conv: ConvSilu,
    out: Conv2d,
}

struct HeadCache {
    input: FeatureMap,
    conv: ConvSiluCache,
    mid: FeatureMap,
}

impl Head {
    fn new(c: usize, num_outputs: usize, rng: &mut InitRng) -> Self {
        let mut out = Conv2d::new(c, num_outputs, 1, 1, 0, rng);
        // start classification scores low so early training is not flooded
        // with false positives (box channels stay at bias 0)
        for ch in 4..num_outputs {
            out.bias.value[[ch]] = -4.0;
        }
        Self { conv: ConvSilu::new(c, c, 3, 1, 1, rng), out }
    }

    fn forward_train(&self, x: &FeatureMap) -> (FeatureMap, HeadCache) {
        let (mid, conv) = self.conv.forward_train(x);
        let y = self.out.forward(&mid);
        (y, HeadCache { input: x.clone(), conv, mid })
    }

    fn backward(&mut self, cache: &HeadCache, gy: &FeatureMap) -> FeatureMap {
        let g_mid = self.out.backward(&cache.mid, gy);
        self.conv.backward(&cache.input, &cache.conv, &g_mid)
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    backbone: Backbone,
    fuse_p4: Fusion,
    fuse_p3: Fusion,
    heads: Vec<Head>,
}

pub struct ModelCache {
    backbone: BackboneCache,
    p5: FeatureMap,
    p4: FeatureMap,
    p3: FeatureMap,
    f4: FusionCache,
    n4: FeatureMap,
    f3: FusionCache,
    heads: Vec<HeadCache>,
}

/// Builds the detector with deterministic, seed-driven initialization.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Model::build(cfg, seed)
}

impl Model {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let stem_factor = cfg.strides[0] / 2; // spatial reduction before stage 1
        let stem_layers = (stem_factor as f64).log2() as usize;
        let stem_c = (cfg.stage_channels[0] / 2).max(4);
        let mut stem = Vec::new();
        let mut cin = 3;
        for _ in 0..stem_layers {
            stem.push(ConvSilu::new(cin, stem_c, 3, 2, 1, &mut rng));
            cin = stem_c;
        }
        let mut stages = Vec::new();
        for &c in &cfg.stage_channels {
            stages.push(Stage::new(cin, c, cfg.use_dsc, &mut rng));
            cin = c;
        }
        let c = cfg.stage_channels.clone();
        let p5_hw = cfg.input_size / cfg.strides[2];
        let mapse = if cfg.use_mapse {
            Some(MapseBlock::new(c[2], p5_hw, p5_hw, cfg.mapse.clone(), &mut rng)?)
        } else {
            None
        };
        let make_fusion = |high: usize, low: usize, rng: &mut InitRng| -> Result<Fusion> {
            if cfg.use_vgau {
                Ok(Fusion::Vgau(VgauBlock::new(
                    VgauConfig {
                        high_channels: high,
                        low_channels: low,
                        out_channels: low,
                        upsample_mode: cfg.upsample_mode,
                    },
                    rng,
                )?))
            } else {
                Ok(Fusion::Plain {
                    project: Conv2d::new(high, low, 1, 1, 0, rng),
                    mode: cfg.upsample_mode,
                })
            }
        };
        let fuse_p4 = make_fusion(c[2], c[1], &mut rng)?;
        let fuse_p3 = make_fusion(c[1], c[0], &mut rng)?;
        let nout = 4 + cfg.num_classes;
        let heads = vec![
            Head::new(c[0], nout, &mut rng),
            Head::new(c[1], nout, &mut rng),
            Head::new(c[2], nout, &mut rng),
        ];
        Ok(Model {
            cfg: cfg.clone(),
            backbone: Backbone { stem, stages, mapse },
            fuse_p4,
            fuse_p3,
            heads,
        })
    }

    pub fn forward(&self, image: &FeatureMap) -> Result<RawPrediction> {
        Ok(self.forward_train(image)?.0)
    }

    pub fn forward_train(&self, image: &FeatureMap) -> Result<(RawPrediction, ModelCache)> {
        let s = self.cfg.input_size;
        if image.shape()[2] != s || image.shape()[3] != s {
            return Err(Error::Dimension(format!(
                "expected {s}x{s} input, got {}x{}",
                image.shape()[2],
                image.shape()[3]
            )));
        }
        if image.shape()[1] != 3 {
            return Err(Error::Dimension(format!(
                "expected 3 input channels, got {}",
                image.shape()[1]
            )));
        }
        let mut x = image.clone();
        let mut stem_caches = Vec::new();
        for layer in &self.backbone.stem {
            let (y, c) = layer.forward_train(&x);
            stem_caches.push((x, c));
            x = y;
        }
        let mut stage_caches = Vec::new();
        let mut feats = Vec::new();
        for stage in &self.backbone.stages {
            let (y, c) = stage.forward_train(&x);
            stage_caches.push(c);
            feats.push(y.clone());
            x = y;
        }
        let p3 = feats[0].clone();
        let p4 = feats[1].clone();
        let p5_pre = feats[2].clone();
        let (p5, mapse_cache) = match &self.backbone.mapse {
            Some(m) => {
                let (y, c) = m.forward_train(&p5_pre)?;
                (y, Some(c))
            }
            None => (p5_pre.clone(), None),
        };
        let (n4, f4) = self.fuse_p4.forward_train(&p5, &p4)?;
        let (n3, f3) = self.fuse_p3.forward_train(&n4, &p3)?;
        let inputs = [&n3, &n4, &p5];
        let mut scales = Vec::new();
        let mut head_caches = Vec::new();
        for (head, input) in self.heads.iter().zip(inputs) {
            let (y, c) = head.forward_train(input);
            scales.push(y);
            head_caches.push(c);
        }
        let raw = RawPrediction { scales, strides: self.cfg.strides.clone() };
        let cache = ModelCache {
            backbone: BackboneCache {
                stem: stem_caches,
                stages: stage_caches,
                p5_pre,
                mapse: mapse_cache,
            },
            p5,
            p4,
            p3,
            f4,
            n4,
            f3,
            heads: head_caches,
        };
        Ok((raw, cache))
    }

    /// Backpropagates the head gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ModelCache, grad: &RawGrad) -> FeatureMap {
        let g_n3 = self.heads[0].backward(&cache.heads[0], &grad[0]);
        let g_n4_head = self.heads[1].backward(&cache.heads[1], &grad[1]);
        let g_p5_head = self.heads[2].backward(&cache.heads[2], &grad[2]);
        let (g_n4_fuse, g_p3) = self.fuse_p3.backward(&cache.n4, &cache.p3, &cache.f3, &g_n3);
        let g_n4 = &g_n4_head + &g_n4_fuse;
        let (g_p5_fuse, g_p4) = self.fuse_p4.backward(&cache.p5, &cache.p4, &cache.f4, &g_n4);
        let g_p5 = &g_p5_head + &g_p5_fuse;
        let g_p5_pre = match (&mut self.backbone.mapse, &cache.backbone.mapse) {
            (Some(m), Some(mc)) => m.backward(&cache.backbone.p5_pre, mc, &g_p5),
            _ => g_p5,
        };
        // stages in reverse; p3/p4 gradients join at their stage outputs
        let mut g = g_p5_pre;
        for (i, (stage, sc)) in self
            .backbone
            .stages
            .iter_mut()
            .zip(&cache.backbone.stages)
            .enumerate()
            .rev()
        {
            if i == 1 {
                g += &g_p4;
            }
            if i == 0 {
                g += &g_p3;
            }
            g = stage.backward(sc, &g);
        }
        for (layer, (input, c)) in self
            .backbone
            .stem
            .iter_mut()
            .zip(&cache.backbone.stem)
            .rev()
        {
            g = layer.backward(input, c, &g);
        }
        g
    }

    pub fn named_params(&self) -> NamedParams<'_> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.stem.iter().enumerate() {
            out.extend(l.conv.named(&format!("backbone.stem{i}")));
        }
        for (i, s) in self.backbone.stages.iter().enumerate() {
            let p = format!("backbone.stage{i}");
            out.extend(s.down.conv.named(&format!("{p}.down")));
            out.extend(s.block1.conv1.conv.named(&format!("{p}.block1.conv1")));
            out.extend(s.block1.conv2.named(&format!("{p}.block1.conv2")));
            out.extend(s.block2.conv1.conv.named(&format!("{p}.block2.conv1")));
            out.extend(s.block2.conv2.named(&format!("{p}.block2.conv2")));
            if let Some(d) = &s.dsc {
                out.extend(d.dw.named(&format!("{p}.dsc.dw")));
                out.extend(d.pw.named(&format!("{p}.dsc.pw")));
            }
        }
        if let Some(m) = &self.backbone.mapse {
            out.extend(m.named("backbone.mapse"));
        }
        out.extend(self.fuse_p4.named("neck.fuse_p4"));
        out.extend(self.fuse_p3.named("neck.fuse_p3"));
        for (i, h) in self.heads.iter().enumerate() {
            out.extend(h.conv.conv.named(&format!("head{i}.conv")));
            out.extend(h.out.named(&format!("head{i}.out")));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> NamedParamsMut<'_> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.stem.iter_mut().enumerate() {
            out.extend(l.conv.named_mut(&format!("backbone.stem{i}")));
        }
        for (i, s) in self.backbone.stages.iter_mut().enumerate() {
            let p = format!("backbone.stage{i}");
            out.extend(s.down.conv.named_mut(&format!("{p}.down")));
            out.extend(s.block1.conv1.conv.named_mut(&format!("{p}.block1.conv1")));
            out.extend(s.block1.conv2.named_mut(&format!("{p}.block1.conv2")));
            out.extend(s.block2.conv1.conv.named_mut(&format!("{p}.block2.conv1")));
            out.extend(s.block2.conv2.named_mut(&format!("{p}.block2.conv2")));
            if let Some(d) = &mut s.dsc {
                out.extend(d.dw.named_mut(&format!("{p}.dsc.dw")));
                out.extend(d.pw.named_mut(&format!("{p}.dsc.pw")));
            }
        }
        if let Some(m) = &mut self.backbone.mapse {
            out.extend(m.named_mut("backbone.mapse"));
        }
        out.extend(self.fuse_p4.named_mut("neck.fuse_p4"));
        out.extend(self.fuse_p3.named_mut("neck.fuse_p3"));
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.extend(h.conv.conv.named_mut(&format!("head{i}.conv")));
            out.extend(h.out.named_mut(&format!("head{i}.out")));
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Decodes raw predictions for one batch into per-image detection lists.
///
/// Per cell: `center = (cell + sigmoid(t_xy)) * stride`,
/// `size = exp(t_wh) * stride` (logits clamped to +/-10 before exp),
/// `score = sigmoid(class logit)`; detections below `conf_floor` are
/// dropped and boxes are clipped to the image bounds.
pub fn decode(raw: &RawPrediction, cfg: &ModelConfig) -> Vec<Vec<Detection>> {
    let batch = raw.scales[0].shape()[0];
    let size = cfg.input_size as f64;
    let mut out = vec![Vec::new(); batch];
    for (scale, &stride) in raw.scales.iter().zip(raw.strides.iter()) {
        let (h, w) = (scale.shape()[2], scale.shape()[3]);
        let s = stride as f64;
        for b in 0..batch {
            for i in 0..h {
                for j in 0..w {
                    let cx = (j as f64 + sigmoid_scalar(scale[[b, 0, i, j]])) * s;
                    let cy = (i as f64 + sigmoid_scalar(scale[[b, 1, i, j]])) * s;
                    let bw = scale[[b, 2, i, j]].clamp(-SIZE_LOG_CLAMP, SIZE_LOG_CLAMP).exp() * s;
                    let bh = scale[[b, 3, i, j]].clamp(-SIZE_LOG_CLAMP, SIZE_LOG_CLAMP).exp() * s;
                    for c in 0..cfg.num_classes {
                        let score = sigmoid_scalar(scale[[b, 4 + c, i, j]]);
                        if score < cfg.conf_floor {
                            continue;
                        }
                        let bbox = BBox::new(
                            (cx - bw / 2.0).clamp(0.0, size),
                            (cy - bh / 2.0).clamp(0.0, size),
                            (cx + bw / 2.0).clamp(0.0, size),
                            (cy + bh / 2.0).clamp(0.0, size),
                        );
                        if bbox.x2 > bbox.x1 && bbox.y2 > bbox.y1 {
                            out[b].push(Detection { bbox, class_id: c, score });
                        }
                    }
                }
            }
        }
    }
    for dets in &mut out {
        sort_by_score(dets);
    }
    out
}

fn sort_by_score(dets: &mut [Detection]) {
    // stable sort by descending score keeps input order on exact ties
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
}

/// Greedy per-class non-maximum suppression; output sorted by score.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut sorted: Vec<Detection> = dets.to_vec();
    sort_by_score(&mut sorted);
    let mut keep: Vec<Detection> = Vec::new();
    let mut removed = vec![false; sorted.len()];
    for i in 0..sorted.len() {
        if removed[i] {
            continue;
        }
        keep.push(sorted[i]);
        for j in (i + 1)..sorted.len() {
            if removed[j] || sorted[j].class_id != sorted[i].class_id {
                continue;
            }
            if crate::metrics::iou(&sorted[i].bbox, &sorted[j].bbox) > iou_thr {
                removed[j] = true;
            }
        }
    }
    keep
}

/// Forward + decode + suppression for one batch of images.
pub fn detect(model: &Model, image: &FeatureMap) -> Result<Vec<Vec<Detection>>> {
    let raw = model.forward(image)?;
    for scale in &raw.scales {
        crate::tensor::ensure_finite(scale, "detection head")?;
    }
    Ok(decode(&raw, &model.cfg)
        .into_iter()
        .map(|d| nms(&d, model.cfg.nms_iou))
        .collect())
}

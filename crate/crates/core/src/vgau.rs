//! Visual global attentional upsampling.
//!
//! The high-resolution (low-level) features are compressed by a 3x3
//! convolution and gated per channel by the global context of the
//! low-resolution (high-level) features; the high-level branch is projected
//! to the output width, upsampled x2 and summed in.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    global_average_pool, global_average_pool_backward, silu, silu_backward, upsample2x,
    upsample2x_backward, Conv2d, InitRng, Linear, NamedParams, NamedParamsMut, UpsampleMode,
};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VgauConfig {
    pub high_channels: usize,
    pub low_channels: usize,
    pub out_channels: usize,
    pub upsample_mode: UpsampleMode,
}

impl VgauConfig {
    pub fn validate(&self) -> Result<()> {
        if self.high_channels == 0 || self.low_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("vgau channel counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VgauBlock {
    pub cfg: VgauConfig,
    /// 3x3 compression of the low-level features.
    pub compress: Conv2d,
    /// Global-context gate on the pooled high-level features.
    pub gate: Linear,
    /// 1x1 projection of the high-level branch to the output width.
    pub project: Conv2d,
}

pub struct VgauCache {
    pooled: Array2<f64>,
    gate_pre: Array2<f64>,
    pub gate: Array2<f64>,
    compressed: FeatureMap,
}

impl VgauBlock {
    pub fn new(cfg: VgauConfig, rng: &mut InitRng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            compress: Conv2d::new(cfg.low_channels, cfg.out_channels, 3, 1, 1, rng),
            gate: Linear::new(cfg.high_channels, cfg.out_channels, rng),
            project: Conv2d::new(cfg.high_channels, cfg.out_channels, 1, 1, 0, rng),
            cfg,
        })
    }

    /// 3x3 / stride 1 / pad 1 channel compression; spatial dims preserved.
    pub fn channel_compress(&self, low: &FeatureMap) -> Result<FeatureMap> {
        if low.shape()[1] != self.cfg.low_channels {
            return Err(Error::Config(format!(
                "vgau compress expects {} channels, got {}",
                self.cfg.low_channels,
                low.shape()[1]
            )));
        }
        Ok(self.compress.forward(low))
    }

    /// `g = silu(linear(gap(high)))`, one gate entry per output channel.
    pub fn global_context_gate(&self, high: &FeatureMap) -> Result<Array2<f64>> {
        if high.shape()[1] != self.cfg.high_channels {
            return Err(Error::Config(format!(
                "vgau gate expects {} channels, got {}",
                self.cfg.high_channels,
                high.shape()[1]
            )));
        }
        let pooled = global_average_pool(high);
        Ok(silu(&self.gate.forward(&pooled)))
    }

    pub fn forward(&self, high: &FeatureMap, low: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_train(high, low)?.0)
    }

    pub fn forward_train(
        &self,
        high: &FeatureMap,
        low: &FeatureMap,
    ) -> Result<(FeatureMap, VgauCache)> {
        check_spatial_ratio(high, low)?;
        if high.shape()[1] != self.cfg.high_channels {
            return Err(Error::Config(format!(
                "vgau expects {} high channels, got {}",
                self.cfg.high_channels,
                high.shape()[1]
            )));
        }
        let compressed = self.channel_compress(low)?;
        let pooled = global_average_pool(high);
        let gate_pre = self.gate.forward(&pooled);
        let gate = silu(&gate_pre);
        let projected = self.project.forward(high);
        let upsampled = upsample2x(&projected, self.cfg.upsample_mode);
        let (b, c, h, w) = (
            compressed.shape()[0],
            compressed.shape()[1],
            compressed.shape()[2],
            compressed.shape()[3],
        );
        let out = Array4::from_shape_fn((b, c, h, w), |(bi, ci, i, j)| {
            upsampled[[bi, ci, i, j]] + gate[[bi, ci]] * compressed[[bi, ci, i, j]]
        });
        let _ = projected;
        Ok((out, VgauCache { pooled, gate_pre, gate, compressed }))
    }

    /// Returns `(grad_high, grad_low)`.
    pub fn backward(
        &mut self,
        high: &FeatureMap,
        low: &FeatureMap,
        cache: &VgauCache,
        gy: &FeatureMap,
    ) -> (FeatureMap, FeatureMap) {
        let (b, c, h, w) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
        // high branch through upsample + projection
        let g_upsampled = gy.to_owned();
        let g_projected = upsample2x_backward(&g_upsampled, self.cfg.upsample_mode);
        let mut g_high = self.project.backward(high, &g_projected);
        // low branch through the gate product
        let g_compressed = Array4::from_shape_fn((b, c, h, w), |(bi, ci, i, j)| {
            gy[[bi, ci, i, j]] * cache.gate[[bi, ci]]
        });
        let g_low = self.compress.backward(low, &g_compressed);
        // gate path
        let mut g_gate = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += gy[[bi, ci, i, j]] * cache.compressed[[bi, ci, i, j]];
                    }
                }
                g_gate[[bi, ci]] = acc;
            }
        }
        let g_gate_pre = silu_backward(&cache.gate_pre, &g_gate);
        let g_pooled = self.gate.backward(&cache.pooled, &g_gate_pre);
        g_high += &global_average_pool_backward(&g_pooled, high.shape()[2], high.shape()[3]);
        (g_high, g_low)
    }

    pub fn named(&self, prefix: &str) -> NamedParams<'_> {
        let mut out = self.compress.named(&format!("{prefix}.compress"));
        out.extend(self.gate.named(&format!("{prefix}.gate")));
        out.extend(self.project.named(&format!("{prefix}.project")));
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> NamedParamsMut<'_> {
        let mut out = self.compress.named_mut(&format!("{prefix}.compress"));
        out.extend(self.gate.named_mut(&format!("{prefix}.gate")));
        out.extend(self.project.named_mut(&format!("{prefix}.project")));
        out
    }
}

fn check_spatial_ratio(high: &FeatureMap, low: &FeatureMap) -> Result<()> {
    let (hh, hw) = (high.shape()[2], high.shape()[3]);
    let (lh, lw) = (low.shape()[2], low.shape()[3]);
    if lh != 2 * hh || lw != 2 * hw {
        return Err(Error::Dimension(format!(
            "vgau needs a 2x spatial ratio: high {hh}x{hw} vs low {lh}x{lw}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use ndarray::Array4;

    fn cfg() -> VgauConfig {
        VgauConfig {
            high_channels: 4,
            low_channels: 4,
            out_channels: 2,
            upsample_mode: UpsampleMode::Nearest,
        }
    }

    #[test]
    fn identity_compress_kernel_passes_input_through() {
        let mut rng = seeded_rng(0);
        let mut block = VgauBlock::new(
            VgauConfig { high_channels: 2, low_channels: 3, out_channels: 3, upsample_mode: UpsampleMode::Nearest },
            &mut rng,
        )
        .unwrap();
        block.compress.weight.value.fill(0.0);
        block.compress.bias.value.fill(0.0);
        for c in 0..3 {
            block.compress.weight.value[[c, (c * 3 + 1) * 3 + 1]] = 1.0;
        }
        let low = Array4::from_shape_fn((1, 3, 4, 4), |(_, c, i, j)| {
            (c * 16 + i * 4 + j) as f64 * 0.1
        });
        let y = block.channel_compress(&low).unwrap();
        assert_eq!(y, low);
    }

    #[test]
    fn compress_shape_contract() {
        let mut rng = seeded_rng(1);
        let block = VgauBlock::new(cfg(), &mut rng).unwrap();
        let low = Array4::<f64>::zeros((1, 4, 8, 8));
        let y = block.channel_compress(&low).unwrap();
        assert_eq!(y.shape(), &[1, 2, 8, 8]);
        // zero kernels, zero bias on a zero input stays zero
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_hand_values() {
        let mut rng = seeded_rng(2);
        let mut block = VgauBlock::new(cfg(), &mut rng).unwrap();
        // zero high features and zero bias: g = silu(0) = 0
        block.gate.bias.value.fill(0.0);
        let high = Array4::<f64>::zeros((1, 4, 2, 2));
        let g = block.global_context_gate(&high).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        // force the linear output to 1: silu(1) = sigma(1) ~= 0.731059
        block.gate.weight.value.fill(0.0);
        block.gate.bias.value.fill(1.0);
        let g = block.global_context_gate(&high).unwrap();
        for v in g.iter() {
            assert!((v - 0.731059).abs() < 1e-5);
        }
    }

    #[test]
    fn gate_invariant_under_spatial_shuffle() {
        let mut rng = seeded_rng(3);
        let block = VgauBlock::new(cfg(), &mut rng).unwrap();
        let high = Array4::from_shape_fn((1, 4, 2, 3), |(_, c, i, j)| {
            (c * 6 + i * 3 + j) as f64 * 0.23 - 0.4
        });
        let mut shuffled = high.clone();
        for c in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    shuffled[[0, c, i, j]] = high[[0, c, 1 - i, (j + 1) % 3]];
                }
            }
        }
        let g1 = block.global_context_gate(&high).unwrap();
        let g2 = block.global_context_gate(&shuffled).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gate_leaves_only_the_upsampled_high_branch() {
        let mut rng = seeded_rng(4);
        let mut block = VgauBlock::new(cfg(), &mut rng).unwrap();
        block.gate.weight.value.fill(0.0);
        block.gate.bias.value.fill(0.0);
        let high = Array4::from_shape_fn((1, 4, 2, 2), |(_, c, i, j)| {
            0.2 * c as f64 + 0.1 * i as f64 - 0.05 * j as f64 + 0.1
        });
        let low = Array4::from_shape_fn((1, 4, 4, 4), |(_, c, i, j)| {
            (c + i + j) as f64 * 0.5
        });
        let out = block.forward(&high, &low).unwrap();
        let expect = upsample2x(&block.project.forward(&high), UpsampleMode::Nearest);
        assert_eq!(out, expect);
    }

    #[test]
    fn zero_high_and_zero_biases_give_zero_output() {
        let mut rng = seeded_rng(5);
        let mut block = VgauBlock::new(cfg(), &mut rng).unwrap();
        block.gate.bias.value.fill(0.0);
        block.project.bias.value.fill(0.0);
        let high = Array4::<f64>::zeros((1, 4, 2, 2));
        let low = Array4::from_elem((1, 4, 4, 4), 3.0);
        let out = block.forward(&high, &low).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_ratio_must_be_two() {
        let mut rng = seeded_rng(6);
        let block = VgauBlock::new(cfg(), &mut rng).unwrap();
        let high = Array4::<f64>::zeros((1, 4, 3, 3));
        let low = Array4::<f64>::zeros((1, 4, 5, 5));
        let err = block.forward(&high, &low).unwrap_err();
        assert!(matches!(err, crate::error::Error::Dimension(_)));
    }

    #[test]
    fn output_shape_follows_low_resolution() {
        let mut rng = seeded_rng(7);
        let block = VgauBlock::new(cfg(), &mut rng).unwrap();
        let high = Array4::<f64>::zeros((2, 4, 3, 5));
        let low = Array4::<f64>::zeros((2, 4, 6, 10));
        let out = block.forward(&high, &low).unwrap();
        assert_eq!(out.shape(), &[2, 2, 6, 10]);
    }

    #[test]
    fn linear_in_low_when_gate_frozen() {
        let mut rng = seeded_rng(8);
        let block = VgauBlock::new(cfg(), &mut rng).unwrap();
        let high = Array4::from_shape_fn((1, 4, 2, 2), |(_, c, i, j)| {
            0.3 * c as f64 - 0.2 * i as f64 + 0.12 * j as f64
        });
        let zero_low = Array4::<f64>::zeros((1, 4, 4, 4));
        let x = Array4::from_shape_fn((1, 4, 4, 4), |(_, c, i, j)| (c + i * j) as f64 * 0.2);
        let y = Array4::from_shape_fn((1, 4, 4, 4), |(_, c, i, j)| ((c * i) as f64 - j as f64) * 0.1);
        // subtract the constant parts (upsample term and compress bias term)
        let base = block.forward(&high, &zero_low).unwrap();
        let term = |m: &FeatureMap| block.forward(&high, m).unwrap() - &base;
        let (a, b) = (0.7, -1.3);
        let mixed = term(&(a * &x + b * &y));
        let combined = a * &term(&x) + b * &term(&y);
        let diff = (&mixed - &combined).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6, "diff {diff}");
    }

    #[test]
    fn vgau_gradients_match_finite_differences() {
        let mut rng = seeded_rng(9);
        let mut block = VgauBlock::new(cfg(), &mut rng).unwrap();
        let high = Array4::from_shape_fn((1, 4, 2, 2), |(_, c, i, j)| {
            0.2 * c as f64 + 0.15 * i as f64 - 0.07 * j as f64 + 0.05
        });
        let low = Array4::from_shape_fn((1, 4, 4, 4), |(_, c, i, j)| {
            -0.1 * c as f64 + 0.04 * (i * 4 + j) as f64
        });
        let proj = Array4::from_shape_fn((1, 2, 4, 4), |(_, c, i, j)| {
            ((c + i + 2 * j) % 5) as f64 * 0.3 - 0.5
        });
        let (_, cache) = block.forward_train(&high, &low).unwrap();
        let (gh, gl) = block.backward(&high, &low, &cache, &proj);
        let eps = 1e-6;
        let objective = |b: &VgauBlock, hi: &FeatureMap, lo: &FeatureMap| {
            (b.forward(hi, lo).unwrap() * &proj).sum()
        };
        for &(c, i, j) in &[(0usize, 0usize, 0usize), (3, 1, 1)] {
            let mut hp = high.clone();
            hp[[0, c, i, j]] += eps;
            let mut hm = high.clone();
            hm[[0, c, i, j]] -= eps;
            let num = (objective(&block, &hp, &low) - objective(&block, &hm, &low)) / (2.0 * eps);
            assert!((gh[[0, c, i, j]] - num).abs() < 1e-8, "high grad");
        }
        for &(c, i, j) in &[(1usize, 2usize, 3usize), (2, 0, 0)] {
            let mut lp = low.clone();
            lp[[0, c, i, j]] += eps;
            let mut lm = low.clone();
            lm[[0, c, i, j]] -= eps;
            let num = (objective(&block, &high, &lp) - objective(&block, &high, &lm)) / (2.0 * eps);
            assert!((gl[[0, c, i, j]] - num).abs() < 1e-8, "low grad");
        }
        for &(o, i) in &[(0usize, 1usize), (1, 3)] {
            let mut bp = block.clone();
            bp.gate.weight.value[[o, i]] += eps;
            let mut bm = block.clone();
            bm.gate.weight.value[[o, i]] -= eps;
            let num = (objective(&bp, &high, &low) - objective(&bm, &high, &low)) / (2.0 * eps);
            assert!((block.gate.weight.grad[[o, i]] - num).abs() < 1e-8, "gate grad");
        }
    }
}

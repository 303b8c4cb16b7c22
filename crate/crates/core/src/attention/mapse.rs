//! The MAPSE block: patch/position embedding, depthwise convolution,
//! multi-scale sliding-window dilated attention, a pointwise MLP, and
//! squeeze-excite recalibration, all wrapped by one residual skip from the
//! block input to the block output.

use serde::{Deserialize, Serialize};

use super::embed::{PatchEmbed, PatchEmbedConfig, PositionEncoding};
use super::se::{SqueezeExcite, SqueezeExciteCache};
use super::swda::{DilatedAttentionConfig, Swda, SwdaCache};
use crate::error::{Error, Result};
use crate::nn::{silu, silu_backward, Conv2d, DwConv2d, InitRng, NamedParams, NamedParamsMut};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapseConfig {
    pub attention: DilatedAttentionConfig,
    pub position_encoding: PositionEncoding,
    /// MLP hidden expansion factor.
    pub mlp_expansion: usize,
    /// Squeeze-excite reduction.
    pub reduction_rho: usize,
}

impl Default for MapseConfig {
    fn default() -> Self {
        Self {
            attention: DilatedAttentionConfig::default(),
            position_encoding: PositionEncoding::Learned,
            mlp_expansion: 2,
            reduction_rho: 4,
        }
    }
}

/// Pointwise two-layer MLP with SiLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

pub struct MlpCache {
    pre: FeatureMap,
    act: FeatureMap,
}

impl Mlp {
    pub fn new(channels: usize, expansion: usize, rng: &mut InitRng) -> Self {
        let hidden = channels * expansion;
        Self {
            fc1: Conv2d::new(channels, hidden, 1, 1, 0, rng),
            fc2: Conv2d::new(hidden, channels, 1, 1, 0, rng),
        }
    }

    pub fn forward_train(&self, x: &FeatureMap) -> (FeatureMap, MlpCache) {
        let pre = self.fc1.forward(x);
        let act = silu(&pre);
        let out = self.fc2.forward(&act);
        (out, MlpCache { pre, act })
    }

    pub fn backward(&mut self, x: &FeatureMap, cache: &MlpCache, gy: &FeatureMap) -> FeatureMap {
        let g_act = self.fc2.backward(&cache.act, gy);
        let g_pre = silu_backward(&cache.pre, &g_act);
        self.fc1.backward(x, &g_pre)
    }

    pub fn named(&self, prefix: &str) -> NamedParams<'_> {
        let mut out = self.fc1.named(&format!("{prefix}.fc1"));
        out.extend(self.fc2.named(&format!("{prefix}.fc2")));
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> NamedParamsMut<'_> {
        let mut out = self.fc1.named_mut(&format!("{prefix}.fc1"));
        out.extend(self.fc2.named_mut(&format!("{prefix}.fc2")));
        out
    }
}

#[derive(Debug, Clone)]
pub struct MapseBlock {
    pub cfg: MapseConfig,
    pub embed: PatchEmbed,
    pub dw: DwConv2d,
    pub swda: Swda,
    pub mlp: Mlp,
    pub se: SqueezeExcite,
    pub channels: usize,
}

pub struct MapseCache {
    embedded: FeatureMap,
    dw_out: FeatureMap,
    swda_cache: SwdaCache,
    swda_out: FeatureMap,
    mlp_cache: MlpCache,
    mlp_out: FeatureMap,
    se_cache: SqueezeExciteCache,
}

impl MapseBlock {
    /// Builds the block for feature maps of `channels x h x w`. Inside the
    /// network the patch size is 1: tokens are feature-map positions.
    pub fn new(channels: usize, h: usize, w: usize, cfg: MapseConfig, rng: &mut InitRng) -> Result<Self> {
        let embed_cfg = PatchEmbedConfig {
            patch_size: 1,
            embed_channels: channels,
            position_encoding: cfg.position_encoding,
        };
        let embed = PatchEmbed::new(embed_cfg, channels, h, w, rng)?;
        let dw = DwConv2d::new(channels, 3, 1, 1, rng);
        let swda = Swda::new(channels, cfg.attention.clone(), rng)?;
        let mlp = Mlp::new(channels, cfg.mlp_expansion, rng);
        let se = SqueezeExcite::new(channels, cfg.reduction_rho, rng)?;
        Ok(Self { cfg, embed, dw, swda, mlp, se, channels })
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_train(x)?.0)
    }

    /// Returns `(block output, branch output)` where
    /// `output = branch + input`.
    pub fn forward_with_branch(&self, x: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        let (out, cache) = self.forward_train(x)?;
        let branch = &out - x;
        let _ = cache;
        Ok((out, branch))
    }

    pub fn forward_train(&self, x: &FeatureMap) -> Result<(FeatureMap, MapseCache)> {
        if x.shape()[1] != self.channels {
            return Err(Error::Config(format!(
                "mapse block expects {} channels, got {}",
                self.channels,
                x.shape()[1]
            )));
        }
        let embedded = self.embed.forward(x)?;
        let dw_out = self.dw.forward(&embedded);
        let (swda_out, swda_cache) = self.swda.forward_train(&dw_out)?;
        let (mlp_out, mlp_cache) = self.mlp.forward_train(&swda_out);
        let (recalibrated, se_cache) = self.se.forward_train(&mlp_out)?;
        let out = &recalibrated + x;
        Ok((
            out,
            MapseCache {
                embedded,
                dw_out,
                swda_cache,
                swda_out,
                mlp_cache,
                mlp_out,
                se_cache,
            },
        ))
    }

    pub fn backward(&mut self, x: &FeatureMap, cache: &MapseCache, gy: &FeatureMap) -> FeatureMap {
        let g_mlp_out = self.se.backward(&cache.mlp_out, &cache.se_cache, gy);
        let g_swda_out = self.mlp.backward(&cache.swda_out, &cache.mlp_cache, &g_mlp_out);
        let g_dw_out = self.swda.backward(&cache.dw_out, &cache.swda_cache, &g_swda_out);
        let g_embedded = self.dw.backward(&cache.embedded, &g_dw_out);
        let mut gx = self.embed.backward(x, &g_embedded);
        gx += gy; // skip connection
        gx
    }

    pub fn named(&self, prefix: &str) -> NamedParams<'_> {
        let mut out = self.embed.named(&format!("{prefix}.embed"));
        out.extend(self.dw.named(&format!("{prefix}.dw")));
        out.extend(self.swda.named(&format!("{prefix}.swda")));
        out.extend(self.mlp.named(&format!("{prefix}.mlp")));
        out.extend(self.se.named(&format!("{prefix}.se")));
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> NamedParamsMut<'_> {
        let mut out = self.embed.named_mut(&format!("{prefix}.embed"));
        out.extend(self.dw.named_mut(&format!("{prefix}.dw")));
        out.extend(self.swda.named_mut(&format!("{prefix}.swda")));
        out.extend(self.mlp.named_mut(&format!("{prefix}.mlp")));
        out.extend(self.se.named_mut(&format!("{prefix}.se")));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use ndarray::Array4;
    use proptest::prelude::*;

    fn tiny_cfg() -> MapseConfig {
        MapseConfig {
            attention: DilatedAttentionConfig {
                taps_k: 3,
                rates: vec![1, 2],
                heads: 2,
                window: 3,
            },
            position_encoding: PositionEncoding::Learned,
            mlp_expansion: 2,
            reduction_rho: 2,
        }
    }

    #[test]
    fn zero_branch_returns_input_exactly() {
        let mut rng = seeded_rng(0);
        let mut block = MapseBlock::new(4, 5, 5, tiny_cfg(), &mut rng).unwrap();
        // zero out the final MLP projection so the branch is identically zero
        block.mlp.fc2.weight.value.fill(0.0);
        block.mlp.fc2.bias.value.fill(0.0);
        let x = Array4::from_shape_fn((2, 4, 5, 5), |(b, c, i, j)| {
            0.31 * b as f64 - 0.2 * c as f64 + 0.11 * i as f64 - 0.05 * j as f64
        });
        let y = block.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn output_minus_branch_equals_input() {
        let mut rng = seeded_rng(5);
        let block = MapseBlock::new(4, 4, 4, tiny_cfg(), &mut rng).unwrap();
        let x = Array4::from_shape_fn((1, 4, 4, 4), |(_, c, i, j)| {
            ((c * 16 + i * 4 + j) % 7) as f64 * 0.2 - 0.6
        });
        let (out, branch) = block.forward_with_branch(&x).unwrap();
        let diff = (&out - &branch - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6);
    }

    #[test]
    fn shape_preserved_and_finite() {
        let mut rng = seeded_rng(1);
        let block = MapseBlock::new(8, 16, 16, MapseConfig::default(), &mut rng).unwrap();
        let x = Array4::from_shape_fn((1, 8, 16, 16), |(_, c, i, j)| {
            ((c + i * j) % 13) as f64 * 0.1 - 0.5
        });
        let y = block.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 8, 16, 16]);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn residual_gradient_flow_is_identity_when_branch_is_zeroed() {
        let mut rng = seeded_rng(2);
        let mut block = MapseBlock::new(4, 4, 4, tiny_cfg(), &mut rng).unwrap();
        block.mlp.fc2.weight.value.fill(0.0);
        block.mlp.fc2.bias.value.fill(0.0);
        // also zero fc1 so the branch gradient contribution vanishes entirely
        block.mlp.fc1.weight.value.fill(0.0);
        block.mlp.fc1.bias.value.fill(0.0);
        let x = Array4::from_shape_fn((1, 4, 4, 4), |(_, c, i, j)| {
            0.2 * c as f64 + 0.1 * i as f64 - 0.03 * j as f64
        });
        let (_, cache) = block.forward_train(&x).unwrap();
        let seed_vec = Array4::from_shape_fn((1, 4, 4, 4), |(_, c, i, j)| {
            ((3 * c + 2 * i + j) % 5) as f64 * 0.25 - 0.4
        });
        let gx = block.backward(&x, &cache, &seed_vec);
        let diff = (&gx - &seed_vec).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6, "jvp should return the seed vector, diff {diff}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn forward_preserves_arbitrary_valid_shapes(
            b in 1usize..3,
            h in 3usize..7,
            w in 3usize..7,
            seed in 0u64..1000,
        ) {
            let mut rng = seeded_rng(seed);
            let block = MapseBlock::new(4, h, w, tiny_cfg(), &mut rng).unwrap();
            let x = Array4::from_shape_fn((b, 4, h, w), |(bi, c, i, j)| {
                ((bi + c * 3 + i * 5 + j * 7) % 11) as f64 * 0.13 - 0.6
            });
            let y = block.forward(&x).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert!(y.iter().all(|v| v.is_finite()));
        }
    }
}

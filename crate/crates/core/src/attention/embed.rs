//! Patch and position embedding for attention tokens.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, InitRng, NamedParams, NamedParamsMut, Param};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionEncoding {
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEmbedConfig {
    pub patch_size: usize,
    pub embed_channels: usize,
    pub position_encoding: PositionEncoding,
}

impl PatchEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be >= 1".into()));
        }
        if self.embed_channels == 0 {
            return Err(Error::Config("embed_channels must be >= 1".into()));
        }
        if self.position_encoding == PositionEncoding::Sinusoidal && self.embed_channels % 4 != 0 {
            return Err(Error::Config(
                "sinusoidal position encoding needs embed_channels divisible by 4".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed sin/cos table, `(c, h, w)`. The first `c/2` channels encode the row
/// index, the rest the column index; within each half, channel `2i` holds
/// `sin(pos * omega_i)` and `2i + 1` holds `cos(pos * omega_i)` with
/// `omega_i = 10000^(-2i / (c/2))`.
pub fn sinusoidal_table(c: usize, h: usize, w: usize) -> Array3<f64> {
    assert_eq!(c % 4, 0, "sinusoidal table needs c divisible by 4");
    let half = c / 2;
    let mut table = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        let (axis_half, within) = if ch < half { (0, ch) } else { (1, ch - half) };
        let pair = within / 2;
        let omega = 10000f64.powf(-2.0 * pair as f64 / half as f64);
        for i in 0..h {
            for j in 0..w {
                let pos = if axis_half == 0 { i as f64 } else { j as f64 };
                let angle = pos * omega;
                table[[ch, i, j]] = if within % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
    }
    table
}

/// Patch projection (a `patch x patch` convolution with stride `patch`) plus
/// an additive position encoding. The learned encoding starts at zero.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub cfg: PatchEmbedConfig,
    pub proj: Conv2d,
    /// Present only for the learned encoding; shape `(embed, h_out, w_out)`.
    pub pos: Option<Param>,
    out_h: usize,
    out_w: usize,
}

impl PatchEmbed {
    pub fn new(
        cfg: PatchEmbedConfig,
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        rng: &mut InitRng,
    ) -> Result<Self> {
        cfg.validate()?;
        check_divisible(in_h, in_w, cfg.patch_size)?;
        let proj = Conv2d::new(in_channels, cfg.embed_channels, cfg.patch_size, cfg.patch_size, 0, rng);
        let (out_h, out_w) = (in_h / cfg.patch_size, in_w / cfg.patch_size);
        let pos = match cfg.position_encoding {
            PositionEncoding::Learned => Some(Param::zeros(&[cfg.embed_channels, out_h, out_w])),
            PositionEncoding::Sinusoidal => None,
        };
        Ok(Self { cfg, proj, pos, out_h, out_w })
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        check_divisible(x.shape()[2], x.shape()[3], self.cfg.patch_size)?;
        let mut y = self.proj.forward(x);
        self.add_positions(&mut y);
        Ok(y)
    }

    fn add_positions(&self, y: &mut FeatureMap) {
        let (b, c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
        match (&self.pos, self.cfg.position_encoding) {
            (Some(p), _) => {
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                y[[bi, ci, i, j]] += p.value[[ci, i, j]];
                            }
                        }
                    }
                }
            }
            (None, PositionEncoding::Sinusoidal) => {
                let table = sinusoidal_table(c, h, w);
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                y[[bi, ci, i, j]] += table[[ci, i, j]];
                            }
                        }
                    }
                }
            }
            (None, PositionEncoding::Learned) => unreachable!(),
        }
    }

    pub fn backward(&mut self, x: &FeatureMap, gy: &FeatureMap) -> FeatureMap {
        if let Some(p) = &mut self.pos {
            let (b, c, h, w) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            p.grad[[ci, i, j]] += gy[[bi, ci, i, j]];
                        }
                    }
                }
            }
        }
        self.proj.backward(x, gy)
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn named(&self, prefix: &str) -> NamedParams<'_> {
        let mut out = self.proj.named(&format!("{prefix}.proj"));
        if let Some(p) = &self.pos {
            out.push((format!("{prefix}.pos"), p));
        }
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> NamedParamsMut<'_> {
        let mut out = self.proj.named_mut(&format!("{prefix}.proj"));
        if let Some(p) = &mut self.pos {
            out.push((format!("{prefix}.pos"), p));
        }
        out
    }
}

fn check_divisible(h: usize, w: usize, patch: usize) -> Result<()> {
    if h % patch != 0 {
        return Err(Error::Dimension(format!(
            "height {h} is not divisible by patch size {patch}"
        )));
    }
    if w % patch != 0 {
        return Err(Error::Dimension(format!(
            "width {w} is not divisible by patch size {patch}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use ndarray::Array4;

    fn cfg(pe: PositionEncoding) -> PatchEmbedConfig {
        PatchEmbedConfig {
            patch_size: 4,
            embed_channels: 16,
            position_encoding: pe,
        }
    }

    #[test]
    fn output_shape_follows_patch_arithmetic() {
        let mut rng = seeded_rng(1);
        let pe = PatchEmbed::new(cfg(PositionEncoding::Learned), 3, 8, 8, &mut rng).unwrap();
        let x = Array4::from_shape_fn((1, 3, 8, 8), |(_, c, i, j)| {
            0.01 * (c * 64 + i * 8 + j) as f64
        });
        let y = pe.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 16, 2, 2]);
    }

    #[test]
    fn zero_input_zero_params_gives_zero_output() {
        let mut rng = seeded_rng(2);
        let pe = PatchEmbed::new(cfg(PositionEncoding::Learned), 3, 8, 8, &mut rng).unwrap();
        // learned positions start at zero and the projection bias is zero
        let x = Array4::<f64>::zeros((1, 3, 8, 8));
        let y = pe.forward(&x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sinusoidal_offset_matches_closed_form() {
        let mut rng = seeded_rng(3);
        let pe = PatchEmbed::new(cfg(PositionEncoding::Sinusoidal), 3, 8, 8, &mut rng).unwrap();
        let x = Array4::from_shape_fn((1, 3, 8, 8), |(_, c, i, j)| {
            ((c + i + j) % 3) as f64 * 0.2 - 0.1
        });
        let y = pe.forward(&x).unwrap();
        let projected = pe.proj.forward(&x);
        // independently evaluated sinusoid: channel 2i is sin(pos * omega),
        // 2i+1 is cos(pos * omega), rows first then columns
        let mut max_diff: f64 = 0.0;
        for ci in 0..16 {
            let half = 8;
            let (is_row, within) = if ci < half { (true, ci) } else { (false, ci - half) };
            let omega = 10000f64.powf(-2.0 * (within / 2) as f64 / half as f64);
            for i in 0..2 {
                for j in 0..2 {
                    let pos = if is_row { i as f64 } else { j as f64 };
                    let angle = pos * omega;
                    let expect = if within % 2 == 0 { angle.sin() } else { angle.cos() };
                    let got = y[[0, ci, i, j]] - projected[[0, ci, i, j]];
                    max_diff = max_diff.max((got - expect).abs());
                }
            }
        }
        assert!(max_diff < 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn non_divisible_dims_name_the_axis() {
        let mut rng = seeded_rng(4);
        let err = PatchEmbed::new(cfg(PositionEncoding::Learned), 3, 8, 9, &mut rng).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("width"), "{msg}");
    }
}

//! Analytic FLOPs accounting.
//!
//! Convention: FLOPs = 2 x multiply-accumulates. Bias additions, activations,
//! elementwise sums, upsampling and softmax are not counted. Attention is
//! counted as `2 * (QK^T + AV)` over the full window (masked taps included,
//! so the count never understates the dense cost); its four pointwise
//! projections are accounted as 1x1 convolutions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerCost {
    Conv { name: String, k: usize, cin: usize, cout: usize, hout: usize, wout: usize },
    DwConv { name: String, k: usize, c: usize, hout: usize, wout: usize },
    Linear { name: String, fin: usize, fout: usize },
    Attention { name: String, positions: usize, taps: usize, channels: usize },
    /// A layer the accountant has no rule for; counting it is an error so a
    /// new layer type can never be silently priced at zero.
    Unsupported { name: String },
}

impl LayerCost {
    pub fn flops(&self) -> Result<u64> {
        match self {
            LayerCost::Conv { k, cin, cout, hout, wout, .. } => {
                Ok(2 * (k * k * cin * cout * hout * wout) as u64)
            }
            LayerCost::DwConv { k, c, hout, wout, .. } => Ok(2 * (k * k * c * hout * wout) as u64),
            LayerCost::Linear { fin, fout, .. } => Ok(2 * (fin * fout) as u64),
            LayerCost::Attention { positions, taps, channels, .. } => {
                // per position and tap: C MACs for QK^T, C MACs for AV
                Ok(2 * 2 * (positions * taps * channels) as u64)
            }
            LayerCost::Unsupported { name } => Err(Error::Accounting(name.clone())),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            LayerCost::Conv { name, .. }
            | LayerCost::DwConv { name, .. }
            | LayerCost::Linear { name, .. }
            | LayerCost::Attention { name, .. }
            | LayerCost::Unsupported { name } => name,
        }
    }
}

/// Sums a cost sheet; fails loudly on any unsupported entry.
pub fn count_flops(sheet: &[LayerCost]) -> Result<u64> {
    let mut total = 0u64;
    for item in sheet {
        total += item.flops()?;
    }
    Ok(total)
}

pub fn to_gflops(flops: u64) -> f64 {
    flops as f64 / 1e9
}

impl Model {
    /// Per-layer cost sheet for a given input size (defaults to the
    /// configured size). Walks the same topology as the forward pass.
    pub fn cost_sheet(&self, input_size: usize) -> Result<Vec<LayerCost>> {
        let cfg = &self.cfg;
        if input_size == 0 || input_size % cfg.strides[2] != 0 {
            return Err(Error::Config(format!(
                "input size {input_size} incompatible with stride {}",
                cfg.strides[2]
            )));
        }
        let mut sheet = Vec::new();
        let mut hw = input_size;
        let stem_layers = ((cfg.strides[0] / 2) as f64).log2() as usize;
        let stem_c = (cfg.stage_channels[0] / 2).max(4);
        let mut cin = 3;
        for i in 0..stem_layers {
            hw /= 2;
            sheet.push(LayerCost::Conv {
                name: format!("backbone.stem{i}"),
                k: 3,
                cin,
                cout: stem_c,
                hout: hw,
                wout: hw,
            });
            cin = stem_c;
        }
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            hw /= 2;
            let p = format!("backbone.stage{i}");
            sheet.push(LayerCost::Conv {
                name: format!("{p}.down"), k: 3, cin, cout: c, hout: hw, wout: hw,
            });
            for b in 1..=2 {
                sheet.push(LayerCost::Conv {
                    name: format!("{p}.block{b}.conv1"), k: 3, cin: c, cout: c, hout: hw, wout: hw,
                });
                sheet.push(LayerCost::Conv {
                    name: format!("{p}.block{b}.conv2"), k: 3, cin: c, cout: c, hout: hw, wout: hw,
                });
            }
            if cfg.use_dsc {
                sheet.push(LayerCost::DwConv {
                    name: format!("{p}.dsc.dw"), k: 3, c, hout: hw, wout: hw,
                });
                sheet.push(LayerCost::Conv {
                    name: format!("{p}.dsc.pw"), k: 1, cin: c, cout: c, hout: hw, wout: hw,
                });
            }
            cin = c;
        }
        let c = &cfg.stage_channels;
        let p5 = input_size / cfg.strides[2];
        let p4 = input_size / cfg.strides[1];
        let p3 = input_size / cfg.strides[0];
        if cfg.use_mapse {
            let m = "backbone.mapse";
            sheet.push(LayerCost::Conv {
                name: format!("{m}.embed"), k: 1, cin: c[2], cout: c[2], hout: p5, wout: p5,
            });
            sheet.push(LayerCost::DwConv {
                name: format!("{m}.dw"), k: 3, c: c[2], hout: p5, wout: p5,
            });
            for proj in ["q", "k", "v", "o"] {
                sheet.push(LayerCost::Conv {
                    name: format!("{m}.swda.{proj}"), k: 1, cin: c[2], cout: c[2], hout: p5, wout: p5,
                });
            }
            sheet.push(LayerCost::Attention {
                name: format!("{m}.swda.attn"),
                positions: p5 * p5,
                taps: cfg.mapse.attention.window * cfg.mapse.attention.window,
                channels: c[2],
            });
            let hidden = c[2] * cfg.mapse.mlp_expansion;
            sheet.push(LayerCost::Conv {
                name: format!("{m}.mlp.fc1"), k: 1, cin: c[2], cout: hidden, hout: p5, wout: p5,
            });
            sheet.push(LayerCost::Conv {
                name: format!("{m}.mlp.fc2"), k: 1, cin: hidden, cout: c[2], hout: p5, wout: p5,
            });
            let se_hidden = c[2] / cfg.mapse.reduction_rho;
            sheet.push(LayerCost::Linear {
                name: format!("{m}.se.w1"), fin: c[2], fout: se_hidden,
            });
            sheet.push(LayerCost::Linear {
                name: format!("{m}.se.w2"), fin: se_hidden, fout: c[2],
            });
        }
        for (fi, (high, low, hw_out)) in [(c[2], c[1], p4), (c[1], c[0], p3)].iter().enumerate() {
            let p = if fi == 0 { "neck.fuse_p4" } else { "neck.fuse_p3" };
            sheet.push(LayerCost::Conv {
                name: format!("{p}.project"),
                k: 1,
                cin: *high,
                cout: *low,
                hout: hw_out / 2,
                wout: hw_out / 2,
            });
            if cfg.use_vgau {
                sheet.push(LayerCost::Conv {
                    name: format!("{p}.compress"), k: 3, cin: *low, cout: *low,
                    hout: *hw_out, wout: *hw_out,
                });
                sheet.push(LayerCost::Linear {
                    name: format!("{p}.gate"), fin: *high, fout: *low,
                });
            }
        }
        let nout = 4 + cfg.num_classes;
        for (i, (ch, hw_out)) in [(c[0], p3), (c[1], p4), (c[2], p5)].iter().enumerate() {
            sheet.push(LayerCost::Conv {
                name: format!("head{i}.conv"), k: 3, cin: *ch, cout: *ch,
                hout: *hw_out, wout: *hw_out,
            });
            sheet.push(LayerCost::Conv {
                name: format!("head{i}.out"), k: 1, cin: *ch, cout: nout,
                hout: *hw_out, wout: *hw_out,
            });
        }
        Ok(sheet)
    }

    /// Total analytic GFLOPs of one forward pass at `input_size`.
    pub fn gflops(&self, input_size: usize) -> Result<f64> {
        Ok(to_gflops(count_flops(&self.cost_sheet(input_size)?)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn hand_counted_reference_layers() {
        // 3x3 conv, cin = cout = 1, 4x4 output: 2 * 9 * 16 = 288
        let conv = LayerCost::Conv {
            name: "ref.conv".into(), k: 3, cin: 1, cout: 1, hout: 4, wout: 4,
        };
        assert_eq!(conv.flops().unwrap(), 288);
        // linear 10 -> 5: 2 * 50 = 100
        let lin = LayerCost::Linear { name: "ref.linear".into(), fin: 10, fout: 5 };
        assert_eq!(lin.flops().unwrap(), 100);
        assert_eq!(count_flops(&[conv, lin]).unwrap(), 388);
    }

    #[test]
    fn doubling_spatial_dims_quadruples_conv_flops() {
        let small = LayerCost::Conv { name: "c".into(), k: 3, cin: 8, cout: 16, hout: 10, wout: 12 };
        let big = LayerCost::Conv { name: "c".into(), k: 3, cin: 8, cout: 16, hout: 20, wout: 24 };
        assert_eq!(big.flops().unwrap(), 4 * small.flops().unwrap());
    }

    #[test]
    fn unsupported_layer_fails_loud() {
        let sheet = vec![
            LayerCost::Linear { name: "ok".into(), fin: 2, fout: 2 },
            LayerCost::Unsupported { name: "mystery_op".into() },
        ];
        let err = count_flops(&sheet).unwrap_err();
        assert!(err.to_string().contains("mystery_op"));
    }

    #[test]
    fn additive_over_composition() {
        let a = vec![LayerCost::Linear { name: "a".into(), fin: 3, fout: 4 }];
        let b = vec![
            LayerCost::Conv { name: "b".into(), k: 1, cin: 4, cout: 4, hout: 2, wout: 2 },
            LayerCost::DwConv { name: "c".into(), k: 3, c: 4, hout: 2, wout: 2 },
        ];
        let joined: Vec<LayerCost> = a.iter().chain(b.iter()).cloned().collect();
        assert_eq!(
            count_flops(&joined).unwrap(),
            count_flops(&a).unwrap() + count_flops(&b).unwrap()
        );
    }

    #[test]
    fn module_toggles_strictly_increase_flops_and_params() {
        let base = ModelConfig {
            use_dsc: false,
            use_mapse: false,
            use_vgau: false,
            ..ModelConfig::default()
        };
        let flops_of = |cfg: &ModelConfig| {
            crate::model::Model::build(cfg, 0).unwrap().gflops(cfg.input_size).unwrap()
        };
        let params_of = |cfg: &ModelConfig| crate::model::Model::build(cfg, 0).unwrap().param_count();
        let f0 = flops_of(&base);
        for toggle in 0..3 {
            let mut cfg = base.clone();
            match toggle {
                0 => cfg.use_dsc = true,
                1 => cfg.use_mapse = true,
                _ => cfg.use_vgau = true,
            }
            assert!(flops_of(&cfg) > f0, "toggle {toggle} must add flops");
            assert!(params_of(&cfg) > params_of(&base), "toggle {toggle} must add params");
        }
    }

    #[test]
    fn ablation_rows_strictly_increase() {
        let rows = [
            (false, true, false),
            (true, true, false),
            (false, true, true),
            (true, true, true),
        ];
        let mut last = 0.0;
        for (dsc, mapse, vgau) in rows {
            let cfg = ModelConfig {
                use_dsc: dsc,
                use_mapse: mapse,
                use_vgau: vgau,
                ..ModelConfig::default()
            };
            let g = crate::model::Model::build(&cfg, 0).unwrap().gflops(512).unwrap();
            assert!(g > last, "row ({dsc},{mapse},{vgau}): {g} <= {last}");
            last = g;
        }
    }
}

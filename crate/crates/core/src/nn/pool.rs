//! Pooling and resampling primitives.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::tensor::FeatureMap;

/// Per-channel mean over all spatial positions: `(B,C,H,W) -> (B,C)`.
pub fn global_average_pool(x: &FeatureMap) -> Array2<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let n = (h * w) as f64;
    let mut out = Array2::<f64>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += x[[bi, ci, i, j]];
                }
            }
            out[[bi, ci]] = acc / n;
        }
    }
    out
}

/// Backward of `global_average_pool`: spreads the gradient uniformly.
pub fn global_average_pool_backward(g: &Array2<f64>, h: usize, w: usize) -> FeatureMap {
    let (b, c) = (g.shape()[0], g.shape()[1]);
    let n = (h * w) as f64;
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| g[[bi, ci]] / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

impl Default for UpsampleMode {
    fn default() -> Self {
        UpsampleMode::Nearest
    }
}

/// x2 spatial upsampling.
pub fn upsample2x(x: &FeatureMap, mode: UpsampleMode) -> FeatureMap {
    match mode {
        UpsampleMode::Nearest => nearest2x(x),
        UpsampleMode::Bilinear => bilinear2x(x),
    }
}

pub fn upsample2x_backward(gy: &FeatureMap, mode: UpsampleMode) -> FeatureMap {
    match mode {
        UpsampleMode::Nearest => nearest2x_backward(gy),
        UpsampleMode::Bilinear => bilinear2x_backward(gy),
    }
}

fn nearest2x(x: &FeatureMap) -> FeatureMap {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    Array4::from_shape_fn((b, c, 2 * h, 2 * w), |(bi, ci, i, j)| {
        x[[bi, ci, i / 2, j / 2]]
    })
}

fn nearest2x_backward(gy: &FeatureMap) -> FeatureMap {
    let (b, c, h2, w2) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    gx[[bi, ci, i / 2, j / 2]] += gy[[bi, ci, i, j]];
                }
            }
        }
    }
    gx
}

/// Bilinear x2 with half-pixel centers (align_corners = false), edge-clamped.
fn bilinear_taps(out_idx: usize, in_len: usize) -> [(usize, f64); 2] {
    let src = (out_idx as f64 + 0.5) / 2.0 - 0.5;
    let i0 = src.floor();
    let t = src - i0;
    let clamp = |v: f64| -> usize { v.max(0.0).min((in_len - 1) as f64) as usize };
    [(clamp(i0), 1.0 - t), (clamp(i0 + 1.0), t)]
}

fn bilinear2x(x: &FeatureMap) -> FeatureMap {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    Array4::from_shape_fn((b, c, 2 * h, 2 * w), |(bi, ci, i, j)| {
        let ys = bilinear_taps(i, h);
        let xs = bilinear_taps(j, w);
        let mut acc = 0.0;
        for (yi, wy) in ys {
            for (xi, wx) in xs {
                acc += wy * wx * x[[bi, ci, yi, xi]];
            }
        }
        acc
    })
}

fn bilinear2x_backward(gy: &FeatureMap) -> FeatureMap {
    let (b, c, h2, w2) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h2 {
                let ys = bilinear_taps(i, h);
                for j in 0..w2 {
                    let xs = bilinear_taps(j, w);
                    let g = gy[[bi, ci, i, j]];
                    for (yi, wy) in ys {
                        for (xi, wx) in xs {
                            gx[[bi, ci, yi, xi]] += g * wy * wx;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// 2x2 average pooling with stride 2 (test helper; inverts nearest2x exactly).
pub fn avg_pool2x(x: &FeatureMap) -> FeatureMap {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    Array4::from_shape_fn((b, c, h / 2, w / 2), |(bi, ci, i, j)| {
        (x[[bi, ci, 2 * i, 2 * j]]
            + x[[bi, ci, 2 * i, 2 * j + 1]]
            + x[[bi, ci, 2 * i + 1, 2 * j]]
            + x[[bi, ci, 2 * i + 1, 2 * j + 1]])
            / 4.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn gap_hand_example() {
        // 1x1x2x2 map [[1,2],[3,4]] -> [2.5]
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = global_average_pool(&x);
        assert_eq!(g[[0, 0]], 2.5);
    }

    #[test]
    fn gap_constant_and_zero() {
        let x = Array4::from_elem((2, 3, 4, 5), 7.25);
        let g = global_average_pool(&x);
        assert!(g.iter().all(|&v| v == 7.25));
        let z = Array4::<f64>::zeros((1, 2, 3, 3));
        assert!(global_average_pool(&z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nearest_upsample_block_replicates() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample2x(&x, UpsampleMode::Nearest);
        let expect = Array4::from_shape_vec(
            (1, 1, 4, 4),
            vec![
                1.0, 1.0, 2.0, 2.0, //
                1.0, 1.0, 2.0, 2.0, //
                3.0, 3.0, 4.0, 4.0, //
                3.0, 3.0, 4.0, 4.0,
            ],
        )
        .unwrap();
        assert_eq!(y, expect);
    }

    #[test]
    fn avg_pool_inverts_nearest_upsample() {
        let x = Array4::from_shape_fn((2, 3, 4, 5), |(b, c, i, j)| {
            (b as f64) - 0.3 * (c as f64) + 0.11 * (i as f64) * (j as f64)
        });
        let y = avg_pool2x(&upsample2x(&x, UpsampleMode::Nearest));
        assert_eq!(y, x);
    }

    #[test]
    fn upsample_backwards_match_finite_differences() {
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let x = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, i, j)| {
                0.2 * c as f64 + 0.1 * i as f64 - 0.05 * j as f64
            });
            let proj = Array4::from_shape_fn((1, 2, 6, 6), |(_, c, i, j)| {
                ((c + i + 2 * j) % 4) as f64 * 0.3 - 0.4
            });
            let gx = upsample2x_backward(&proj, mode);
            let eps = 1e-6;
            for &(c, i, j) in &[(0usize, 0usize, 0usize), (1, 2, 1), (0, 1, 2)] {
                let mut xp = x.clone();
                xp[[0, c, i, j]] += eps;
                let mut xm = x.clone();
                xm[[0, c, i, j]] -= eps;
                let num = ((upsample2x(&xp, mode) * &proj).sum()
                    - (upsample2x(&xm, mode) * &proj).sum())
                    / (2.0 * eps);
                assert!((gx[[0, c, i, j]] - num).abs() < 1e-8, "mode {mode:?}");
            }
        }
    }
}

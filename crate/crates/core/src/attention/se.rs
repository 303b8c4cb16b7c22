//! Squeeze-and-excitation channel recalibration.
//!
//! Gate `g = sigma(W2 . relu(W1 . gap(F)))` is broadcast-multiplied onto the
//! pre-pool feature map, so the block is shape preserving and the downstream
//! residual addition type-checks.

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::nn::{
    global_average_pool, global_average_pool_backward, relu, relu_backward, sigmoid,
    sigmoid_backward_from_output, InitRng, NamedParams, NamedParamsMut, Param, prefixed,
};
use crate::nn::init::kaiming_uniform;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    /// `(c/rho, c)` squeeze matrix.
    pub w1: Param,
    /// `(c, c/rho)` excite matrix.
    pub w2: Param,
    pub channels: usize,
    pub reduction_rho: usize,
}

pub struct SqueezeExciteCache {
    pooled: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    pub gate: Array2<f64>,
}

impl SqueezeExcite {
    pub fn new(channels: usize, reduction_rho: usize, rng: &mut InitRng) -> Result<Self> {
        if reduction_rho == 0 {
            return Err(Error::Config("reduction rho must be >= 1".into()));
        }
        if channels % reduction_rho != 0 {
            return Err(Error::Config(format!(
                "channels ({channels}) not divisible by reduction rho ({reduction_rho})"
            )));
        }
        let hidden = channels / reduction_rho;
        Ok(Self {
            w1: Param::new(kaiming_uniform(rng, &[hidden, channels], channels)),
            w2: Param::new(kaiming_uniform(rng, &[channels, hidden], hidden)),
            channels,
            reduction_rho,
        })
    }

    /// Gate vector for `f`, one entry per channel, each strictly in (0, 1).
    pub fn gate(&self, f: &FeatureMap) -> Result<Array2<f64>> {
        if f.shape()[1] != self.channels {
            return Err(Error::Config(format!(
                "squeeze-excite expects {} channels, got {}",
                self.channels,
                f.shape()[1]
            )));
        }
        let pooled = global_average_pool(f);
        let w1 = self.w1.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w2 = self.w2.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let hidden = relu(&pooled.dot(&w1.t()));
        Ok(sigmoid(&hidden.dot(&w2.t())))
    }

    pub fn forward(&self, f: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_train(f)?.0)
    }

    pub fn forward_train(&self, f: &FeatureMap) -> Result<(FeatureMap, SqueezeExciteCache)> {
        if f.shape()[1] != self.channels {
            return Err(Error::Config(format!(
                "squeeze-excite expects {} channels, got {}",
                self.channels,
                f.shape()[1]
            )));
        }
        let pooled = global_average_pool(f);
        let w1 = self.w1.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w2 = self.w2.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let hidden_pre = pooled.dot(&w1.t());
        let hidden = relu(&hidden_pre);
        let gate = sigmoid(&hidden.dot(&w2.t()));
        let (b, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
        let out = Array4::from_shape_fn((b, c, h, w), |(bi, ci, i, j)| {
            f[[bi, ci, i, j]] * gate[[bi, ci]]
        });
        Ok((out, SqueezeExciteCache { pooled, hidden_pre, hidden, gate }))
    }

    pub fn backward(
        &mut self,
        f: &FeatureMap,
        cache: &SqueezeExciteCache,
        gy: &FeatureMap,
    ) -> FeatureMap {
        let (b, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
        // direct path: out = f * gate
        let mut gf = Array4::from_shape_fn((b, c, h, w), |(bi, ci, i, j)| {
            gy[[bi, ci, i, j]] * cache.gate[[bi, ci]]
        });
        // gate path
        let mut g_gate = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += gy[[bi, ci, i, j]] * f[[bi, ci, i, j]];
                    }
                }
                g_gate[[bi, ci]] = acc;
            }
        }
        let g_pre2 = sigmoid_backward_from_output(&cache.gate, &g_gate);
        let w2 = self.w2.value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        {
            let mut gw2 = self.w2.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            gw2 += &g_pre2.t().dot(&cache.hidden);
        }
        let g_hidden = relu_backward(&cache.hidden_pre, &g_pre2.dot(&w2));
        let w1 = self.w1.value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        {
            let mut gw1 = self.w1.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            gw1 += &g_hidden.t().dot(&cache.pooled);
        }
        let g_pooled = g_hidden.dot(&w1);
        gf += &global_average_pool_backward(&g_pooled, h, w);
        gf
    }

    pub fn named(&self, prefix: &str) -> NamedParams<'_> {
        prefixed(prefix, vec![("w1".into(), &self.w1), ("w2".into(), &self.w2)])
    }

    pub fn named_mut(&mut self, prefix: &str) -> NamedParamsMut<'_> {
        prefixed(prefix, vec![("w1".into(), &mut self.w1), ("w2".into(), &mut self.w2)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use ndarray::Array4;

    #[test]
    fn zero_weights_halve_the_feature_map() {
        let mut rng = seeded_rng(0);
        let mut se = SqueezeExcite::new(4, 4, &mut rng).unwrap();
        se.w1.value.fill(0.0);
        se.w2.value.fill(0.0);
        let f = Array4::from_shape_fn((2, 4, 3, 3), |(b, c, i, j)| {
            (b + c + i + j) as f64 * 0.37 - 1.0
        });
        let (out, cache) = se.forward_train(&f).unwrap();
        assert!(cache.gate.iter().all(|&g| g == 0.5));
        for (o, x) in out.iter().zip(f.iter()) {
            assert_eq!(*o, 0.5 * x);
        }
    }

    #[test]
    fn scalar_case_matches_hand_evaluation() {
        // C = 1, gap(F) = 1, W1 = [[1]], W2 = [[2]]: gate = sigma(2) ~= 0.880797
        let mut rng = seeded_rng(1);
        let mut se = SqueezeExcite::new(1, 1, &mut rng).unwrap();
        se.w1.value.fill(1.0);
        se.w2.value.fill(2.0);
        let f = Array4::from_elem((1, 1, 2, 2), 1.0);
        let (out, cache) = se.forward_train(&f).unwrap();
        assert!((cache.gate[[0, 0]] - 0.880797).abs() < 1e-5);
        for o in out.iter() {
            assert!((o - 0.880797).abs() < 1e-5);
        }
    }

    #[test]
    fn gate_entries_stay_in_open_unit_interval() {
        let mut rng = seeded_rng(2);
        let se = SqueezeExcite::new(8, 4, &mut rng).unwrap();
        let f = Array4::from_shape_fn((1, 8, 4, 4), |(_, c, i, j)| {
            2.0 * ((c as f64) - 3.5) + 0.1 * (i * j) as f64
        });
        let gate = se.gate(&f).unwrap();
        assert!(gate.iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn gate_is_invariant_to_spatial_permutation() {
        let mut rng = seeded_rng(3);
        let se = SqueezeExcite::new(4, 2, &mut rng).unwrap();
        let f = Array4::from_shape_fn((1, 4, 2, 3), |(_, c, i, j)| {
            (c * 7 + i * 3 + j) as f64 * 0.21 - 0.5
        });
        // reverse both spatial axes
        let mut shuffled = f.clone();
        for c in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    shuffled[[0, c, i, j]] = f[[0, c, 1 - i, 2 - j]];
                }
            }
        }
        let g1 = se.gate(&f).unwrap();
        let g2 = se.gate(&shuffled).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn se_gradients_match_finite_differences() {
        let mut rng = seeded_rng(4);
        let mut se = SqueezeExcite::new(4, 2, &mut rng).unwrap();
        let f = Array4::from_shape_fn((2, 4, 3, 3), |(b, c, i, j)| {
            0.2 * b as f64 - 0.1 * c as f64 + 0.05 * i as f64 + 0.02 * j as f64 + 0.3
        });
        let proj = Array4::from_shape_fn((2, 4, 3, 3), |(b, c, i, j)| {
            ((b + c + i + j) % 3) as f64 * 0.4 - 0.3
        });
        let (_, cache) = se.forward_train(&f).unwrap();
        let gf = se.backward(&f, &cache, &proj);
        let eps = 1e-6;
        for &(b, c, i, j) in &[(0usize, 0usize, 0usize, 0usize), (1, 3, 2, 1)] {
            let mut fp = f.clone();
            fp[[b, c, i, j]] += eps;
            let mut fm = f.clone();
            fm[[b, c, i, j]] -= eps;
            let num = ((se.forward(&fp).unwrap() * &proj).sum()
                - (se.forward(&fm).unwrap() * &proj).sum())
                / (2.0 * eps);
            assert!((gf[[b, c, i, j]] - num).abs() < 1e-8);
        }
        for &(r, cc) in &[(0usize, 1usize), (1, 3)] {
            let mut sp = se.clone();
            sp.w1.value[[r, cc]] += eps;
            let mut sm = se.clone();
            sm.w1.value[[r, cc]] -= eps;
            let num = ((sp.forward(&f).unwrap() * &proj).sum()
                - (sm.forward(&f).unwrap() * &proj).sum())
                / (2.0 * eps);
            assert!((se.w1.grad[[r, cc]] - num).abs() < 1e-8);
        }
    }
}

//! Standard and depthwise 2-D convolutions with hand-written backward passes.
//!
//! The standard convolution lowers to a GEMM through im2col; the depthwise
//! variant uses direct loops (its arithmetic intensity is too low for the
//! lowering to pay off at these sizes). Zero padding everywhere.

use ndarray::{Array2, Array4, ArrayView3, ArrayViewMut3};

use super::init::{kaiming_uniform, InitRng};
use super::param::{Param, prefixed, NamedParams, NamedParamsMut};
use crate::tensor::FeatureMap;

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// im2col: unfold `(C, H, W)` into `(C*k*k, Ho*Wo)` with zero padding.
fn im2col(
    x: &ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// col2im: scatter-add the unfolded gradient back onto the input layout.
fn col2im(
    cols: &Array2<f64>,
    mut gx: ArrayViewMut3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (c, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] += cols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

/// Standard convolution, weight layout `(cout, cin*k*k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut InitRng) -> Self {
        let fan_in = cin * k * k;
        Self {
            weight: Param::new(kaiming_uniform(rng, &[cout, fan_in], fan_in)),
            bias: Param::zeros(&[cout]),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_dim(h, self.k, self.stride, self.pad),
            conv_out_dim(w, self.k, self.stride, self.pad),
        )
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (b, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        debug_assert_eq!(x.shape()[1], self.cin);
        let (ho, wo) = self.out_hw(h, w);
        let wmat = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut out = Array4::<f64>::zeros((b, self.cout, ho, wo));
        for bi in 0..b {
            let cols = im2col(&x.index_axis(ndarray::Axis(0), bi), self.k, self.stride, self.pad, ho, wo);
            let y = wmat.dot(&cols); // (cout, ho*wo)
            let mut dst = out.index_axis_mut(ndarray::Axis(0), bi);
            for co in 0..self.cout {
                let bias = self.bias.value[[co]];
                for oy in 0..ho {
                    for ox in 0..wo {
                        dst[[co, oy, ox]] = y[[co, oy * wo + ox]] + bias;
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &FeatureMap, gy: &FeatureMap) -> FeatureMap {
        let (b, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = self.out_hw(h, w);
        debug_assert_eq!(gy.shape(), &[b, self.cout, ho, wo]);
        let wmat = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let mut gx = Array4::<f64>::zeros(x.raw_dim());
        let mut gw = Array2::<f64>::zeros((self.cout, self.cin * self.k * self.k));
        for bi in 0..b {
            let cols = im2col(&x.index_axis(ndarray::Axis(0), bi), self.k, self.stride, self.pad, ho, wo);
            let gyb = gy.index_axis(ndarray::Axis(0), bi);
            let mut gy2 = Array2::<f64>::zeros((self.cout, ho * wo));
            for co in 0..self.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        gy2[[co, oy * wo + ox]] = gyb[[co, oy, ox]];
                    }
                }
            }
            gw += &gy2.dot(&cols.t());
            for co in 0..self.cout {
                self.bias.grad[[co]] += gy2.row(co).sum();
            }
            let gcols = wmat.t().dot(&gy2);
            col2im(&gcols, gx.index_axis_mut(ndarray::Axis(0), bi), self.k, self.stride, self.pad, ho, wo);
        }
        let mut wgrad = self
            .weight
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        wgrad += &gw;
        gx
    }

    pub fn params(&self) -> NamedParams<'_> {
        vec![("w".into(), &self.weight), ("b".into(), &self.bias)]
    }

    pub fn params_mut(&mut self) -> NamedParamsMut<'_> {
        vec![("w".into(), &mut self.weight), ("b".into(), &mut self.bias)]
    }

    pub fn named(&self, prefix: &str) -> NamedParams<'_> {
        prefixed(prefix, self.params())
    }

    pub fn named_mut(&mut self, prefix: &str) -> NamedParamsMut<'_> {
        prefixed(prefix, self.params_mut())
    }
}

/// Depthwise convolution, weight layout `(c, k, k)`, one filter per channel.
#[derive(Debug, Clone)]
pub struct DwConv2d {
    pub weight: Param,
    pub bias: Param,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl DwConv2d {
    pub fn new(c: usize, k: usize, stride: usize, pad: usize, rng: &mut InitRng) -> Self {
        let fan_in = k * k;
        Self {
            weight: Param::new(kaiming_uniform(rng, &[c, k, k], fan_in)),
            bias: Param::zeros(&[c]),
            c,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_dim(h, self.k, self.stride, self.pad),
            conv_out_dim(w, self.k, self.stride, self.pad),
        )
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        debug_assert_eq!(c, self.c);
        let (ho, wo) = self.out_hw(h, w);
        let mut out = Array4::<f64>::zeros((b, c, ho, wo));
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = self.bias.value[[ci]];
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += self.weight.value[[ci, ky, kx]]
                                    * x[[bi, ci, iy as usize, ix as usize]];
                            }
                        }
                        out[[bi, ci, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &FeatureMap, gy: &FeatureMap) -> FeatureMap {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = self.out_hw(h, w);
        let mut gx = Array4::<f64>::zeros(x.raw_dim());
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = gy[[bi, ci, oy, ox]];
                        self.bias.grad[[ci]] += g;
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                self.weight.grad[[ci, ky, kx]] +=
                                    g * x[[bi, ci, iy as usize, ix as usize]];
                                gx[[bi, ci, iy as usize, ix as usize]] +=
                                    g * self.weight.value[[ci, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn named(&self, prefix: &str) -> NamedParams<'_> {
        prefixed(prefix, vec![("w".into(), &self.weight), ("b".into(), &self.bias)])
    }

    pub fn named_mut(&mut self, prefix: &str) -> NamedParamsMut<'_> {
        prefixed(
            prefix,
            vec![("w".into(), &mut self.weight), ("b".into(), &mut self.bias)],
        )
    }
}

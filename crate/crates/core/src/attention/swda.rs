//! Sliding-window dilated attention.
//!
//! Each head attends over a `window x window` neighborhood whose key/value
//! positions are strided by the head-group's dilation rate; out-of-bounds
//! positions are masked out of the softmax. A learnable per-head tap weight
//! (one scalar per axis offset, zero-initialized) is added to the logits, and
//! doubles as the aggregation kernel in the frozen-weight mode that ties the
//! block back to `dilated_gather`.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, InitRng, NamedParams, NamedParamsMut, Param, prefixed};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DilatedAttentionConfig {
    /// Tap count per spatial axis; equals the attention window side.
    pub taps_k: usize,
    /// Dilation rates, strictly increasing; heads are split across them.
    pub rates: Vec<usize>,
    pub heads: usize,
    /// Neighborhood side length (odd).
    pub window: usize,
}

impl Default for DilatedAttentionConfig {
    fn default() -> Self {
        Self {
            taps_k: 7,
            rates: vec![1, 2, 4],
            heads: 4,
            window: 7,
        }
    }
}

impl DilatedAttentionConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.taps_k % 2 == 0 {
            return Err(Error::Config(format!("taps_k must be odd, got {}", self.taps_k)));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd, got {}", self.window)));
        }
        if self.taps_k != self.window {
            return Err(Error::Config(format!(
                "taps_k ({}) must equal the attention window ({})",
                self.taps_k, self.window
            )));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        if channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels ({channels}) not divisible by heads ({})",
                self.heads
            )));
        }
        if self.rates.is_empty() || self.rates[0] == 0 {
            return Err(Error::Config("rates must be non-empty positive integers".into()));
        }
        if !self.rates.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::Config("rates must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Rate assigned to each head: heads split evenly across the rates, any
    /// remainder going to the first (finest) rate.
    pub fn head_rates(&self) -> Vec<usize> {
        let n = self.rates.len();
        let base = self.heads / n;
        let rem = self.heads % n;
        let mut out = Vec::with_capacity(self.heads);
        for (gi, &r) in self.rates.iter().enumerate() {
            let count = base + if gi == 0 { rem } else { 0 };
            out.extend(std::iter::repeat(r).take(count));
        }
        out
    }
}

/// Fixed-weight windowed aggregation with the outer-product kernel
/// `w[iy] * w[ix]` and zero padding; implemented as a direct 2-D loop so it
/// can serve as an independent counterpart to the separable gather.
pub fn frozen_window_aggregate(x: &FeatureMap, rate: usize, w: &[f64]) -> Result<FeatureMap> {
    let k = w.len();
    if k % 2 == 0 {
        return Err(Error::Config(format!("frozen aggregation needs odd tap count, got {k}")));
    }
    let half = (k as isize - 1) / 2;
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Array4::<f64>::zeros((b, c, h, wd));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0;
                    for (iy, &wy) in w.iter().enumerate() {
                        let ty = y as isize + (iy as isize - half) * rate as isize;
                        if ty < 0 || ty >= h as isize {
                            continue;
                        }
                        for (ix, &wx) in w.iter().enumerate() {
                            let tx = xx as isize + (ix as isize - half) * rate as isize;
                            if tx < 0 || tx >= wd as isize {
                                continue;
                            }
                            acc += wy * wx * x[[bi, ci, ty as usize, tx as usize]];
                        }
                    }
                    out[[bi, ci, y, xx]] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Swda {
    pub cfg: DilatedAttentionConfig,
    pub channels: usize,
    pub q_proj: Conv2d,
    pub k_proj: Conv2d,
    pub v_proj: Conv2d,
    pub out_proj: Conv2d,
    /// Per-head additive tap weights, `(heads, taps_k)`, zero-initialized.
    pub tap_w: Param,
    head_rates: Vec<usize>,
}

pub struct SwdaCache {
    pub q: FeatureMap,
    pub k: FeatureMap,
    pub v: FeatureMap,
    /// Softmax weights `(batch, heads, h*w, window*window)`; masked taps are 0.
    pub attn: ndarray::Array4<f64>,
    pub ctx: FeatureMap,
}

impl Swda {
    pub fn new(channels: usize, cfg: DilatedAttentionConfig, rng: &mut InitRng) -> Result<Self> {
        cfg.validate(channels)?;
        let head_rates = cfg.head_rates();
        Ok(Self {
            q_proj: Conv2d::new(channels, channels, 1, 1, 0, rng),
            k_proj: Conv2d::new(channels, channels, 1, 1, 0, rng),
            v_proj: Conv2d::new(channels, channels, 1, 1, 0, rng),
            out_proj: Conv2d::new(channels, channels, 1, 1, 0, rng),
            tap_w: Param::zeros(&[cfg.heads, cfg.taps_k]),
            cfg,
            channels,
            head_rates,
        })
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &FeatureMap) -> Result<(FeatureMap, SwdaCache)> {
        if x.shape()[1] != self.channels {
            return Err(Error::Config(format!(
                "swda expects {} channels, got {}",
                self.channels,
                x.shape()[1]
            )));
        }
        let (b, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let q = self.q_proj.forward(x);
        let k = self.k_proj.forward(x);
        let v = self.v_proj.forward(x);
        let heads = self.cfg.heads;
        let d = self.channels / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let win = self.cfg.window;
        let taps = win * win;
        let half = (win as isize - 1) / 2;
        let mut attn = Array4::<f64>::zeros((b, heads, h * w, taps));
        let mut ctx = Array4::<f64>::zeros((b, self.channels, h, w));
        let mut logits = vec![0.0f64; taps];
        let mut valid = vec![false; taps];
        for bi in 0..b {
            for hd in 0..heads {
                let rate = self.head_rates[hd] as isize;
                let c0 = hd * d;
                for y in 0..h {
                    for xx in 0..w {
                        let mut max_logit = f64::NEG_INFINITY;
                        for iy in 0..win {
                            let ty = y as isize + (iy as isize - half) * rate;
                            for ix in 0..win {
                                let t = iy * win + ix;
                                let tx = xx as isize + (ix as isize - half) * rate;
                                if ty < 0 || ty >= h as isize || tx < 0 || tx >= w as isize {
                                    valid[t] = false;
                                    continue;
                                }
                                valid[t] = true;
                                let (tyu, txu) = (ty as usize, tx as usize);
                                let mut dot = 0.0;
                                for dc in 0..d {
                                    dot += q[[bi, c0 + dc, y, xx]] * k[[bi, c0 + dc, tyu, txu]];
                                }
                                let l = dot * scale
                                    + self.tap_w.value[[hd, iy]]
                                    + self.tap_w.value[[hd, ix]];
                                logits[t] = l;
                                if l > max_logit {
                                    max_logit = l;
                                }
                            }
                        }
                        let mut denom = 0.0;
                        for t in 0..taps {
                            if valid[t] {
                                let e = (logits[t] - max_logit).exp();
                                logits[t] = e;
                                denom += e;
                            }
                        }
                        let p = y * w + xx;
                        for t in 0..taps {
                            if !valid[t] {
                                continue;
                            }
                            let a = logits[t] / denom;
                            attn[[bi, hd, p, t]] = a;
                            let (iy, ix) = (t / win, t % win);
                            let ty = (y as isize + (iy as isize - half) * rate) as usize;
                            let tx = (xx as isize + (ix as isize - half) * rate) as usize;
                            for dc in 0..d {
                                ctx[[bi, c0 + dc, y, xx]] += a * v[[bi, c0 + dc, ty, tx]];
                            }
                        }
                    }
                }
            }
        }
        let out = self.out_proj.forward(&ctx);
        Ok((out, SwdaCache { q, k, v, attn, ctx }))
    }

    pub fn backward(&mut self, x: &FeatureMap, cache: &SwdaCache, gy: &FeatureMap) -> FeatureMap {
        let (b, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let g_ctx = self.out_proj.backward(&cache.ctx, gy);
        let heads = self.cfg.heads;
        let d = self.channels / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let win = self.cfg.window;
        let taps = win * win;
        let half = (win as isize - 1) / 2;
        let mut gq = Array4::<f64>::zeros(cache.q.raw_dim());
        let mut gk = Array4::<f64>::zeros(cache.k.raw_dim());
        let mut gv = Array4::<f64>::zeros(cache.v.raw_dim());
        let mut ga = vec![0.0f64; taps];
        for bi in 0..b {
            for hd in 0..heads {
                let rate = self.head_rates[hd] as isize;
                let c0 = hd * d;
                for y in 0..h {
                    for xx in 0..w {
                        let p = y * w + xx;
                        // d(out)/d(attn_t) and value gradients
                        let mut s = 0.0;
                        for t in 0..taps {
                            let a = cache.attn[[bi, hd, p, t]];
                            if a == 0.0 {
                                ga[t] = 0.0;
                                continue;
                            }
                            let (iy, ix) = (t / win, t % win);
                            let ty = (y as isize + (iy as isize - half) * rate) as usize;
                            let tx = (xx as isize + (ix as isize - half) * rate) as usize;
                            let mut dot = 0.0;
                            for dc in 0..d {
                                let g = g_ctx[[bi, c0 + dc, y, xx]];
                                dot += g * cache.v[[bi, c0 + dc, ty, tx]];
                                gv[[bi, c0 + dc, ty, tx]] += a * g;
                            }
                            ga[t] = dot;
                            s += a * dot;
                        }
                        // softmax backward, then into q, k and tap weights
                        for t in 0..taps {
                            let a = cache.attn[[bi, hd, p, t]];
                            if a == 0.0 {
                                continue;
                            }
                            let gl = a * (ga[t] - s);
                            let (iy, ix) = (t / win, t % win);
                            let ty = (y as isize + (iy as isize - half) * rate) as usize;
                            let tx = (xx as isize + (ix as isize - half) * rate) as usize;
                            for dc in 0..d {
                                gq[[bi, c0 + dc, y, xx]] += gl * scale * cache.k[[bi, c0 + dc, ty, tx]];
                                gk[[bi, c0 + dc, ty, tx]] += gl * scale * cache.q[[bi, c0 + dc, y, xx]];
                            }
                            self.tap_w.grad[[hd, iy]] += gl;
                            self.tap_w.grad[[hd, ix]] += gl;
                        }
                    }
                }
            }
        }
        let mut gx = self.q_proj.backward(x, &gq);
        gx += &self.k_proj.backward(x, &gk);
        gx += &self.v_proj.backward(x, &gv);
        gx
    }

    /// Frozen-weight mode: bypasses q/k softmax and aggregates the projected
    /// values of every head with that head's tap weights at its dilation rate.
    pub fn aggregate_values_frozen(&self, v: &FeatureMap) -> Result<FeatureMap> {
        let heads = self.cfg.heads;
        let d = self.channels / heads;
        let mut out = FeatureMap::zeros(v.raw_dim());
        for hd in 0..heads {
            let w: Vec<f64> = (0..self.cfg.taps_k)
                .map(|i| self.tap_w.value[[hd, i]])
                .collect();
            let slice = v
                .slice(ndarray::s![.., hd * d..(hd + 1) * d, .., ..])
                .to_owned();
            let agg = frozen_window_aggregate(&slice, self.head_rates[hd], &w)?;
            out.slice_mut(ndarray::s![.., hd * d..(hd + 1) * d, .., ..])
                .assign(&agg);
        }
        Ok(out)
    }

    pub fn head_rates(&self) -> &[usize] {
        &self.head_rates
    }

    pub fn named(&self, prefix: &str) -> NamedParams<'_> {
        let mut out = self.q_proj.named(&format!("{prefix}.q"));
        out.extend(self.k_proj.named(&format!("{prefix}.k")));
        out.extend(self.v_proj.named(&format!("{prefix}.v")));
        out.extend(self.out_proj.named(&format!("{prefix}.o")));
        out.extend(prefixed(prefix, vec![("tap_w".into(), &self.tap_w)]));
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> NamedParamsMut<'_> {
        let mut out = self.q_proj.named_mut(&format!("{prefix}.q"));
        out.extend(self.k_proj.named_mut(&format!("{prefix}.k")));
        out.extend(self.v_proj.named_mut(&format!("{prefix}.v")));
        out.extend(self.out_proj.named_mut(&format!("{prefix}.o")));
        out.extend(prefixed(prefix, vec![("tap_w".into(), &mut self.tap_w)]));
        out
    }

    /// Attention FLOPs (QK^T plus AV, both window-restricted), excluding the
    /// four pointwise projections which are accounted as 1x1 convolutions.
    pub fn attention_flops(&self, h: usize, w: usize) -> u64 {
        let taps = (self.cfg.window * self.cfg.window) as u64;
        let n = (h * w) as u64;
        let c = self.channels as u64;
        // per position and tap: C MACs for QK^T and C MACs for AV
        2 * (n * taps * c + n * taps * c)
    }
}

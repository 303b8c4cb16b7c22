//! Anchor-free detection loss: complete-IoU box regression on assigned cells
//! plus binary cross-entropy classification over every cell, with explicit
//! gradients w.r.t. the raw head outputs.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BBox, ModelConfig, RawGrad, RawPrediction, SIZE_LOG_CLAMP};
use crate::nn::sigmoid_scalar;

const ALPHA_EPS: f64 = 1e-9;
const ENCLOSE_EPS: f64 = 1e-12;

/// A ground-truth box in image pixels with its class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetBox {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub box_weight: f64,
    pub cls_weight: f64,
    /// Multiplier on positive classification entries inside the mean.
    pub pos_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { box_weight: 5.0, cls_weight: 1.0, pos_weight: 25.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    /// `box_weight * box_term + cls_weight * cls_term`.
    pub total: f64,
    /// Mean (1 - CIoU) over assigned cells.
    pub box_term: f64,
    /// Weighted mean binary cross-entropy over every (cell, class) entry.
    pub cls_term: f64,
    pub num_assigned: usize,
    /// Ground truths dropped because their cell was already taken.
    pub collisions: usize,
}

/// Complete-IoU loss `1 - IoU + rho^2/c^2 + alpha*v` for a predicted box
/// against a fixed ground truth, with the analytic gradient w.r.t. the four
/// predicted corners. No term is detached: the value is differentiated as
/// written so finite differences agree everywhere off the min/max kinks.
pub fn ciou_loss(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let [px1, py1, px2, py2] = p;
    let [gx1, gy1, gx2, gy2] = g;
    let (pw, ph) = (px2 - px1, py2 - py1);
    let (gw, gh) = (gx2 - gx1, gy2 - gy1);

    // intersection and union
    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };
    let d_iw = [if px1 > gx1 { -1.0 } else { 0.0 }, 0.0, if px2 < gx2 { 1.0 } else { 0.0 }, 0.0];
    let d_ih = [0.0, if py1 > gy1 { -1.0 } else { 0.0 }, 0.0, if py2 < gy2 { 1.0 } else { 0.0 }];
    let mut d_inter = [0.0; 4];
    if overlapping {
        for i in 0..4 {
            d_inter[i] = ih * d_iw[i] + iw * d_ih[i];
        }
    }
    let area_p = pw * ph;
    let d_area = [-ph, -pw, ph, pw];
    let union = area_p + gw * gh - inter;
    let iou = inter / union;
    let mut d_iou = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        d_iou[i] = (d_inter[i] * union - inter * d_union) / (union * union);
    }

    // normalized center distance
    let (pcx, pcy) = ((px1 + px2) / 2.0, (py1 + py2) / 2.0);
    let (gcx, gcy) = ((gx1 + gx2) / 2.0, (gy1 + gy2) / 2.0);
    let rho2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let d_rho2 = [pcx - gcx, pcy - gcy, pcx - gcx, pcy - gcy];
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let c2 = cw * cw + ch * ch + ENCLOSE_EPS;
    let d_cw = [if px1 < gx1 { -1.0 } else { 0.0 }, 0.0, if px2 > gx2 { 1.0 } else { 0.0 }, 0.0];
    let d_ch = [0.0, if py1 < gy1 { -1.0 } else { 0.0 }, 0.0, if py2 > gy2 { 1.0 } else { 0.0 }];
    let mut d_center = [0.0; 4];
    for i in 0..4 {
        let d_c2 = 2.0 * cw * d_cw[i] + 2.0 * ch * d_ch[i];
        d_center[i] = (d_rho2[i] * c2 - rho2 * d_c2) / (c2 * c2);
    }

    // aspect-ratio consistency
    let kappa = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let a_gt = (gw / gh).atan();
    let u = pw / ph;
    let b_pred = u.atan();
    let v = kappa * (a_gt - b_pred).powi(2);
    let db_du = 1.0 / (1.0 + u * u);
    // d u / d(px1, py1, px2, py2)
    let d_u = [-1.0 / ph, pw / (ph * ph), 1.0 / ph, -pw / (ph * ph)];
    let mut d_v = [0.0; 4];
    for i in 0..4 {
        d_v[i] = kappa * 2.0 * (a_gt - b_pred) * (-db_du) * d_u[i];
    }
    let s = (1.0 - iou) + v + ALPHA_EPS;
    let alpha_v = v * v / s;
    let mut d_alpha_v = [0.0; 4];
    for i in 0..4 {
        let d_s = -d_iou[i] + d_v[i];
        d_alpha_v[i] = (2.0 * v * d_v[i] * s - v * v * d_s) / (s * s);
    }

    let loss = 1.0 - iou + rho2 / c2 + alpha_v;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        grad[i] = -d_iou[i] + d_center[i] + d_alpha_v[i];
    }
    (loss, grad)
}

/// Numerically stable binary cross-entropy of a logit against a 0/1 target.
pub fn bce_with_logit(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy)]
struct Assignment {
    image: usize,
    scale: usize,
    cell_y: usize,
    cell_x: usize,
    target: usize,
}

/// Center assignment: each ground truth goes to the cell containing its
/// center at the largest stride not exceeding sqrt(area) (smallest stride if
/// none qualifies). The first ground truth to claim a cell keeps it.
fn assign_targets(
    targets: &[Vec<TargetBox>],
    cfg: &ModelConfig,
    grids: &[(usize, usize)],
) -> (Vec<Assignment>, usize) {
    let mut out = Vec::new();
    let mut collisions = 0usize;
    let mut taken: Vec<std::collections::HashSet<(usize, usize, usize)>> =
        vec![std::collections::HashSet::new(); targets.len()];
    for (image, tlist) in targets.iter().enumerate() {
        for (ti, t) in tlist.iter().enumerate() {
            let side = t.bbox.area().sqrt();
            let mut scale = 0usize;
            for (si, &s) in cfg.strides.iter().enumerate() {
                if (s as f64) <= side {
                    scale = si;
                }
            }
            let stride = cfg.strides[scale] as f64;
            let (gh, gw) = grids[scale];
            let cx = (t.bbox.x1 + t.bbox.x2) / 2.0;
            let cy = (t.bbox.y1 + t.bbox.y2) / 2.0;
            let cell_x = ((cx / stride) as usize).min(gw - 1);
            let cell_y = ((cy / stride) as usize).min(gh - 1);
            if taken[image].insert((scale, cell_y, cell_x)) {
                out.push(Assignment { image, scale, cell_y, cell_x, target: ti });
            } else {
                collisions += 1;
            }
        }
    }
    (out, collisions)
}

/// Loss and its gradient with respect to the raw head outputs.
///
/// Classification: weighted mean BCE over every (image, scale, cell, class)
/// entry, positives scaled by `pos_weight`. Box: mean CIoU loss over assigned
/// cells, differentiated through the sigmoid/exp box decoding (unclipped).
pub fn detection_loss(
    raw: &RawPrediction,
    targets: &[Vec<TargetBox>],
    cfg: &ModelConfig,
    w: &LossWeights,
) -> Result<(LossValue, RawGrad)> {
    let batch = raw.scales[0].shape()[0];
    if targets.len() != batch {
        return Err(Error::Dimension(format!(
            "targets for {} images but batch is {batch}",
            targets.len()
        )));
    }
    let size = cfg.input_size as f64;
    for tlist in targets {
        for t in tlist {
            let b = &t.bbox;
            if !(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= size && b.y2 <= size && b.x2 > b.x1 && b.y2 > b.y1) {
                return Err(Error::Validation(format!(
                    "target box ({}, {}, {}, {}) outside {size}x{size} image",
                    b.x1, b.y1, b.x2, b.y2
                )));
            }
            if t.class_id >= cfg.num_classes {
                return Err(Error::Validation(format!(
                    "target class {} out of range",
                    t.class_id
                )));
            }
        }
    }
    let grids: Vec<(usize, usize)> = raw
        .scales
        .iter()
        .map(|s| (s.shape()[2], s.shape()[3]))
        .collect();
    let (assignments, collisions) = assign_targets(targets, cfg, &grids);
    let mut grad: RawGrad = raw.scales.iter().map(|s| Array4::zeros(s.raw_dim())).collect();

    // classification: every entry is a negative unless an assignment marks it
    let mut positive: std::collections::HashMap<(usize, usize, usize, usize), usize> =
        std::collections::HashMap::new();
    for a in &assignments {
        let class = targets[a.image][a.target].class_id;
        positive.insert((a.image, a.scale, a.cell_y, a.cell_x), class);
    }
    let total_entries: usize = grids.iter().map(|(h, wd)| h * wd).sum::<usize>()
        * batch
        * cfg.num_classes;
    let n = total_entries as f64;
    let mut cls_term = 0.0;
    for (si, scale) in raw.scales.iter().enumerate() {
        let (gh, gw) = grids[si];
        for b in 0..batch {
            for i in 0..gh {
                for j in 0..gw {
                    let pos_class = positive.get(&(b, si, i, j)).copied();
                    for c in 0..cfg.num_classes {
                        let x = scale[[b, 4 + c, i, j]];
                        let t = if pos_class == Some(c) { 1.0 } else { 0.0 };
                        let entry_w = if t == 1.0 { w.pos_weight } else { 1.0 };
                        cls_term += entry_w * bce_with_logit(x, t);
                        grad[si][[b, 4 + c, i, j]] +=
                            w.cls_weight * entry_w * (sigmoid_scalar(x) - t) / n;
                    }
                }
            }
        }
    }
    cls_term /= n;

    // box regression on assigned cells
    let mut box_term = 0.0;
    let denom = assignments.len().max(1) as f64;
    for a in &assignments {
        let scale = &raw.scales[a.scale];
        let stride = cfg.strides[a.scale] as f64;
        let (b, i, j) = (a.image, a.cell_y, a.cell_x);
        let tx = scale[[b, 0, i, j]];
        let ty = scale[[b, 1, i, j]];
        let tw = scale[[b, 2, i, j]].clamp(-SIZE_LOG_CLAMP, SIZE_LOG_CLAMP);
        let th = scale[[b, 3, i, j]].clamp(-SIZE_LOG_CLAMP, SIZE_LOG_CLAMP);
        let sx = sigmoid_scalar(tx);
        let sy = sigmoid_scalar(ty);
        let cx = (j as f64 + sx) * stride;
        let cy = (i as f64 + sy) * stride;
        let bw = tw.exp() * stride;
        let bh = th.exp() * stride;
        let gt = &targets[a.image][a.target].bbox;
        let (l, g) =
            ciou_loss([cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0],
                      [gt.x1, gt.y1, gt.x2, gt.y2]);
        box_term += l;
        let scale_grad = w.box_weight / denom;
        // chain through the decode: x1 = cx - w/2, x2 = cx + w/2, ...
        let d_cx = g[0] + g[2];
        let d_cy = g[1] + g[3];
        let d_w = 0.5 * (g[2] - g[0]);
        let d_h = 0.5 * (g[3] - g[1]);
        let gm = &mut grad[a.scale];
        gm[[b, 0, i, j]] += scale_grad * d_cx * sx * (1.0 - sx) * stride;
        gm[[b, 1, i, j]] += scale_grad * d_cy * sy * (1.0 - sy) * stride;
        gm[[b, 2, i, j]] += scale_grad * d_w * bw;
        gm[[b, 3, i, j]] += scale_grad * d_h * bh;
    }
    box_term /= denom;

    let total = w.box_weight * box_term + w.cls_weight * cls_term;
    if !total.is_finite() {
        return Err(Error::Validation("non-finite loss".into()));
    }
    Ok((
        LossValue { total, box_term, cls_term, num_assigned: assignments.len(), collisions },
        grad,
    ))
}

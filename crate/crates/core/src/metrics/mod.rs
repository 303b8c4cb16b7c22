//! Detection accuracy metrics: IoU, greedy matching, average precision over
//! the 0.50:0.95 threshold sweep, and precision at confidence 0.5.

pub mod fps;

use serde::{Deserialize, Serialize};

use crate::model::{BBox, Detection};

pub use fps::{measure_fps, measure_fps_fn, FpsReport};

/// Intersection over union of two boxes, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Predictions and ground truths for one image.
#[derive(Debug, Clone, Default)]
pub struct EvalImage {
    pub detections: Vec<Detection>,
    pub ground_truths: Vec<GroundTruth>,
}

/// AP integration rule. 101-point interpolated sampling is the default; the
/// exact area under the monotone precision envelope is available as well.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApInterpolation {
    Points101,
    AllPoint,
}

impl Default for ApInterpolation {
    fn default() -> Self {
        ApInterpolation::Points101
    }
}

/// Sorts detection indices by descending score; ties keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    idx
}

/// Greedy matching: in score order, each prediction takes the unmatched
/// same-class ground truth of highest IoU when that IoU reaches `iou_thr`.
/// Returns one TP flag per prediction, in score order.
pub fn match_detections(preds: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> Vec<bool> {
    let order = score_order(preds);
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(preds.len());
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.class_id != p.class_id {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

/// AP from score-ordered TP flags. `None` when there is no ground truth
/// (undefined; the caller excludes it from averages).
pub fn average_precision(flags: &[bool], num_gt: usize, interp: ApInterpolation) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    if flags.is_empty() {
        return Some(0.0);
    }
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // monotone (right-to-left max) precision envelope
    let mut envelope = precisions.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    match interp {
        ApInterpolation::Points101 => {
            let mut acc = 0.0;
            for s in 0..=100 {
                let r = s as f64 / 100.0;
                // first index with recall >= r
                let p = recalls
                    .iter()
                    .position(|&rc| rc >= r - 1e-12)
                    .map_or(0.0, |k| envelope[k]);
                acc += p;
            }
            Some(acc / 101.0)
        }
        ApInterpolation::AllPoint => {
            let mut acc = 0.0;
            let mut prev_r = 0.0;
            for k in 0..flags.len() {
                if flags[k] {
                    acc += (recalls[k] - prev_r) * envelope[k];
                    prev_r = recalls[k];
                }
            }
            Some(acc)
        }
    }
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub map_50_95: f64,
    pub map_50: f64,
    pub precision_at_05: f64,
    pub per_class_ap: Vec<f64>,
}

/// AP for one class at one threshold, pooled over images: per-image greedy
/// matching, then a global precision-recall curve in descending score order
/// (ties broken by image index, then by within-image order).
fn class_ap(
    images: &[EvalImage],
    class_id: usize,
    thr: f64,
    interp: ApInterpolation,
) -> Option<f64> {
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut num_gt = 0usize;
    for (img_idx, img) in images.iter().enumerate() {
        let preds: Vec<Detection> = img
            .detections
            .iter()
            .copied()
            .filter(|d| d.class_id == class_id)
            .collect();
        let gts: Vec<GroundTruth> = img
            .ground_truths
            .iter()
            .copied()
            .filter(|g| g.class_id == class_id)
            .collect();
        num_gt += gts.len();
        let flags = match_detections(&preds, &gts, thr);
        let order = score_order(&preds);
        for (rank, &pi) in order.iter().enumerate() {
            scored.push((preds[pi].score, img_idx, pi, flags[rank]));
        }
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let flags: Vec<bool> = scored.iter().map(|s| s.3).collect();
    average_precision(&flags, num_gt, interp)
}

/// Full accuracy evaluation over a set of images.
pub fn evaluate_detections(
    images: &[EvalImage],
    num_classes: usize,
    interp: ApInterpolation,
) -> AccuracySummary {
    let thresholds = iou_thresholds();
    let mut per_class_ap = vec![0.0; num_classes];
    let mut per_class_defined = vec![false; num_classes];
    let mut per_class_ap50 = vec![None; num_classes];
    for c in 0..num_classes {
        let mut aps = Vec::new();
        for (t_idx, &t) in thresholds.iter().enumerate() {
            if let Some(ap) = class_ap(images, c, t, interp) {
                aps.push(ap);
                if t_idx == 0 {
                    per_class_ap50[c] = Some(ap);
                }
            }
        }
        if !aps.is_empty() {
            per_class_ap[c] = aps.iter().sum::<f64>() / aps.len() as f64;
            per_class_defined[c] = true;
        }
    }
    let mean_over = |vals: Vec<f64>| {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let map_50_95 = mean_over(
        per_class_ap
            .iter()
            .zip(&per_class_defined)
            .filter(|(_, &d)| d)
            .map(|(&v, _)| v)
            .collect(),
    );
    let map_50 = mean_over(per_class_ap50.iter().flatten().copied().collect());
    AccuracySummary {
        map_50_95,
        map_50,
        precision_at_05: precision_at_conf(images, 0.5),
        per_class_ap,
    }
}

/// Convenience single-collection form of the threshold-sweep mAP.
pub fn map_50_95(
    preds: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
) -> AccuracySummary {
    let image = EvalImage { detections: preds.to_vec(), ground_truths: gts.to_vec() };
    evaluate_detections(&[image], num_classes, ApInterpolation::Points101)
}

/// TP / (TP + FP) over predictions with score >= `conf`, matched per class
/// and per image at IoU 0.5. Zero when nothing survives the threshold.
pub fn precision_at_conf(images: &[EvalImage], conf: f64) -> f64 {
    let mut tp = 0usize;
    let mut total = 0usize;
    for img in images {
        let classes: std::collections::BTreeSet<usize> =
            img.detections.iter().map(|d| d.class_id).collect();
        for c in classes {
            let preds: Vec<Detection> = img
                .detections
                .iter()
                .copied()
                .filter(|d| d.class_id == c && d.score >= conf)
                .collect();
            if preds.is_empty() {
                continue;
            }
            let gts: Vec<GroundTruth> = img
                .ground_truths
                .iter()
                .copied()
                .filter(|g| g.class_id == c)
                .collect();
            let flags = match_detections(&preds, &gts, 0.5);
            tp += flags.iter().filter(|&&f| f).count();
            total += preds.len();
        }
    }
    if total == 0 {
        0.0
    } else {
        tp as f64 / total as f64
    }
}

/// The four Table-style report columns plus the per-class AP breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map_50_95: f64,
    pub map_50: f64,
    pub precision_at_05: f64,
    pub gflops: f64,
    pub fps: f64,
    pub per_class_ap: Vec<f64>,
}

impl MetricsReport {
    pub fn validate(&self) -> crate::Result<()> {
        let rates = [self.map_50_95, self.map_50, self.precision_at_05];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(crate::Error::Validation("metric rate outside [0,1]".into()));
        }
        if self.map_50_95 > self.map_50 + 1e-12 {
            return Err(crate::Error::Validation(
                "map_50_95 cannot exceed map_50".into(),
            ));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("map_50_95,map_50,precision_at_05,gflops,fps,per_class_ap\n");
        let ap = self
            .per_class_ap
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(";");
        s.push_str(&format!(
            "{:.6},{:.6},{:.6},{:.6},{:.3},{}\n",
            self.map_50_95, self.map_50, self.precision_at_05, self.gflops, self.fps, ap
        ));
        s
    }

    pub fn table(&self) -> String {
        format!(
            "{:<12} {:<12} {:<10} {:<8}\n{:<12.4} {:<12.4} {:<10.3} {:<8.1}",
            "mAP", "Pre", "FLOPs(G)", "FPS",
            self.map_50_95, self.precision_at_05, self.gflops, self.fps
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, score: f64) -> Detection {
        Detection { bbox: BBox::new(x1, y1, x2, y2), class_id, score }
    }

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> GroundTruth {
        GroundTruth { bbox: BBox::new(x1, y1, x2, y2), class_id }
    }

    #[test]
    fn iou_reference_values() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(5.0, 5.0, 7.0, 7.0);
        assert_eq!(iou(&a, &b), 0.0);
        let c = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert_eq!(iou(&a, &c), 1.0 / 7.0);
    }

    #[test]
    fn matching_single_and_double_predictions() {
        let g = vec![gt(0.0, 0.0, 10.0, 10.0, 1)];
        let p = vec![det(0.0, 0.0, 10.0, 10.0, 1, 0.9)];
        assert_eq!(match_detections(&p, &g, 0.5), vec![true]);
        let p2 = vec![
            det(0.0, 0.0, 10.0, 10.0, 1, 0.9),
            det(0.5, 0.5, 10.0, 10.0, 1, 0.8),
        ];
        assert_eq!(match_detections(&p2, &g, 0.5), vec![true, false]);
    }

    #[test]
    fn ap_perfect_and_empty() {
        assert_eq!(
            average_precision(&[true, true], 2, ApInterpolation::Points101),
            Some(1.0)
        );
        assert_eq!(average_precision(&[], 3, ApInterpolation::Points101), Some(0.0));
        assert_eq!(average_precision(&[], 0, ApInterpolation::Points101), None);
    }

    #[test]
    fn ap_101_close_to_exact_integration() {
        // flags [TP, FP, TP] with 2 ground truths:
        // exact area = 0.5 * 1 + 0.5 * (2/3) = 0.8333...
        let flags = [true, false, true];
        let exact = average_precision(&flags, 2, ApInterpolation::AllPoint).unwrap();
        assert!((exact - (0.5 + 0.5 * (2.0 / 3.0))).abs() < 1e-12);
        let sampled = average_precision(&flags, 2, ApInterpolation::Points101).unwrap();
        assert!((sampled - exact).abs() < 0.01, "101-point {sampled} vs exact {exact}");
    }

    #[test]
    fn map_perfect_predictions_and_empty() {
        let gts = vec![gt(0.0, 0.0, 4.0, 4.0, 0), gt(8.0, 8.0, 12.0, 12.0, 2)];
        let preds = vec![
            det(0.0, 0.0, 4.0, 4.0, 0, 1.0),
            det(8.0, 8.0, 12.0, 12.0, 2, 1.0),
        ];
        let m = map_50_95(&preds, &gts, 3);
        assert_eq!(m.map_50_95, 1.0);
        assert_eq!(m.map_50, 1.0);
        assert_eq!(m.precision_at_05, 1.0);
        let empty = map_50_95(&[], &gts, 3);
        assert_eq!(empty.map_50_95, 0.0);
        assert_eq!(empty.precision_at_05, 0.0);
    }

    #[test]
    fn precision_examples() {
        let gts = vec![gt(0.0, 0.0, 4.0, 4.0, 0)];
        // 1 TP and 1 FP above threshold
        let imgs = [EvalImage {
            detections: vec![
                det(0.0, 0.0, 4.0, 4.0, 0, 0.9),
                det(20.0, 20.0, 24.0, 24.0, 0, 0.8),
            ],
            ground_truths: gts.clone(),
        }];
        assert_eq!(precision_at_conf(&imgs, 0.5), 0.5);
        // everything below confidence
        let imgs = [EvalImage {
            detections: vec![det(0.0, 0.0, 4.0, 4.0, 0, 0.3)],
            ground_truths: gts,
        }];
        assert_eq!(precision_at_conf(&imgs, 0.5), 0.0);
    }

    #[test]
    fn map_never_exceeds_map50_and_duplicates_never_help() {
        let gts = vec![gt(0.0, 0.0, 6.0, 6.0, 0), gt(10.0, 0.0, 15.0, 5.0, 1)];
        let preds = vec![
            det(0.2, 0.1, 6.2, 6.3, 0, 0.9),
            det(10.0, 0.0, 14.0, 5.0, 1, 0.7),
        ];
        let m = map_50_95(&preds, &gts, 3);
        assert!(m.map_50_95 <= m.map_50 + 1e-12);
        let mut with_dup = preds.clone();
        with_dup.push(det(0.2, 0.1, 6.2, 6.3, 0, 0.95)); // duplicate, outranks TP
        let m2 = map_50_95(&with_dup, &gts, 3);
        assert!(m2.map_50_95 <= m.map_50_95 + 1e-12);
        assert!(m2.precision_at_05 <= m.precision_at_05 + 1e-12);
    }

    #[test]
    fn evaluation_invariant_to_input_order() {
        let imgs = [EvalImage {
            detections: vec![
                det(0.0, 0.0, 5.0, 5.0, 0, 0.8),
                det(1.0, 1.0, 6.0, 6.0, 0, 0.6),
                det(10.0, 10.0, 15.0, 15.0, 1, 0.9),
            ],
            ground_truths: vec![gt(0.0, 0.0, 5.0, 5.0, 0), gt(10.0, 10.0, 15.0, 15.0, 1)],
        }];
        let mut rev = imgs[0].clone();
        rev.detections.reverse();
        rev.ground_truths.reverse();
        let a = evaluate_detections(&imgs, 3, ApInterpolation::Points101);
        let b = evaluate_detections(&[rev], 3, ApInterpolation::Points101);
        assert_eq!(a, b);
    }
}

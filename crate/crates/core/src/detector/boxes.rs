//! Anchors, box encoding, anchor matching and non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};

/// Cap on decoded log-scale deltas so `exp` stays finite.
const MAX_LOG_SCALE: f64 = 4.135; // ln(62.5)

/// One square anchor of side `size` centred on every cell of an `(h, w)` map with `stride`.
/// Row-major cell order.
pub fn level_anchors(h: usize, w: usize, stride: f64, size: f64) -> Vec<BBox> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            out.push(BBox::new(cx - size / 2.0, cy - size / 2.0, size, size));
        }
    }
    out
}

/// `(dx, dy, log dw, log dh)` of `gt` relative to `anchor`.
pub fn encode(gt: &BBox, anchor: &BBox) -> [f64; 4] {
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    [
        (gx - ax) / anchor.w,
        (gy - ay) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

pub fn decode(delta: [f64; 4], anchor: &BBox) -> BBox {
    let (ax, ay) = anchor.center();
    let cx = ax + delta[0] * anchor.w;
    let cy = ay + delta[1] * anchor.h;
    let w = anchor.w * delta[2].min(MAX_LOG_SCALE).exp();
    let h = anchor.h * delta[3].min(MAX_LOG_SCALE).exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
}

/// Assigned gt index per anchor, `None` for negatives.
///
/// An anchor is positive when its IoU with some gt reaches `positive_iou`, and is assigned to
/// the gt of highest IoU (lowest index on ties). Each gt's best anchor (lowest index on ties)
/// is then forced positive and assigned to that gt, later gts overriding earlier ones.
pub fn match_anchors(anchors: &[BBox], gts: &[BBox], positive_iou: f64) -> Vec<Option<usize>> {
    let mut labels = vec![None; anchors.len()];
    if gts.is_empty() {
        return labels;
    }
    let mut best_anchor = vec![(0usize, f64::NEG_INFINITY); gts.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best_anchor[gi].1 {
                best_anchor[gi] = (a, v);
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            if v >= positive_iou {
                labels[a] = Some(gi);
            }
        }
    }
    for (gi, &(a, _)) in best_anchor.iter().enumerate() {
        if !anchors.is_empty() {
            labels[a] = Some(gi);
        }
    }
    labels
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
}

/// Indices sorted by descending score, ties by index.
pub fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy suppression: visits boxes by descending score (ties by position) and drops any box
/// whose IoU with an already kept box exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in score_order(dets.iter().map(|d| d.score)) {
        let d = &dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d.clone());
        }
    }
    kept
}

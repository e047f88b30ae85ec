//! Detection metrics: IoU, greedy matching, all-point interpolated AP, and the
//! AP / AP50 / AP75 / APm / APl report, plus an independent brute-force oracle.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use crate::bbox::iou;
use crate::bbox::BBox;
use crate::detector::{score_order, Detection};

/// IoU thresholds averaged into AP: 0.50 to 0.90 in steps of 0.05.
pub const IOU_THRESHOLDS: [f64; 9] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90];

/// Inclusive bounds of the medium bucket, in square pixels.
pub const MEDIUM_AREA: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AreaRange {
    All,
    Medium,
    Large,
}

impl AreaRange {
    pub fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Medium => area >= MEDIUM_AREA.0 && area <= MEDIUM_AREA.1,
            AreaRange::Large => area > MEDIUM_AREA.1,
        }
    }
}

/// Outcome of one detection after matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    /// Matched a ground truth outside the area range under evaluation.
    Ignored,
}

/// Matches detections (already in descending score order) of one image to its ground
/// truths. Each detection takes the unmatched gt of highest IoU at or above `iou_thresh`,
/// lowest index on ties; each gt is matched at most once.
pub fn match_greedy(dets: &[BBox], gts: &[BBox], iou_thresh: f64) -> Vec<bool> {
    let ignore = vec![false; gts.len()];
    match_with_ignore(dets, gts, &ignore, iou_thresh)
        .into_iter()
        .map(|f| f == MatchFlag::TruePositive)
        .collect()
}

/// As [`match_greedy`], with ignorable gts: a detection prefers a regular gt and falls back
/// to an ignorable one, in which case it is neither a hit nor a false alarm.
fn match_with_ignore(
    dets: &[BBox],
    gts: &[BBox],
    ignore: &[bool],
    iou_thresh: f64,
) -> Vec<MatchFlag> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut pick: Option<(usize, f64)> = None;
            for pass_ignored in [false, true] {
                for (j, g) in gts.iter().enumerate() {
                    if taken[j] || ignore[j] != pass_ignored {
                        continue;
                    }
                    let v = iou(d, g);
                    if v >= iou_thresh && pick.is_none_or(|(_, b)| v > b) {
                        pick = Some((j, v));
                    }
                }
                if pick.is_some() {
                    break;
                }
            }
            match pick {
                Some((j, _)) => {
                    taken[j] = true;
                    if ignore[j] {
                        MatchFlag::Ignored
                    } else {
                        MatchFlag::TruePositive
                    }
                }
                None => MatchFlag::FalsePositive,
            }
        })
        .collect()
}

/// One point per ranked detection that is not ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub iou_thresh: f64,
    pub num_gt: usize,
    pub points: Vec<PrPoint>,
    pub tp: usize,
    pub fp: usize,
}

impl PrCurve {
    pub fn false_negatives(&self) -> usize {
        self.num_gt - self.tp
    }

    /// All-point interpolation: `Σ (r_i - r_{i-1}) * max_{j >= i} p_j` over points where
    /// recall increases. `None` when there is no ground truth.
    pub fn average_precision(&self) -> Option<f64> {
        if self.num_gt == 0 {
            return None;
        }
        let n = self.points.len();
        let mut envelope = vec![0.0; n];
        let mut run = 0.0f64;
        for i in (0..n).rev() {
            run = run.max(self.points[i].precision);
            envelope[i] = run;
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for (p, env) in self.points.iter().zip(&envelope) {
            if p.recall > prev {
                ap += (p.recall - prev) * env;
                prev = p.recall;
            }
        }
        Some(ap)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,score,recall,precision\n");
        for (i, p) in self.points.iter().enumerate() {
            writeln!(
                s,
                "{},{:.17e},{:.17e},{:.17e}",
                i + 1,
                p.score,
                p.recall,
                p.precision
            )
            .expect("write to string");
        }
        s
    }
}

fn group_gts(gts: &[GroundTruth]) -> HashMap<&str, Vec<BBox>> {
    let mut by_image: HashMap<&str, Vec<BBox>> = HashMap::new();
    for g in gts {
        by_image
            .entry(g.image_id.as_str())
            .or_default()
            .push(g.bbox);
    }
    by_image
}

/// Precision/recall over the pooled detections of all images, ranked by descending score
/// with ties broken by input position.
pub fn pr_curve(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
    range: AreaRange,
) -> PrCurve {
    let by_image = group_gts(gts);
    let num_gt = gts.iter().filter(|g| range.contains(g.bbox.area())).count();
    let order = score_order(dets.iter().map(|d| d.score));
    // match per image in global rank order
    let mut per_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for &i in &order {
        per_image
            .entry(dets[i].image_id.as_str())
            .or_default()
            .push(i);
    }
    let mut flags = vec![MatchFlag::FalsePositive; dets.len()];
    for (image, idx) in &per_image {
        let empty = Vec::new();
        let g = by_image.get(image).unwrap_or(&empty);
        let ignore: Vec<bool> = g.iter().map(|b| !range.contains(b.area())).collect();
        let boxes: Vec<BBox> = idx.iter().map(|&i| dets[i].bbox).collect();
        for (&i, f) in idx
            .iter()
            .zip(match_with_ignore(&boxes, g, &ignore, iou_thresh))
        {
            flags[i] = f;
        }
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(dets.len());
    for &i in &order {
        match flags[i] {
            MatchFlag::Ignored => continue,
            MatchFlag::TruePositive => tp += 1,
            MatchFlag::FalsePositive => fp += 1,
        }
        points.push(PrPoint {
            score: dets[i].score,
            recall: if num_gt == 0 {
                0.0
            } else {
                tp as f64 / num_gt as f64
            },
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    PrCurve {
        iou_thresh,
        num_gt,
        points,
        tp,
        fp,
    }
}

/// AP at one IoU threshold over all boxes; 0 when there are ground truths but no hits.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Option<f64> {
    pr_curve(dets, gts, iou_thresh, AreaRange::All).average_precision()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub apm: Option<f64>,
    pub apl: Option<f64>,
    /// One curve per entry of [`IOU_THRESHOLDS`], all sizes.
    pub curves: Vec<PrCurve>,
}

impl EvalReport {
    pub fn metrics(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("AP", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("APm", self.apm),
            ("APl", self.apl),
        ]
    }

    /// `metric,value` rows; absent metrics are written as `NA`. TP/FP/FN are at IoU 0.5.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (name, v) in self.metrics() {
            match v {
                Some(v) => writeln!(s, "{name},{v:.17e}"),
                None => writeln!(s, "{name},NA"),
            }
            .expect("write to string");
        }
        let c = &self.curves[0];
        writeln!(s, "TP,{}\nFP,{}\nFN,{}", c.tp, c.fp, c.false_negatives())
            .expect("write to string");
        s
    }
}

fn mean_ap(dets: &[Detection], gts: &[GroundTruth], range: AreaRange) -> Option<f64> {
    let mut sum = 0.0;
    for &t in &IOU_THRESHOLDS {
        sum += pr_curve(dets, gts, t, range).average_precision()?;
    }
    Some(sum / IOU_THRESHOLDS.len() as f64)
}

pub fn evaluate(dets: &[Detection], gts: &[GroundTruth]) -> EvalReport {
    let curves: Vec<PrCurve> = IOU_THRESHOLDS
        .iter()
        .map(|&t| pr_curve(dets, gts, t, AreaRange::All))
        .collect();
    let at = |t: f64| {
        let i = IOU_THRESHOLDS
            .iter()
            .position(|&x| x == t)
            .expect("threshold in list");
        curves[i].average_precision()
    };
    EvalReport {
        ap: mean_ap(dets, gts, AreaRange::All),
        ap50: at(0.50),
        ap75: at(0.75),
        apm: mean_ap(dets, gts, AreaRange::Medium),
        apl: mean_ap(dets, gts, AreaRange::Large),
        curves: curves.clone(),
    }
}

/// Reference AP by explicit enumeration of score cutoffs: for every prefix of the ranking,
/// the matching is recomputed from scratch and its precision and recall recorded.
pub fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Option<f64> {
    oracle_ap_in(dets, gts, iou_thresh, AreaRange::All)
}

pub fn oracle_ap_in(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
    range: AreaRange,
) -> Option<f64> {
    let num_gt = gts.iter().filter(|g| range.contains(g.bbox.area())).count();
    if num_gt == 0 {
        return None;
    }
    // rank: selection of the best remaining (score desc, index asc)
    let mut rank: Vec<usize> = Vec::with_capacity(dets.len());
    let mut used = vec![false; dets.len()];
    for _ in 0..dets.len() {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if used[i] {
                continue;
            }
            best = match best {
                Some(b) if dets[b].score >= dets[i].score => Some(b),
                _ => Some(i),
            };
        }
        let b = best.expect("a remaining detection");
        used[b] = true;
        rank.push(b);
    }
    // (recall, precision) after each non-ignored cutoff
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for k in 1..=rank.len() {
        let prefix = &rank[..k];
        let mut gt_taken = vec![false; gts.len()];
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut last_ignored = false;
        for &d in prefix {
            let candidates = |ignored: bool, taken: &[bool]| {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gts.iter().enumerate() {
                    if g.image_id != dets[d].image_id
                        || taken[j]
                        || range.contains(g.bbox.area()) == ignored
                    {
                        continue;
                    }
                    let v = iou(&dets[d].bbox, &g.bbox);
                    if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
                best
            };
            last_ignored = false;
            if let Some((j, _)) = candidates(false, &gt_taken) {
                gt_taken[j] = true;
                tp += 1;
            } else if let Some((j, _)) = candidates(true, &gt_taken) {
                gt_taken[j] = true;
                last_ignored = true;
            } else {
                fp += 1;
            }
        }
        if !last_ignored {
            pts.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..pts.len() {
        if pts[i].0 > prev {
            let env = pts[i..].iter().map(|p| p.1).fold(0.0f64, f64::max);
            ap += (pts[i].0 - prev) * env;
            prev = pts[i].0;
        }
    }
    Some(ap)
}

/// The report computed from [`oracle_ap_in`] alone.
pub fn oracle_report(dets: &[Detection], gts: &[GroundTruth]) -> EvalReport {
    let mean = |range: AreaRange| -> Option<f64> {
        let mut sum = 0.0;
        for &t in &IOU_THRESHOLDS {
            sum += oracle_ap_in(dets, gts, t, range)?;
        }
        Some(sum / IOU_THRESHOLDS.len() as f64)
    };
    EvalReport {
        ap: mean(AreaRange::All),
        ap50: oracle_ap(dets, gts, 0.50),
        ap75: oracle_ap(dets, gts, 0.75),
        apm: mean(AreaRange::Medium),
        apl: mean(AreaRange::Large),
        curves: Vec::new(),
    }
}

//! Detection metrics: per-class average precision (all-point
//! interpolation), mAP at an IoU threshold, COCO-style mAP over
//! `0.50:0.05:0.95`, and CorLoc.
//!
//! A detection matches a ground-truth box only when their IoU is strictly
//! greater than the threshold. Detections are processed by descending
//! score, ties broken by image id and then by box coordinates, and each
//! takes the highest-IoU ground truth that is still unmatched.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, GroundTruth};

pub const COCO_THRESHOLDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// `(50 + 5i) / 100` for `i` in `0..10`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..COCO_THRESHOLDS).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Detection order used everywhere: score descending, then image id, then
/// box.
pub fn rank_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indices into the input detections, in processing order.
    pub order: Vec<usize>,
    /// TP flag per entry of `order`.
    pub tp: Vec<bool>,
    /// Per image (input order), per ground-truth object of the class.
    pub gt_matched: Vec<Vec<bool>>,
    pub num_gt: usize,
}

/// Greedy matching of one class's detections.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], class: usize, thr: f64) -> MatchResult {
    let image_index: HashMap<&str, usize> =
        gts.iter().enumerate().map(|(i, g)| (g.image_id.as_str(), i)).collect();
    let class_boxes: Vec<Vec<BBox>> = gts
        .iter()
        .map(|g| g.objects.iter().filter(|o| o.class == class).map(|o| o.bbox).collect())
        .collect();
    let num_gt = class_boxes.iter().map(Vec::len).sum();
    let mut gt_matched: Vec<Vec<bool>> = class_boxes.iter().map(|b| vec![false; b.len()]).collect();

    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == class).collect();
    order.sort_by(|&a, &b| rank_cmp(&dets[a], &dets[b]).then(a.cmp(&b)));

    let tp = order
        .iter()
        .map(|&d| {
            let det = &dets[d];
            let Some(&img) = image_index.get(det.image_id.as_str()) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in class_boxes[img].iter().enumerate() {
                if gt_matched[img][j] {
                    continue;
                }
                let v = det.bbox.iou(gt);
                if v > thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    gt_matched[img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    MatchResult {
        order,
        tp,
        gt_matched,
        num_gt,
    }
}

/// Area under the monotone precision envelope of a ranked TP/FP sequence.
pub fn ap_from_flags(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_rec = 0.0;
    for i in 0..prec.len() {
        if rec[i] > prev_rec {
            ap += (rec[i] - prev_rec) * prec[i];
            prev_rec = rec[i];
        }
    }
    ap
}

/// `None` when the class has no ground truth.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], class: usize, thr: f64) -> Option<f64> {
    let m = match_detections(dets, gts, class, thr);
    (m.num_gt > 0).then(|| ap_from_flags(&m.tp, m.num_gt))
}

/// Classes with at least one ground-truth object, ascending.
pub fn classes_with_gt(gts: &[GroundTruth]) -> Vec<usize> {
    let mut c: Vec<usize> = gts.iter().flat_map(|g| g.objects.iter().map(|o| o.class)).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Per-class AP at `thr` for every class present in the ground truth.
pub fn per_class_ap(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> BTreeMap<usize, f64> {
    classes_with_gt(gts)
        .into_iter()
        .filter_map(|k| average_precision(dets, gts, k, thr).map(|ap| (k, ap)))
        .collect()
}

/// Mean of the defined per-class APs; `None` without any ground truth.
pub fn mean_ap(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Option<f64> {
    let aps = per_class_ap(dets, gts, thr);
    (!aps.is_empty()).then(|| aps.values().sum::<f64>() / aps.len() as f64)
}

pub fn coco_map(dets: &[Detection], gts: &[GroundTruth]) -> Option<f64> {
    let maps: Option<Vec<f64>> = coco_thresholds().into_iter().map(|t| mean_ap(dets, gts, t)).collect();
    maps.map(|m| m.iter().sum::<f64>() / m.len() as f64)
}

/// Fraction of (image, class present in its ground truth) pairs whose
/// highest-ranked detection of that class overlaps a ground-truth box of
/// the class with IoU above 0.5. `None` when there are no pairs.
pub fn corloc(dets: &[Detection], gts: &[GroundTruth]) -> Option<f64> {
    let mut top: HashMap<(&str, usize), &Detection> = HashMap::new();
    for d in dets {
        top.entry((d.image_id.as_str(), d.class))
            .and_modify(|cur| {
                if rank_cmp(d, cur) == Ordering::Less {
                    *cur = d;
                }
            })
            .or_insert(d);
    }
    let mut pairs = 0usize;
    let mut hits = 0usize;
    for g in gts {
        let mut classes: Vec<usize> = g.objects.iter().map(|o| o.class).collect();
        classes.sort_unstable();
        classes.dedup();
        for k in classes {
            pairs += 1;
            if let Some(d) = top.get(&(g.image_id.as_str(), k)) {
                if g.objects.iter().any(|o| o.class == k && o.bbox.iou(&d.bbox) > 0.5) {
                    hits += 1;
                }
            }
        }
    }
    (pairs > 0).then(|| hits as f64 / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub ap50: f64,
    pub coco_ap: f64,
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub ap_interpolation: String,
    pub iou_match: String,
    pub coco_thresholds: Vec<f64>,
    pub excluded_classes: Vec<usize>,
    pub num_images: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub map50: f64,
    pub coco_map: f64,
    pub corloc: Option<f64>,
    pub per_class: BTreeMap<String, ClassReport>,
    pub metadata: ReportMetadata,
    pub config_echo: serde_json::Value,
}

/// Assembles the report for `num_classes` classes. Classes without ground
/// truth are listed in the metadata and left out of every mean.
pub fn build_report(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    corloc: Option<f64>,
    config_echo: serde_json::Value,
) -> Report {
    let present = classes_with_gt(gts);
    let thresholds = coco_thresholds();
    let mut per_class = BTreeMap::new();
    for &k in &present {
        let m = match_detections(dets, gts, k, 0.5);
        let coco_ap = thresholds
            .iter()
            .map(|&t| average_precision(dets, gts, k, t).unwrap_or(0.0))
            .sum::<f64>()
            / thresholds.len() as f64;
        per_class.insert(
            k.to_string(),
            ClassReport {
                ap50: ap_from_flags(&m.tp, m.num_gt),
                coco_ap,
                num_gt: m.num_gt,
            },
        );
    }
    Report {
        map50: mean_ap(dets, gts, 0.5).unwrap_or(0.0),
        coco_map: coco_map(dets, gts).unwrap_or(0.0),
        corloc,
        per_class,
        metadata: ReportMetadata {
            ap_interpolation: "all-point".into(),
            iou_match: "iou > threshold, greedy highest-IoU unmatched".into(),
            coco_thresholds: thresholds,
            excluded_classes: (0..num_classes).filter(|k| !present.contains(k)).collect(),
            num_images: gts.len(),
            num_detections: dets.len(),
        },
        config_echo,
    }
}

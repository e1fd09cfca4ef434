use serde::{Deserialize, Serialize};

use super::{iou, Detection, GroundTruth};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub gt_count: usize,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map50: f64,
    pub map50_95: f64,
    /// Only classes with at least one ground-truth box; the means run over
    /// these.
    pub per_class: Vec<ClassAp>,
}

/// 101-point interpolated AP of detections already sorted by descending
/// confidence, given whether each one is a true positive.
pub fn average_precision(hits: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let first = recall.partition_point(|&v| v < r);
        if first < precision.len() {
            sum += precision[first];
        }
    }
    sum / 101.0
}

/// Greedy matching of one class at one IoU threshold: detections by
/// descending confidence (then image, then input order) each take the
/// unmatched box of their image with the highest IoU, if it reaches the
/// threshold.
fn class_hits(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class_id: usize, thresh: f64) -> Vec<bool> {
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, list)| {
            list.iter().enumerate().filter(|(_, d)| d.class_id == class_id).map(move |(j, _)| (img, j))
        })
        .collect();
    order.sort_by(|&(ia, ja), &(ib, jb)| {
        dets[ib][jb].confidence.total_cmp(&dets[ia][ja].confidence).then(ia.cmp(&ib)).then(ja.cmp(&jb))
    });
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|(img, j)| {
            let d = &dets[img][j];
            let mut best: Option<(usize, f64)> = None;
            for (k, gt) in gts[img].iter().enumerate() {
                if gt.class_id != class_id || matched[img][k] {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox());
                if v >= thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            match best {
                Some((k, _)) => {
                    matched[img][k] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// mAP@0.5 and the mean over `thresholds` (normally 0.50:0.05:0.95), per
/// class and averaged over classes present in the ground truth.
pub fn eval_map(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    classes: usize,
    thresholds: &[f64],
) -> Result<MapReport> {
    if dets.len() != gts.len() {
        return Err(Error::Data(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    if gts.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty image set".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::Config("at least one IoU threshold is required".into()));
    }
    let mut per_class = Vec::new();
    for class_id in 0..classes {
        let gt_count = gts.iter().flatten().filter(|g| g.class_id == class_id).count();
        if gt_count == 0 {
            continue;
        }
        let ap = |t: f64| average_precision(&class_hits(dets, gts, class_id, t), gt_count);
        let ap50 = ap(0.5);
        let ap50_95 = thresholds.iter().map(|&t| ap(t)).sum::<f64>() / thresholds.len() as f64;
        per_class.push(ClassAp { class_id, gt_count, ap50, ap50_95 });
    }
    if per_class.is_empty() {
        return Err(Error::Data("no ground-truth boxes in the evaluation set".into()));
    }
    let n = per_class.len() as f64;
    Ok(MapReport {
        map50: per_class.iter().map(|c| c.ap50).sum::<f64>() / n,
        map50_95: per_class.iter().map(|c| c.ap50_95).sum::<f64>() / n,
        per_class,
    })
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

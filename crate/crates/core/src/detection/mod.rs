//! Boxes, anchor decoding, suppression, training targets and the loss, and
//! COCO-style average precision.

mod anchors;
mod decode;
mod loss;
mod map;
mod nms;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use anchors::{kmeans_anchors, AnchorSet, ScaleAnchors};
pub use decode::{assign_targets, decode_cell, decode_maps, encode_box, BoxTarget, CellPrediction, Target};
pub use loss::{yolo_loss, LossWeights};
pub use map::{average_precision, coco_thresholds, eval_map, ClassAp, MapReport};
pub use nms::nms;

/// Axis-aligned box, top-left corner plus size, in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { x: cx - w / 2.0, y: cy - h / 2.0, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Clips the box to `[0, width] × [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        Self { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

/// One annotated object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

impl GroundTruth {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }

    /// Rejects boxes that are degenerate or leave the image.
    pub fn validate(&self, width: usize, height: usize, classes: usize) -> Result<()> {
        let ok = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
            && self.w > 0.0
            && self.h > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= width as f64
            && self.y + self.h <= height as f64;
        if !ok {
            return Err(Error::Data(format!(
                "box ({}, {}, {}, {}) is empty or outside the {width}x{height} image",
                self.x, self.y, self.w, self.h
            )));
        }
        if self.class_id >= classes {
            return Err(Error::Data(format!("class {} out of range for {classes} classes", self.class_id)));
        }
        Ok(())
    }
}

/// A detection as written to JSON lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl DetectionRecord {
    pub fn new(image_id: &str, det: &Detection) -> Self {
        Self {
            image_id: image_id.to_string(),
            class_id: det.class_id,
            x: det.bbox.x,
            y: det.bbox.y,
            w: det.bbox.w,
            h: det.bbox.h,
            confidence: det.confidence,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection { bbox: BBox::new(self.x, self.y, self.w, self.h), class_id: self.class_id, confidence: self.confidence }
    }
}

pub fn write_detections_jsonl(records: &[DetectionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("plain struct serializes"));
        out.push('\n');
    }
    out
}

/// Parses detections, one JSON object per non-blank line.
pub fn parse_detections_jsonl(text: &str) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(format!("line {}", i + 1), e.to_string()))?;
        let numbers = [rec.x, rec.y, rec.w, rec.h, rec.confidence];
        if numbers.iter().any(|v| !v.is_finite()) || rec.w < 0.0 || rec.h < 0.0 || !(0.0..=1.0).contains(&rec.confidence)
        {
            return Err(Error::parse(format!("line {}", i + 1), "box sizes must be non-negative and confidence in [0, 1]"));
        }
        out.push(rec);
    }
    Ok(out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&BBox::default(), &BBox::default()), 0.0);
    }

    #[test]
    fn detections_round_trip() {
        let recs = vec![
            DetectionRecord { image_id: "a".into(), class_id: 1, x: 1.5, y: 2.0, w: 3.0, h: 4.0, confidence: 0.25 },
            DetectionRecord { image_id: "b".into(), class_id: 0, x: 0.0, y: 0.0, w: 0.0, h: 1.0, confidence: 1.0 },
        ];
        assert_eq!(parse_detections_jsonl(&write_detections_jsonl(&recs)).unwrap(), recs);
        assert!(parse_detections_jsonl("{\"image_id\":\"a\"}").is_err());
        let bad = r#"{"image_id":"a","class_id":0,"x":0,"y":0,"w":1,"h":1,"confidence":1.5}"#;
        assert!(parse_detections_jsonl(bad).is_err());
    }

    #[test]
    fn ground_truth_bounds() {
        let gt = GroundTruth { x: 60.0, y: 0.0, w: 8.0, h: 8.0, class_id: 0 };
        assert!(gt.validate(64, 64, 2).is_err());
        let gt = GroundTruth { x: 56.0, y: 0.0, w: 8.0, h: 8.0, class_id: 2 };
        assert!(gt.validate(64, 64, 2).is_err());
        let gt = GroundTruth { class_id: 1, ..gt };
        assert!(gt.validate(64, 64, 2).is_ok());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0, 0.0..50.0, 0.5..30.0, 0.5..30.0).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (ab, ba) = (iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_shrinks_as_box_moves_away(a in arb_box(), step in 0.1..5.0f64) {
            let mut prev = iou(&a, &a);
            let mut b = a;
            for _ in 0..10 {
                b.x += step;
                let cur = iou(&a, &b);
                prop_assert!(cur <= prev + 1e-12);
                prev = cur;
            }
        }
    }
}

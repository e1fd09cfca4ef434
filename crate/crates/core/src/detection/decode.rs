use super::anchors::shape_iou;
use super::{sigmoid, AnchorSet, BBox, Detection, GroundTruth};
use crate::tensor::{Scalar, Tensor};

/// Raw outputs of one anchor at one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellPrediction {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    pub objectness: f64,
    pub classes: Vec<f64>,
}

/// Largest log-ratio honoured when decoding sizes; keeps `exp` finite.
const MAX_LOG_RATIO: f64 = 8.0;

/// Box and confidence of one anchor at cell `(col, row)`. The confidence is
/// objectness times the best class probability.
pub fn decode_cell(p: &CellPrediction, anchor: (f64, f64), cell: (usize, usize), stride: usize) -> Detection {
    let s = stride as f64;
    let cx = (sigmoid(p.tx) + cell.0 as f64) * s;
    let cy = (sigmoid(p.ty) + cell.1 as f64) * s;
    let w = anchor.0 * p.tw.min(MAX_LOG_RATIO).exp();
    let h = anchor.1 * p.th.min(MAX_LOG_RATIO).exp();
    let (class_id, class_p) = p
        .classes
        .iter()
        .map(|&c| sigmoid(c))
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let class_p = if p.classes.is_empty() { 1.0 } else { class_p };
    Detection { bbox: BBox::from_center(cx, cy, w, h), class_id, confidence: sigmoid(p.objectness) * class_p }
}

/// Every candidate of image `image` whose confidence reaches `min_conf`,
/// over all scales. `outputs[s]` is the `[B, A·(5+C), h, w]` map of scale
/// `s` of `anchors`.
pub fn decode_maps<S: Scalar>(
    outputs: &[&Tensor<S>],
    image: usize,
    anchors: &AnchorSet,
    classes: usize,
    min_conf: f64,
) -> Vec<Detection> {
    let mut dets = Vec::new();
    for (map, scale) in outputs.iter().zip(&anchors.scales) {
        let [_, channels, h, w] = map.dims4("decode").expect("prediction maps are 4-D");
        let per = 5 + classes;
        debug_assert_eq!(channels, scale.sizes.len() * per);
        let d = map.data();
        let at = |a: usize, ch: usize, y: usize, x: usize| d[((image * channels + a * per + ch) * h + y) * w + x].as_f64();
        for (a, &anchor) in scale.sizes.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    // Cheap reject before decoding the box.
                    if sigmoid(at(a, 4, y, x)) < min_conf {
                        continue;
                    }
                    let p = CellPrediction {
                        tx: at(a, 0, y, x),
                        ty: at(a, 1, y, x),
                        tw: at(a, 2, y, x),
                        th: at(a, 3, y, x),
                        objectness: at(a, 4, y, x),
                        classes: (0..classes).map(|c| at(a, 5 + c, y, x)).collect(),
                    };
                    let det = decode_cell(&p, anchor, (x, y), scale.stride);
                    if det.confidence >= min_conf {
                        dets.push(det);
                    }
                }
            }
        }
    }
    dets
}

/// Regression targets: sigmoid-space offsets inside the cell and log size
/// ratios against the anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

pub fn encode_box(bbox: &BBox, anchor: (f64, f64), cell: (usize, usize), stride: usize) -> BoxTarget {
    let (cx, cy) = bbox.center();
    let s = stride as f64;
    BoxTarget {
        tx: cx / s - cell.0 as f64,
        ty: cy / s - cell.1 as f64,
        tw: (bbox.w / anchor.0).ln(),
        th: (bbox.h / anchor.1).ln(),
    }
}

/// Responsibility of one ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub scale: usize,
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
    pub box_target: BoxTarget,
}

/// Assigns each box to the anchor, over all scales, whose prior shape has the
/// highest IoU with it (first wins on ties), at the cell holding its center.
/// `grids[s]` is the `(h, w)` of scale `s`.
pub fn assign_targets(gts: &[GroundTruth], anchors: &AnchorSet, grids: &[(usize, usize)]) -> Vec<Target> {
    gts.iter()
        .map(|gt| {
            let b = gt.bbox();
            let mut best = (0, 0, f64::NEG_INFINITY);
            for (s, scale) in anchors.scales.iter().enumerate() {
                for (a, &size) in scale.sizes.iter().enumerate() {
                    let v = shape_iou((b.w, b.h), size);
                    if v > best.2 {
                        best = (s, a, v);
                    }
                }
            }
            let (scale, anchor, _) = best;
            let stride = anchors.scales[scale].stride as f64;
            let (h, w) = grids[scale];
            let (cx, cy) = b.center();
            let col = ((cx / stride).floor().max(0.0) as usize).min(w - 1);
            let row = ((cy / stride).floor().max(0.0) as usize).min(h - 1);
            let size = anchors.scales[scale].sizes[anchor];
            Target {
                scale,
                anchor,
                row,
                col,
                class_id: gt.class_id,
                box_target: encode_box(&b, size, (col, row), anchors.scales[scale].stride),
            }
        })
        .collect()
}

use std::cmp::Ordering;

use super::{iou, Detection};

/// Greedy per-class suppression. Candidates are visited by descending
/// confidence, earlier input first among equals; a candidate survives unless
/// it overlaps an already kept box of its class by more than `iou_thresh`.
/// The kept boxes are returned in visiting order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;
    use rand::{Rng, SeedableRng};

    fn det(x: f64, conf: f64) -> Detection {
        Detection { bbox: BBox::new(x, 0.0, 10.0, 10.0), class_id: 0, confidence: conf }
    }

    /// Independent formulation: repeatedly take the best remaining candidate
    /// and strike out everything it overlaps.
    fn oracle(dets: &[Detection], thresh: f64) -> Vec<Detection> {
        let mut alive = vec![true; dets.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..dets.len() {
                if !alive[i] {
                    continue;
                }
                best = match best {
                    Some(b) if dets[b].confidence >= dets[i].confidence => Some(b),
                    _ => Some(i),
                };
            }
            let Some(b) = best else { break };
            alive[b] = false;
            out.push(dets[b]);
            for i in 0..dets.len() {
                if alive[i] && dets[i].class_id == dets[b].class_id && iou(&dets[i].bbox, &dets[b].bbox) > thresh {
                    alive[i] = false;
                }
            }
        }
        out
    }

    #[test]
    fn single_suppression() {
        // Shifted by a quarter width: IoU = 75/125 = 0.6.
        let a = det(0.0, 0.9);
        let b = Detection { bbox: BBox::new(2.5, 0.0, 10.0, 10.0), ..det(0.0, 0.8) };
        assert!(iou(&a.bbox, &b.bbox) > 0.5);
        assert_eq!(nms(&[a, b], 0.5), vec![a]);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn chain_keeps_both_ends() {
        let a = det(0.0, 0.9);
        let b = det(5.0, 0.8);
        let c = det(10.0, 0.7);
        assert!(iou(&a.bbox, &b.bbox) > 0.3 && iou(&a.bbox, &c.bbox) == 0.0);
        assert_eq!(nms(&[c, a, b], 0.3), vec![a, c]);
    }

    #[test]
    fn classes_do_not_suppress_each_other() {
        let a = det(0.0, 0.9);
        let b = Detection { class_id: 1, ..det(0.0, 0.8) };
        assert_eq!(nms(&[a, b], 0.5).len(), 2);
    }

    #[test]
    fn matches_oracle_on_random_sets() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let n = rng.random_range(0..=6);
            let dets: Vec<Detection> = (0..n)
                .map(|_| Detection {
                    bbox: BBox::new(
                        rng.random_range(0.0..20.0),
                        rng.random_range(0.0..20.0),
                        rng.random_range(1.0..15.0),
                        rng.random_range(1.0..15.0),
                    ),
                    class_id: rng.random_range(0..2),
                    // Coarse scores so that ties actually happen.
                    confidence: f64::from(rng.random_range(1..6u8)) / 5.0,
                })
                .collect();
            let thresh = rng.random_range(0.1..0.7);
            assert_eq!(nms(&dets, thresh), oracle(&dets, thresh));
        }
    }
}

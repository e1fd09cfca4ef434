use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleAnchors {
    pub stride: usize,
    /// Prior `(w, h)` sizes in pixels.
    pub sizes: Vec<(f64, f64)>,
}

/// Anchor priors for every prediction scale, finest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub scales: Vec<ScaleAnchors>,
}

impl AnchorSet {
    /// Deals `sizes` (sorted by area) out to the strides in order, smallest
    /// priors to the finest scale.
    pub fn from_sizes(mut sizes: Vec<(f64, f64)>, strides: &[usize]) -> Result<Self> {
        if strides.is_empty() || !sizes.len().is_multiple_of(strides.len()) {
            return Err(Error::Config(format!(
                "{} anchors cannot be split evenly over {} scales",
                sizes.len(),
                strides.len()
            )));
        }
        if sizes.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())) {
            return Err(Error::Config("anchor sizes must be positive".into()));
        }
        sizes.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
        let per = sizes.len() / strides.len();
        let scales = strides
            .iter()
            .zip(sizes.chunks(per))
            .map(|(&stride, s)| ScaleAnchors { stride, sizes: s.to_vec() })
            .collect();
        Ok(Self { scales })
    }

    pub fn anchors_per_scale(&self) -> usize {
        self.scales.first().map_or(0, |s| s.sizes.len())
    }
}

/// IoU of two boxes sharing a center.
pub(crate) fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// k-means over box shapes with `1 - IoU` as the distance. Deterministic for
/// a given seed; the result is sorted by area.
pub fn kmeans_anchors(shapes: &[(f64, f64)], k: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if k == 0 || shapes.len() < k {
        return Err(Error::Data(format!("need at least {k} boxes to fit {k} anchors, got {}", shapes.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ style seeding on the IoU distance.
    let mut centers = vec![shapes[rng.random_range(0..shapes.len())]];
    while centers.len() < k {
        let dist: Vec<f64> = shapes
            .iter()
            .map(|&s| centers.iter().map(|&c| 1.0 - shape_iou(s, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = dist.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..shapes.len())
        } else {
            let mut r = rng.random_range(0.0..total);
            dist.iter().position(|&d| {
                r -= d;
                r < 0.0
            })
            .unwrap_or(shapes.len() - 1)
        };
        centers.push(shapes[pick]);
    }
    let mut assignment = vec![usize::MAX; shapes.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, &s) in shapes.iter().enumerate() {
            let best = (0..k)
                .max_by(|&a, &b| shape_iou(s, centers[a]).total_cmp(&shape_iou(s, centers[b])).then(b.cmp(&a)))
                .expect("k > 0");
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<(f64, f64)> =
                shapes.iter().zip(&assignment).filter(|(_, &a)| a == c).map(|(&s, _)| s).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *center = (members.iter().map(|m| m.0).sum::<f64>() / n, members.iter().map(|m| m.1).sum::<f64>() / n);
            }
        }
        if !changed {
            break;
        }
    }
    centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    Ok(centers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_by_area() {
        let set = AnchorSet::from_sizes(vec![(30.0, 30.0), (8.0, 8.0), (20.0, 20.0), (12.0, 12.0)], &[16, 32]).unwrap();
        assert_eq!(set.scales[0].sizes, vec![(8.0, 8.0), (12.0, 12.0)]);
        assert_eq!(set.scales[1].stride, 32);
        assert!(AnchorSet::from_sizes(vec![(1.0, 1.0)], &[16, 32]).is_err());
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let mut shapes = Vec::new();
        for i in 0..20 {
            let j = f64::from(i % 3) * 0.2;
            shapes.push((10.0 + j, 10.0 - j));
            shapes.push((40.0 + j, 20.0 + j));
        }
        let a = kmeans_anchors(&shapes, 2, 1).unwrap();
        assert!((a[0].0 - 10.2).abs() < 0.5 && (a[1].0 - 40.2).abs() < 0.5);
        assert_eq!(a, kmeans_anchors(&shapes, 2, 1).unwrap());
        assert!(kmeans_anchors(&shapes[..1], 2, 0).is_err());
    }
}

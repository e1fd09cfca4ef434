use serde::{Deserialize, Serialize};

use super::{sigmoid, Target};
use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, NodeId, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub objectness: f64,
    pub class: f64,
    pub boxes: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { objectness: 1.0, class: 1.0, boxes: 5.0 }
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy on a logit, with its derivative.
fn bce(z: f64, target: f64) -> (f64, f64) {
    (softplus(z) - target * z, sigmoid(z) - target)
}

struct YoloLoss<S> {
    grads: Vec<Tensor<S>>,
}

impl<S: Scalar> Backward<S> for YoloLoss<S> {
    fn name(&self) -> &'static str {
        "yolo_loss"
    }

    fn backward(&self, _: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        let up = grad.data()[0];
        self.grads.iter().map(|g| Some(g.map(|v| v * up))).collect()
    }
}

/// Detection loss summed over cells and averaged over images:
/// objectness cross-entropy on every anchor of every cell, class
/// cross-entropy and squared box error on assigned anchors. A cell claimed
/// by several boxes keeps the last one.
///
/// `outputs[s]` is the `[B, A·(5+C), h, w]` map of scale `s`; `targets[b]`
/// lists the assignments of image `b`.
pub fn yolo_loss<S: Scalar>(
    g: &mut Graph<S>,
    outputs: &[NodeId],
    targets: &[Vec<Target>],
    anchors_per_scale: usize,
    classes: usize,
    weights: &LossWeights,
) -> Result<NodeId> {
    let per = 5 + classes;
    let batch = targets.len();
    let mut shapes = Vec::new();
    for &o in outputs {
        let [b, c, h, w] = g.value(o).dims4("yolo_loss")?;
        if b != batch || c != anchors_per_scale * per {
            return Err(Error::shape(
                "yolo_loss",
                format!("map {:?} does not fit {batch} images of {anchors_per_scale} anchors x {per}", g.value(o).shape()),
            ));
        }
        shapes.push((c, h, w));
    }
    // Dense assignment per scale: index of the owning target, if any.
    let mut owner: Vec<Vec<Option<&Target>>> =
        shapes.iter().map(|&(_, h, w)| vec![None; batch * anchors_per_scale * h * w]).collect();
    for (b, list) in targets.iter().enumerate() {
        for t in list {
            let Some(&(_, h, w)) = shapes.get(t.scale) else {
                return Err(Error::shape("yolo_loss", format!("target on missing scale {}", t.scale)));
            };
            if t.anchor >= anchors_per_scale || t.row >= h || t.col >= w || t.class_id >= classes {
                return Err(Error::Data(format!("target {t:?} does not fit the prediction grid")));
            }
            owner[t.scale][((b * anchors_per_scale + t.anchor) * h + t.row) * w + t.col] = Some(t);
        }
    }
    let inv_batch = 1.0 / batch.max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    for (s, &o) in outputs.iter().enumerate() {
        let (c, h, w) = shapes[s];
        let raw = g.value(o).data();
        let mut grad = vec![S::zero(); raw.len()];
        let idx = |b: usize, a: usize, ch: usize, cell: usize| (b * c + a * per + ch) * h * w + cell;
        for b in 0..batch {
            for a in 0..anchors_per_scale {
                for cell in 0..h * w {
                    let assigned = owner[s][(b * anchors_per_scale + a) * h * w + cell];
                    let io = idx(b, a, 4, cell);
                    let (l, d) = bce(raw[io].as_f64(), if assigned.is_some() { 1.0 } else { 0.0 });
                    total += weights.objectness * l;
                    grad[io] = S::of(weights.objectness * d * inv_batch);
                    let Some(t) = assigned else { continue };
                    for k in 0..classes {
                        let i = idx(b, a, 5 + k, cell);
                        let (l, d) = bce(raw[i].as_f64(), if k == t.class_id { 1.0 } else { 0.0 });
                        total += weights.class * l;
                        grad[i] = S::of(weights.class * d * inv_batch);
                    }
                    let bt = t.box_target;
                    for (k, goal) in [bt.tx, bt.ty].into_iter().enumerate() {
                        let i = idx(b, a, k, cell);
                        let p = sigmoid(raw[i].as_f64());
                        total += weights.boxes * (p - goal).powi(2);
                        grad[i] = S::of(weights.boxes * 2.0 * (p - goal) * p * (1.0 - p) * inv_batch);
                    }
                    for (k, goal) in [bt.tw, bt.th].into_iter().enumerate() {
                        let i = idx(b, a, 2 + k, cell);
                        let z = raw[i].as_f64();
                        total += weights.boxes * (z - goal).powi(2);
                        grad[i] = S::of(weights.boxes * 2.0 * (z - goal) * inv_batch);
                    }
                }
            }
        }
        grads.push(Tensor::new(g.value(o).shape().to_vec(), grad)?);
    }
    let loss = total * inv_batch;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("detection loss is not finite ({loss})")));
    }
    Ok(g.push(Tensor::scalar(S::of(loss)), outputs, Box::new(YoloLoss { grads })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BoxTarget;

    fn target(tx: f64, class_id: usize) -> Target {
        Target {
            scale: 0,
            anchor: 1,
            row: 1,
            col: 0,
            class_id,
            box_target: BoxTarget { tx, ty: 0.5, tw: 0.2, th: -0.1 },
        }
    }

    #[test]
    fn saturated_negatives_cost_nothing() {
        let mut g = Graph::<f64>::new();
        let o = g.constant(Tensor::full(&[1, 14, 2, 2], -10.0));
        let l = yolo_loss(&mut g, &[o], &[vec![]], 2, 2, &LossWeights::default()).unwrap();
        assert!(g.value(l).data()[0] / 8.0 <= 1e-3);
    }

    #[test]
    fn perfect_assignment_leaves_only_objectness() {
        let mut raw = Tensor::<f64>::full(&[1, 14, 2, 2], -30.0);
        let t = target(0.5, 1);
        let at = |ch: usize| (7 + ch) * 4 + 2;
        raw.data_mut()[at(0)] = 0.0;
        raw.data_mut()[at(1)] = 0.0;
        raw.data_mut()[at(2)] = 0.2;
        raw.data_mut()[at(3)] = -0.1;
        raw.data_mut()[at(4)] = 30.0;
        raw.data_mut()[at(6)] = 30.0;
        let mut g = Graph::<f64>::new();
        let o = g.constant(raw);
        let l = yolo_loss(&mut g, &[o], &[vec![t]], 2, 2, &LossWeights::default()).unwrap();
        assert!(g.value(l).data()[0] < 1e-11);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let raw = Tensor::<f64>::from_fn(&[2, 14, 2, 2], |_| rng.random_range(-2.0..2.0));
        let targets = vec![vec![target(0.3, 0)], vec![target(0.8, 1)]];
        let eval = |r: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let o = g.leaf(r.clone(), true);
            let l = yolo_loss(&mut g, &[o], &targets, 2, 2, &LossWeights::default()).unwrap();
            let v = g.value(l).data()[0];
            (v, g.backward(l).unwrap().get(o).unwrap().clone())
        };
        let (_, grad) = eval(&raw);
        let h = 1e-6;
        for i in 0..raw.numel() {
            let (mut p, mut m) = (raw.clone(), raw.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (eval(&p).0 - eval(&m).0) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() < 1e-6, "{i}: {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn rejects_mismatched_maps() {
        let mut g = Graph::<f64>::new();
        let o = g.constant(Tensor::zeros(&[1, 13, 2, 2]));
        assert!(yolo_loss(&mut g, &[o], &[vec![]], 2, 2, &LossWeights::default()).is_err());
    }
}

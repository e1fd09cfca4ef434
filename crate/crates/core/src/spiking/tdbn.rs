//! Threshold-dependent batch normalization.
//!
//! Statistics are pooled per channel over the whole `[T·B, C, H, W]` tensor,
//! i.e. jointly over time, batch and space, and the normalized value is
//! scaled by `alpha * v_th` before the learned affine transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, NodeId, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdbnConfig {
    pub alpha: f64,
    pub v_th: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for TdbnConfig {
    fn default() -> Self {
        Self { alpha: 1.0, v_th: 0.5, eps: 1e-5, momentum: 0.1 }
    }
}

impl TdbnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("batch-norm eps must be positive, got {}", self.eps)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("batch-norm momentum must lie in [0, 1], got {}", self.momentum)));
        }
        Ok(())
    }

    fn gain(&self) -> f64 {
        self.alpha * self.v_th
    }
}

/// Running per-channel statistics. The variance is the unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<S = f32> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> BnStats<S> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![S::zero(); channels], var: vec![S::one(); channels] }
    }
}

struct Tdbn<S> {
    /// `(x - mean) / sqrt(var + eps)`, same layout as the input.
    normalized: Vec<S>,
    inv_std: Vec<S>,
    gain: S,
    train: bool,
}

fn channel_ranges(n: usize, c: usize, plane: usize, ch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).map(move |img| {
        let start = (img * c + ch) * plane;
        start..start + plane
    })
}

impl<S: Scalar> Backward<S> for Tdbn<S> {
    fn name(&self) -> &'static str {
        "tdbn"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, needs: &[bool]) -> Vec<Option<Tensor<S>>> {
        let [n, c, h, w] = inputs[0].dims4("tdbn").expect("checked in forward");
        let plane = h * w;
        let count = S::of((n * plane) as f64);
        let lambda = inputs[1].data();
        let gd = grad.data();
        let mut dx = needs[0].then(|| vec![S::zero(); inputs[0].numel()]);
        let mut dlambda = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        for ch in 0..c {
            let mut sum_g = S::zero();
            let mut sum_gx = S::zero();
            for r in channel_ranges(n, c, plane, ch) {
                for i in r {
                    sum_g += gd[i];
                    sum_gx += gd[i] * self.normalized[i];
                }
            }
            dbeta[ch] = sum_g;
            dlambda[ch] = self.gain * sum_gx;
            if let Some(dx) = dx.as_mut() {
                let k = lambda[ch] * self.gain * self.inv_std[ch];
                let (mean_g, mean_gx) = if self.train { (sum_g / count, sum_gx / count) } else { (S::zero(), S::zero()) };
                for r in channel_ranges(n, c, plane, ch) {
                    for i in r {
                        dx[i] = k * (gd[i] - mean_g - self.normalized[i] * mean_gx);
                    }
                }
            }
        }
        vec![
            dx.map(|d| Tensor::new(inputs[0].shape().to_vec(), d).expect("same shape")),
            needs[1].then(|| Tensor::new(vec![c], dlambda).expect("channel vector")),
            needs[2].then(|| Tensor::new(vec![c], dbeta).expect("channel vector")),
        ]
    }
}

/// `y = lambda * alpha * v_th * (x - mean) / sqrt(var + eps) + beta`.
///
/// In train mode the batch statistics (biased variance) normalize the input
/// and `stats` is updated with momentum; in infer mode `stats` is used as is.
pub fn tdbn<S: Scalar>(
    g: &mut Graph<S>,
    input: NodeId,
    lambda: NodeId,
    beta: NodeId,
    stats: &mut BnStats<S>,
    cfg: &TdbnConfig,
    mode: BnMode,
) -> Result<NodeId> {
    cfg.validate()?;
    let x = g.value(input);
    let [n, c, h, w] = x.dims4("tdbn")?;
    for (name, id) in [("scale", lambda), ("shift", beta)] {
        if g.value(id).shape() != [c] {
            return Err(Error::shape("tdbn", format!("{name} {:?} for {c} channels", g.value(id).shape())));
        }
    }
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::shape("tdbn", format!("running statistics hold {} channels, input has {c}", stats.mean.len())));
    }
    let plane = h * w;
    let count = n * plane;
    let train = mode == BnMode::Train;
    if train && count < 2 {
        return Err(Error::Data(format!("batch norm needs at least 2 samples per channel, got {count}")));
    }
    let eps = S::of(cfg.eps);
    let momentum = S::of(cfg.momentum);
    let gain = S::of(cfg.gain());
    let xd = x.data();
    let mut normalized = vec![S::zero(); x.numel()];
    let mut inv_std = vec![S::zero(); c];
    for ch in 0..c {
        let (mean, var) = if train {
            let mut sum = S::zero();
            for r in channel_ranges(n, c, plane, ch) {
                sum += xd[r].iter().copied().sum::<S>();
            }
            let mean = sum / S::of(count as f64);
            let mut sq = S::zero();
            for r in channel_ranges(n, c, plane, ch) {
                sq += xd[r].iter().map(|&v| (v - mean) * (v - mean)).sum::<S>();
            }
            let biased = sq / S::of(count as f64);
            let unbiased = sq / S::of((count - 1) as f64);
            stats.mean[ch] = (S::one() - momentum) * stats.mean[ch] + momentum * mean;
            stats.var[ch] = (S::one() - momentum) * stats.var[ch] + momentum * unbiased;
            (mean, biased)
        } else {
            (stats.mean[ch], stats.var[ch])
        };
        let inv = S::one() / (var + eps).sqrt();
        inv_std[ch] = inv;
        for r in channel_ranges(n, c, plane, ch) {
            for i in r {
                normalized[i] = (xd[i] - mean) * inv;
            }
        }
    }
    let (ld, bd) = (g.value(lambda).data(), g.value(beta).data());
    let mut out = vec![S::zero(); x.numel()];
    for ch in 0..c {
        let k = ld[ch] * gain;
        for r in channel_ranges(n, c, plane, ch) {
            for i in r {
                out[i] = k * normalized[i] + bd[ch];
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("batch norm produced a non-finite value".into()));
    }
    let value = Tensor::new(vec![n, c, h, w], out)?;
    let op = Tdbn { normalized, inv_std, gain, train };
    Ok(g.push(value, &[input, lambda, beta], Box::new(op)))
}

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockFamily, HeadSpec, NetworkSpec, Readout};
use crate::detection::{coco_thresholds, LossWeights};
use crate::encoding::{SynthMode, SYNTH_CLASSES};
use crate::error::{Error, Result};
use crate::spiking::{LifConfig, ResetGrad, SpikeFn, TdbnConfig};

/// Everything a run needs, read from JSON. Missing fields take their
/// defaults; unknown fields are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    /// Time steps `T`.
    pub steps: usize,
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    /// TDBN scale factor.
    pub alpha: f64,
    /// Surrogate window width.
    pub width: f64,
    pub readout: Readout,
    pub family: BlockFamily,
    pub anchors_per_scale: usize,
    pub reset_grad: ResetGrad,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Apply the gradient-norm-equality BN initialization where it is
    /// feasible.
    pub gne_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let lif = LifConfig::default();
        let bn = TdbnConfig::default();
        Self {
            depth: 10,
            steps: 4,
            tau: lif.tau,
            v_th: lif.v_th,
            v_reset: lif.v_reset,
            alpha: bn.alpha,
            width: lif.width,
            readout: Readout::Membrane,
            family: BlockFamily::Ems,
            anchors_per_scale: 3,
            reset_grad: ResetGrad::Surrogate,
            bn_eps: bn.eps,
            bn_momentum: bn.momentum,
            gne_init: false,
        }
    }
}

impl ModelConfig {
    pub fn lif(&self) -> LifConfig {
        LifConfig {
            tau: self.tau,
            v_th: self.v_th,
            v_reset: self.v_reset,
            width: self.width,
            reset_grad: self.reset_grad,
            spike_fn: SpikeFn::Heaviside,
        }
    }

    pub fn bn(&self) -> TdbnConfig {
        TdbnConfig { alpha: self.alpha, v_th: self.v_th, eps: self.bn_eps, momentum: self.bn_momentum }
    }

    pub fn network_spec(&self, in_channels: usize, classes: usize) -> NetworkSpec {
        NetworkSpec {
            depth: self.depth,
            in_channels,
            family: self.family,
            readout: self.readout,
            head: Some(HeadSpec { classes, anchors_per_scale: self.anchors_per_scale }),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
}

/// Learning-rate schedule over epochs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to zero at the end of the last epoch.
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
    /// Random horizontal flips of training samples.
    pub flip: bool,
    /// Random vertical flips of training samples.
    pub vflip: bool,
    /// After each epoch, recompute the batch-norm running statistics as an
    /// exact average over the (unaugmented) training set.
    pub recalibrate_bn: bool,
    pub loss: LossWeights,
    /// Checkpoint whose parameters initialize the run, typically trained
    /// with `T = 1`.
    pub warm_start: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Sgd,
            lr: 1e-2,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            grad_clip: Some(10.0),
            flip: true,
            vflip: true,
            recalibrate_bn: false,
            loss: LossWeights::default(),
            warm_start: None,
        }
    }
}

/// The built-in synthetic dataset, split into a training and an evaluation
/// part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSplit {
    pub seed: u64,
    pub train_images: usize,
    pub eval_images: usize,
    pub size: usize,
    pub mode: SynthMode,
    /// Motion micro-frames per event sample.
    pub steps: usize,
}

impl Default for SynthSplit {
    fn default() -> Self {
        Self { seed: 0, train_images: 500, eval_images: 100, size: 64, mode: SynthMode::Frames, steps: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Annotation file or dataset directory; the synthetic split is used
    /// when absent.
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub synth: SynthSplit,
    pub classes: usize,
    /// Event bin width in microseconds.
    pub dt: u64,
    /// Anchor `(w, h)` priors in pixels, finest scale first. Fitted by
    /// k-means on the training boxes when absent.
    pub anchors: Option<Vec<(f64, f64)>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train: None, eval: None, synth: SynthSplit::default(), classes: SYNTH_CLASSES, dt: 1000, anchors: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub nms_iou: f64,
    pub conf_threshold: f64,
    pub max_detections: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_thresholds: coco_thresholds(), nms_iou: 0.45, conf_threshold: 0.01, max_detections: 100, batch_size: 16 }
    }
}

impl TrainingConfig {
    /// Learning rate for batch `step` of `total`, counted from 0.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let progress = step as f64 / total.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let m = &self.model;
        self.model.network_spec(3, self.data.classes).validate()?;
        m.lif().validate()?;
        m.bn().validate()?;
        if m.steps == 0 {
            return fail("model.steps must be at least 1".into());
        }
        let t = &self.training;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return fail(format!("training.lr must be positive, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return fail(format!("training.momentum must lie in [0, 1), got {}", t.momentum));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return fail(format!("training.weight_decay must be non-negative, got {}", t.weight_decay));
        }
        if t.batch_size < 2 {
            return fail("training.batch_size must be at least 2 for batch statistics".into());
        }
        if let Some(c) = t.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("training.grad_clip must be positive, got {c}"));
            }
        }
        let d = &self.data;
        if d.dt == 0 {
            return fail("data.dt must be positive".into());
        }
        if d.train.is_none() {
            let s = &d.synth;
            if s.train_images == 0 || s.eval_images == 0 {
                return fail("data.synth needs at least one training and one evaluation image".into());
            }
            if d.classes != SYNTH_CLASSES {
                return fail(format!("the synthetic dataset has {SYNTH_CLASSES} classes, data.classes is {}", d.classes));
            }
        }
        if let Some(a) = &d.anchors {
            if a.len() != 2 * m.anchors_per_scale {
                return fail(format!(
                    "data.anchors lists {} priors, the head needs {} (2 scales x {})",
                    a.len(),
                    2 * m.anchors_per_scale,
                    m.anchors_per_scale
                ));
            }
        }
        let e = &self.eval;
        if e.iou_thresholds.is_empty() || e.iou_thresholds.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return fail("eval.iou_thresholds must be a non-empty list of values in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&e.nms_iou) || !(0.0..=1.0).contains(&e.conf_threshold) {
            return fail("eval.nms_iou and eval.conf_threshold must lie in [0, 1]".into());
        }
        if e.batch_size == 0 || e.max_detections == 0 {
            return fail("eval.batch_size and eval.max_detections must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.tau, 0.25);
        assert_eq!(cfg.model.v_th, 0.5);
        assert_eq!(cfg.model.v_reset, 0.0);
        assert_eq!(cfg.model.alpha, 1.0);
        assert_eq!(cfg.model.width, 1.0);
        assert_eq!(cfg.training.optimizer, Optimizer::Sgd);
        assert_eq!(cfg.training.lr, 1e-2);
        assert_eq!(cfg.training.momentum, 0.9);
        assert_eq!(cfg.training.weight_decay, 0.0);
        assert_eq!(cfg.training.grad_clip, Some(10.0));
        assert_eq!(cfg.training.schedule, LrSchedule::Cosine);
        assert!(cfg.training.flip && cfg.training.vflip && !cfg.training.recalibrate_bn);
        let off = RunConfig::from_json(r#"{"training": {"grad_clip": null, "schedule": "constant"}}"#).unwrap();
        assert_eq!(off.training.grad_clip, None);
        assert_eq!(off.training.lr_at(7, 10), off.training.lr);
    }

    #[test]
    fn cosine_schedule() {
        let t = TrainingConfig::default();
        assert_eq!(t.lr_at(0, 100), t.lr);
        assert!((t.lr_at(50, 100) - t.lr / 2.0).abs() < 1e-15);
        // Near the end 1 + cos(pi - e) ~ e^2 / 2.
        let e = std::f64::consts::PI / 100.0;
        assert!((t.lr_at(99, 100) / t.lr - e * e / 4.0).abs() < 1e-7);
    }

    #[test]
    fn overrides_and_round_trip() {
        let cfg = RunConfig::from_json(r#"{"model": {"steps": 1, "family": "sew"}, "training": {"lr": 0.05}}"#).unwrap();
        assert_eq!(cfg.model.steps, 1);
        assert_eq!(cfg.model.family, BlockFamily::Sew);
        assert_eq!(cfg.training.lr, 0.05);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn rejections() {
        for bad in [
            r#"{"model": {"depth": 12}}"#,
            r#"{"model": {"steps": 0}}"#,
            r#"{"model": {"tau": 1.5}}"#,
            r#"{"training": {"lr": 0}}"#,
            r#"{"training": {"batch_size": 1}}"#,
            r#"{"data": {"anchors": [[1, 2]]}}"#,
            r#"{"eval": {"iou_thresholds": []}}"#,
            r#"{"bogus": 1}"#,
            "not json",
        ] {
            let err = RunConfig::from_json(bad).unwrap_err();
            assert_eq!(err.class(), crate::ErrorClass::Config, "{bad}");
        }
    }
}

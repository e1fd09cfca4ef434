//! Training, evaluation and inference over datasets, driven by a
//! [`RunConfig`].

mod checkpoint;
mod config;
mod data;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{ForwardOptions, Input, LayerRole, Network, ParamStore};
use crate::detection::{
    assign_targets, decode_maps, eval_map, kmeans_anchors, nms, yolo_loss, AnchorSet, ClassAp, Detection,
    DetectionRecord,
};
use crate::encoding::Sample;
use crate::error::{Error, Result};
use crate::gne::init_bn_gne_lenient;
use crate::spiking::BnStats;
use crate::tensor::Tensor;

pub use checkpoint::{store_mismatches, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DataConfig, EvalConfig, LrSchedule, ModelConfig, Optimizer, RunConfig, SynthSplit, TrainingConfig};
pub use data::{batch_input, load_split, mirror_boxes, PreparedInput, PreparedSet};

/// SGD with classical momentum: `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr: lr as f32, momentum: momentum as f32, weight_decay: weight_decay as f32, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("sgd", format!("gradient of {name} is {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub map50: f64,
    pub map50_95: f64,
    /// Mean firing rate of spike-fed convolutions on the evaluation set.
    pub firing_rate: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss,map50,map50_95,firing_rate";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.loss, r.map50, r.map50_95, r.firing_rate));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub images: usize,
    pub steps: usize,
    pub map50: f64,
    pub map50_95: f64,
    pub per_class: Vec<ClassAp>,
    pub firing_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: EvalMetrics,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochMetrics>,
    /// Evaluation after the last epoch, if any epoch ran.
    pub last_eval: Option<Evaluation>,
}

/// Anchor priors for a run: the configured ones, else k-means over the
/// training boxes.
pub fn fit_anchors(cfg: &RunConfig, boxes: &[Vec<crate::detection::GroundTruth>], strides: &[usize]) -> Result<AnchorSet> {
    let sizes = match &cfg.data.anchors {
        Some(a) => a.clone(),
        None => {
            let shapes: Vec<(f64, f64)> = boxes.iter().flatten().map(|b| (b.w, b.h)).collect();
            kmeans_anchors(&shapes, cfg.model.anchors_per_scale * strides.len(), cfg.training.seed)?
        }
    };
    AnchorSet::from_sizes(sizes, strides)
}

/// Post-processed detections of every image in `input`: decode above the
/// confidence cutoff, per-class NMS, then the most confident
/// `max_detections`.
fn postprocess(maps: &[&Tensor<f32>], batch: usize, anchors: &AnchorSet, classes: usize, cfg: &EvalConfig) -> Vec<Vec<Detection>> {
    (0..batch)
        .map(|b| {
            let mut kept = nms(&decode_maps(maps, b, anchors, classes, cfg.conf_threshold), cfg.nms_iou);
            kept.truncate(cfg.max_detections);
            kept
        })
        .collect()
}

/// Detections of one batch, per image, plus the summed input and element
/// count over every spike-fed convolution.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub detections: Vec<Vec<Detection>>,
    pub spike_input_sum: f64,
    pub spike_input_count: u64,
}

pub fn predict(
    net: &mut Network<f32>,
    anchors: &AnchorSet,
    input: &Input<f32>,
    batch: usize,
    steps: usize,
    eval: &EvalConfig,
) -> Result<Prediction> {
    let classes = net.spec.as_ref().and_then(|s| s.head).map(|h| h.classes).ok_or_else(|| {
        Error::Config("network has no detection head".into())
    })?;
    let pass = net.forward(input, &ForwardOptions { record: true, ..ForwardOptions::infer(steps) })?;
    let maps: Vec<&Tensor<f32>> = pass.outputs.iter().map(|o| pass.graph.value(o.node)).collect();
    if maps.iter().any(|m| !m.is_finite()) {
        return Err(Error::Numeric("prediction maps contain non-finite values".into()));
    }
    let (spike_input_sum, spike_input_count) = pass
        .records
        .iter()
        .filter(|r| r.role == LayerRole::SpikeFed)
        .fold((0.0, 0), |acc, r| (acc.0 + r.input_sum, acc.1 + r.input_count));
    Ok(Prediction { detections: postprocess(&maps, batch, anchors, classes, eval), spike_input_sum, spike_input_count })
}

/// Replaces the running batch-norm statistics with their plain average over
/// `set`, taken in order in batches of `batch_size`.
pub fn recalibrate_bn(net: &mut Network<f32>, set: &PreparedSet, steps: usize, batch_size: usize) -> Result<()> {
    for stats in net.store.buffers.values_mut() {
        *stats = BnStats::new(stats.mean.len());
    }
    let momentum = net.bn.momentum;
    let refs: Vec<&PreparedInput> = set.inputs.iter().collect();
    let opts = ForwardOptions { param_grad: false, ..ForwardOptions::train(steps) };
    let mut result = Ok(());
    for (k, chunk) in refs.chunks(batch_size.max(1)).enumerate() {
        // Momentum 1/(k+1) turns the running update into a cumulative mean.
        net.bn.momentum = 1.0 / (k + 1) as f64;
        if let Err(e) = batch_input(chunk).and_then(|x| net.forward(&x, &opts)) {
            result = Err(e);
            break;
        }
    }
    net.bn.momentum = momentum;
    result
}

/// Deterministic evaluation of `net` on a prepared set at `steps` time steps.
pub fn evaluate(net: &mut Network<f32>, anchors: &AnchorSet, set: &PreparedSet, steps: usize, eval: &EvalConfig) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty image set".into()));
    }
    for input in &set.inputs {
        if let PreparedInput::Frames(s) = input {
            if s.steps() != steps {
                return Err(Error::Config(format!("event frames were binned for {} steps, evaluation runs {steps}", s.steps())));
            }
        }
    }
    let classes = net.spec.as_ref().and_then(|s| s.head).map(|h| h.classes).unwrap_or(0);
    let mut dets = Vec::with_capacity(set.len());
    let (mut spikes, mut elements) = (0.0, 0u64);
    for chunk in (0..set.len()).collect::<Vec<_>>().chunks(eval.batch_size) {
        let items: Vec<&PreparedInput> = chunk.iter().map(|&i| &set.inputs[i]).collect();
        let p = predict(net, anchors, &batch_input(&items)?, chunk.len(), steps, eval)?;
        dets.extend(p.detections);
        spikes += p.spike_input_sum;
        elements += p.spike_input_count;
    }
    let report = eval_map(&dets, &set.boxes, classes, &eval.iou_thresholds)?;
    let detections = set
        .ids
        .iter()
        .zip(&dets)
        .flat_map(|(id, list)| list.iter().map(move |d| DetectionRecord::new(id, d)))
        .collect();
    Ok(Evaluation {
        metrics: EvalMetrics {
            images: set.len(),
            steps,
            map50: report.map50,
            map50_95: report.map50_95,
            per_class: report.per_class,
            firing_rate: if elements == 0 { 0.0 } else { spikes / elements as f64 },
        },
        detections,
    })
}

/// Builds the network and anchors a run starts from: fresh parameters, the
/// optional GNE initialization, then the optional warm start.
pub fn initial_checkpoint(cfg: &RunConfig, train: &PreparedSet) -> Result<Checkpoint> {
    cfg.validate()?;
    let spec = cfg.model.network_spec(train.channels(), cfg.data.classes);
    let mut net = Network::<f32>::new(&spec, cfg.model.lif(), cfg.model.bn(), cfg.training.seed)?;
    let mut anchors = None;
    if let Some(path) = &cfg.training.warm_start {
        let ck = Checkpoint::load(path)?;
        let problems = store_mismatches(&net.store, &ck.store);
        if !problems.is_empty() {
            return Err(Error::Config(format!(
                "warm start {} does not fit this model: {}",
                path.display(),
                problems.join("; ")
            )));
        }
        net.store = ck.store;
        anchors = Some(ck.meta.anchors);
    } else if cfg.model.gne_init {
        let n = train.len().min(cfg.training.batch_size);
        let items: Vec<&PreparedInput> = train.inputs[..n].iter().collect();
        init_bn_gne_lenient(&mut net, &batch_input(&items)?, cfg.model.steps)?;
    }
    let anchors = match (anchors, &cfg.data.anchors) {
        (Some(a), None) => a,
        _ => fit_anchors(cfg, &train.boxes, &net.strides())?,
    };
    if anchors.anchors_per_scale() != cfg.model.anchors_per_scale {
        return Err(Error::Config(format!(
            "warm-start anchors have {} priors per scale, the model {}",
            anchors.anchors_per_scale(),
            cfg.model.anchors_per_scale
        )));
    }
    Ok(Checkpoint { meta: CheckpointMeta { config: cfg.clone(), network: spec, anchors, epochs: 0 }, store: net.store })
}

/// Loads the configured data and trains.
pub fn train(cfg: &RunConfig, on_epoch: &mut dyn FnMut(&EpochMetrics, Duration)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, eval) = load_split(cfg)?;
    train_on(cfg, &train, &eval, on_epoch)
}

/// Surrogate-gradient SGD over `train_samples`, evaluating on
/// `eval_samples` after every epoch. Deterministic for a given config.
pub fn train_on(
    cfg: &RunConfig,
    train_samples: &[Sample],
    eval_samples: &[Sample],
    on_epoch: &mut dyn FnMut(&EpochMetrics, Duration),
) -> Result<TrainOutcome> {
    let steps = cfg.model.steps;
    let train = PreparedSet::new(train_samples, steps, cfg.data.dt)?;
    let eval = PreparedSet::new(eval_samples, steps, cfg.data.dt)?;
    if train.channels() != eval.channels() || (train.width, train.height) != (eval.width, eval.height) {
        return Err(Error::Data("training and evaluation samples differ in kind or size".into()));
    }
    let mut checkpoint = initial_checkpoint(cfg, &train)?;
    let mut net = checkpoint.network()?;
    let anchors = checkpoint.meta.anchors.clone();
    let t = &cfg.training;
    let classes = cfg.data.classes;
    let mut sgd = Sgd::new(t.lr, t.momentum, t.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    // Mirrored copies indexed by `2·vertical + horizontal`; index 0 is the
    // set itself.
    let mut mirrored: Vec<Vec<PreparedInput>> = vec![Vec::new(); 4];
    for (k, copies) in mirrored.iter_mut().enumerate().skip(1) {
        let (h, v) = (k & 1 == 1, k & 2 == 2);
        if (!h || t.flip) && (!v || t.vflip) {
            *copies = train.inputs.iter().map(|x| x.mirrored(h, v)).collect();
        }
    }
    let per_epoch = train.len().div_ceil(t.batch_size);
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(t.epochs);
    let mut last_eval = None;
    for epoch in 1..=t.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(t.batch_size) {
            let mut items = Vec::with_capacity(chunk.len());
            let mut boxes = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let h = t.flip && rng.random_bool(0.5);
                let v = t.vflip && rng.random_bool(0.5);
                if h || v {
                    items.push(&mirrored[usize::from(v) * 2 + usize::from(h)][i]);
                    boxes.push(mirror_boxes(&train.boxes[i], train.width, train.height, h, v));
                } else {
                    items.push(&train.inputs[i]);
                    boxes.push(train.boxes[i].clone());
                }
            }
            let mut pass = net.forward(&batch_input(&items)?, &ForwardOptions::train(steps))?;
            let outs: Vec<_> = pass.outputs.iter().map(|o| o.node).collect();
            let grids: Vec<(usize, usize)> = outs
                .iter()
                .map(|&o| {
                    let s = pass.graph.value(o).shape();
                    (s[2], s[3])
                })
                .collect();
            let targets: Vec<_> = boxes.iter().map(|b| assign_targets(b, &anchors, &grids)).collect();
            let loss = yolo_loss(&mut pass.graph, &outs, &targets, anchors.anchors_per_scale(), classes, &t.loss)?;
            let value = f64::from(pass.graph.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("training loss is {value} at epoch {epoch}, batch {}", batches + 1)));
            }
            let mut grads = pass.graph.backward(loss)?;
            let mut named = BTreeMap::new();
            for (name, &id) in &pass.params {
                if let Some(g) = grads.take(id) {
                    named.insert(name.clone(), g);
                }
            }
            let norm = named.values().flat_map(|g| g.data()).map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("gradient norm is {norm} at epoch {epoch}, batch {}", batches + 1)));
            }
            if let Some(clip) = t.grad_clip {
                if norm > clip {
                    let k = (clip / norm) as f32;
                    for g in named.values_mut() {
                        g.data_mut().iter_mut().for_each(|v| *v *= k);
                    }
                }
            }
            sgd.lr = t.lr_at(step, per_epoch * t.epochs) as f32;
            sgd.step(&mut net.store, &named)?;
            step += 1;
            loss_sum += value;
            batches += 1;
        }
        if t.recalibrate_bn {
            recalibrate_bn(&mut net, &train, steps, t.batch_size)?;
        }
        let evaluation = evaluate(&mut net, &anchors, &eval, steps, &cfg.eval)?;
        let row = EpochMetrics {
            epoch,
            loss: loss_sum / batches as f64,
            map50: evaluation.metrics.map50,
            map50_95: evaluation.metrics.map50_95,
            firing_rate: evaluation.metrics.firing_rate,
        };
        on_epoch(&row, started.elapsed());
        epochs.push(row);
        last_eval = Some(evaluation);
    }
    checkpoint.store = net.store;
    checkpoint.meta.epochs = t.epochs;
    Ok(TrainOutcome { checkpoint, epochs, last_eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{synth_dataset, SynthConfig};

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.synth = SynthSplit { train_images: 6, eval_images: 4, size: 32, ..SynthSplit::default() };
        cfg.training.epochs = 1;
        cfg.training.batch_size = 3;
        cfg.model.steps = 2;
        cfg
    }

    #[test]
    fn sgd_matches_hand_iteration() {
        let mut store = ParamStore::<f32>::default();
        store.params.insert("w".into(), Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![2], vec![0.5, 0.25]).unwrap())]);
        let mut sgd = Sgd::new(0.1, 0.9, 0.0);
        sgd.step(&mut store, &grads).unwrap();
        // v = g, p = p - 0.1 v
        assert_eq!(store.params["w"].data(), &[0.95, -1.025]);
        sgd.step(&mut store, &grads).unwrap();
        // v = 0.9 g + g = 1.9 g
        let w = store.params["w"].data();
        assert!((w[0] - (0.95 - 0.1 * 0.95)).abs() < 1e-7);
        assert!((w[1] - (-1.025 - 0.1 * 0.475)).abs() < 1e-7);
    }

    #[test]
    fn recalibrated_statistics_average_the_batches() {
        let cfg = tiny();
        let (train_samples, _) = load_split(&cfg).unwrap();
        let set = PreparedSet::new(&train_samples, 2, 1000).unwrap();
        let mut net = initial_checkpoint(&cfg, &set).unwrap().network().unwrap();
        // Each batch on its own, with momentum 1 so the buffers hold exactly
        // that batch's statistics.
        let per_batch: Vec<_> = set
            .inputs
            .chunks(3)
            .map(|chunk| {
                let mut single = net.clone();
                single.bn.momentum = 1.0;
                let refs: Vec<_> = chunk.iter().collect();
                single.forward(&batch_input(&refs).unwrap(), &ForwardOptions::train(2)).unwrap();
                single.store.buffers
            })
            .collect();
        recalibrate_bn(&mut net, &set, 2, 3).unwrap();
        assert_eq!(net.bn.momentum, cfg.model.bn_momentum);
        for (name, stats) in &net.store.buffers {
            let (a, b) = (&per_batch[0][name], &per_batch[1][name]);
            for c in 0..stats.mean.len() {
                assert!((stats.mean[c] - (a.mean[c] + b.mean[c]) / 2.0).abs() <= 1e-5, "{name}");
                assert!((stats.var[c] - (a.var[c] + b.var[c]) / 2.0).abs() <= 1e-5 * (1.0 + stats.var[c]), "{name}");
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut cfg = tiny();
        cfg.training.epochs = 0;
        let out = train(&cfg, &mut |_, _| {}).unwrap();
        assert!(out.epochs.is_empty());
        let spec = cfg.model.network_spec(3, 2);
        let fresh = Network::<f32>::new(&spec, cfg.model.lif(), cfg.model.bn(), cfg.training.seed).unwrap();
        assert_eq!(out.checkpoint.store, fresh.store);
        assert_eq!(out.checkpoint.meta.config, cfg);
    }

    #[test]
    fn deterministic_and_reproducible_by_evaluate() {
        let cfg = tiny();
        let a = train(&cfg, &mut |_, _| {}).unwrap();
        let b = train(&cfg, &mut |_, _| {}).unwrap();
        assert_eq!(metrics_csv(&a.epochs), metrics_csv(&b.epochs));
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_ne!(a.checkpoint.store, initial_checkpoint(&cfg, &PreparedSet::new(&load_split(&cfg).unwrap().0, 2, 1000).unwrap()).unwrap().store);
        let (_, eval) = load_split(&cfg).unwrap();
        let set = PreparedSet::new(&eval, cfg.model.steps, cfg.data.dt).unwrap();
        let mut net = Checkpoint::from_bytes(&a.checkpoint.to_bytes()).unwrap().network().unwrap();
        let again = evaluate(&mut net, &a.checkpoint.meta.anchors, &set, cfg.model.steps, &cfg.eval).unwrap();
        assert_eq!(again, a.last_eval.unwrap());
        assert_eq!(again.metrics.map50, a.epochs[0].map50);
    }

    #[test]
    fn warm_start_checks_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.model.steps = 1;
        cfg.training.epochs = 0;
        let base = train(&cfg, &mut |_, _| {}).unwrap();
        let path = dir.path().join("t1.ckpt");
        base.checkpoint.save(&path).unwrap();

        let mut warm = tiny();
        warm.training.epochs = 0;
        warm.training.warm_start = Some(path.clone());
        let out = train(&warm, &mut |_, _| {}).unwrap();
        assert_eq!(out.checkpoint.store, base.checkpoint.store);
        assert_eq!(out.checkpoint.meta.anchors, base.checkpoint.meta.anchors);

        warm.model.depth = 18;
        let err = train(&warm, &mut |_, _| {}).unwrap_err();
        assert_eq!(err.class(), crate::ErrorClass::Config);
        assert!(err.to_string().contains("missing tensor stage1.block1"), "{err}");
    }

    #[test]
    fn empty_evaluation_set_is_an_error() {
        let cfg = tiny();
        let samples = synth_dataset(&SynthConfig { images: 3, size: 32, ..SynthConfig::default() }).unwrap();
        assert!(train_on(&cfg, &samples, &[], &mut |_, _| {}).is_err());
    }
}

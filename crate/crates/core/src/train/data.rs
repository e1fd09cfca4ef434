use crate::blocks::Input;
use crate::detection::GroundTruth;
use crate::encoding::{
    batch_images, batch_sequences, bin_events, image_to_tensor, load_dataset, synth_dataset, BinMode, BinSpec,
    FrameSequence, Sample, SampleInput, SynthConfig,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::RunConfig;

/// Samples turned into network-ready tensors.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub ids: Vec<String>,
    pub inputs: Vec<PreparedInput>,
    pub boxes: Vec<Vec<GroundTruth>>,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug)]
pub enum PreparedInput {
    /// `[C, H, W]`, repeated over time by the network.
    Image(Tensor<f32>),
    /// Events binned to `[T, 2, H, W]`.
    Frames(FrameSequence),
}

impl PreparedInput {
    pub fn channels(&self) -> usize {
        match self {
            PreparedInput::Image(t) => t.shape()[0],
            PreparedInput::Frames(s) => s.frames.shape()[1],
        }
    }

    /// Mirrors along the width axis, the height axis, or both.
    pub fn mirrored(&self, horizontal: bool, vertical: bool) -> Self {
        let mirror = |t: &Tensor<f32>| {
            let rank = t.shape().len();
            let (h, w) = (t.shape()[rank - 2], t.shape()[rank - 1]);
            Tensor::from_fn(t.shape(), |i| {
                let (x, y) = (i % w, (i / w) % h);
                let sx = if horizontal { w - 1 - x } else { x };
                let sy = if vertical { h - 1 - y } else { y };
                t.data()[i - x - y * w + sy * w + sx]
            })
        };
        match self {
            PreparedInput::Image(t) => PreparedInput::Image(mirror(t)),
            PreparedInput::Frames(s) => PreparedInput::Frames(FrameSequence { frames: mirror(&s.frames), dt: s.dt }),
        }
    }
}

pub fn mirror_boxes(boxes: &[GroundTruth], width: usize, height: usize, horizontal: bool, vertical: bool) -> Vec<GroundTruth> {
    boxes
        .iter()
        .map(|b| GroundTruth {
            x: if horizontal { width as f64 - b.x - b.w } else { b.x },
            y: if vertical { height as f64 - b.y - b.h } else { b.y },
            ..*b
        })
        .collect()
}

impl PreparedSet {
    /// Prepares samples for `steps` time steps. Event streams are binned
    /// from t = 0 with the configured bin width.
    pub fn new(samples: &[Sample], steps: usize, dt: u64) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Data("dataset is empty".into()));
        };
        let (width, height) = first.size();
        if width % 32 != 0 || height % 32 != 0 || width == 0 || height == 0 {
            return Err(Error::Data(format!("sample size {width}x{height} must be a positive multiple of 32")));
        }
        let mut inputs = Vec::with_capacity(samples.len());
        for s in samples {
            if s.size() != (width, height) {
                return Err(Error::Data(format!(
                    "sample {:?} is {}x{}, the first sample is {width}x{height}",
                    s.image_id,
                    s.size().0,
                    s.size().1
                )));
            }
            inputs.push(match &s.input {
                SampleInput::Image(img) => PreparedInput::Image(image_to_tensor(img)),
                SampleInput::Events { events, .. } => {
                    let spec = BinSpec { steps, dt, height, width, start: 0 };
                    let seq = bin_events(events, &spec, BinMode::Presence)
                        .map_err(|e| Error::Data(format!("sample {:?}: {e}", s.image_id)))?;
                    PreparedInput::Frames(seq)
                }
            });
        }
        let channels = inputs[0].channels();
        if inputs.iter().any(|i| i.channels() != channels) {
            return Err(Error::Data("dataset mixes images and event streams".into()));
        }
        Ok(Self {
            ids: samples.iter().map(|s| s.image_id.clone()).collect(),
            inputs,
            boxes: samples.iter().map(|s| s.boxes.clone()).collect(),
            width,
            height,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.inputs[0].channels()
    }
}

/// Batches prepared inputs into one network input.
pub fn batch_input(items: &[&PreparedInput]) -> Result<Input<f32>> {
    match items.first() {
        None => Err(Error::Data("empty batch".into())),
        Some(PreparedInput::Image(_)) => {
            let imgs = items
                .iter()
                .map(|i| match i {
                    PreparedInput::Image(t) => Ok(t),
                    PreparedInput::Frames(_) => Err(Error::Data("batch mixes images and event streams".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Input::Static(batch_images(&imgs)?))
        }
        Some(PreparedInput::Frames(_)) => {
            let seqs = items
                .iter()
                .map(|i| match i {
                    PreparedInput::Frames(s) => Ok(s),
                    PreparedInput::Image(_) => Err(Error::Data("batch mixes images and event streams".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Input::Sequence(batch_sequences(&seqs)?))
        }
    }
}

/// Training and evaluation samples named by the config: the two annotation
/// files, or the synthetic dataset split in order.
pub fn load_split(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = &cfg.data;
    match (&d.train, &d.eval) {
        (Some(train), Some(eval)) => Ok((load_dataset(train, d.classes)?, load_dataset(eval, d.classes)?)),
        (Some(_), None) | (None, Some(_)) => {
            Err(Error::Config("data.train and data.eval must be given together".into()))
        }
        (None, None) => {
            let s = &d.synth;
            let synth = SynthConfig {
                seed: s.seed,
                images: s.train_images + s.eval_images,
                size: s.size,
                mode: s.mode,
                steps: s.steps,
                dt: d.dt,
            };
            let mut all = synth_dataset(&synth)?;
            let eval = all.split_off(s.train_images);
            Ok((all, eval))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::SynthMode;

    #[test]
    fn mirrors_are_involutions_and_move_boxes() {
        let t = Tensor::from_fn(&[2, 2, 3], |i| i as f32);
        let p = PreparedInput::Image(t.clone());
        let PreparedInput::Image(f) = p.mirrored(true, false) else { unreachable!() };
        assert_eq!(&f.data()[..6], &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        let PreparedInput::Image(v) = p.mirrored(false, true) else { unreachable!() };
        assert_eq!(&v.data()[..6], &[3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
        let PreparedInput::Image(hv) = p.mirrored(true, true) else { unreachable!() };
        assert_eq!(&hv.data()[6..], &[11.0, 10.0, 9.0, 8.0, 7.0, 6.0]);
        for (h, v) in [(true, false), (false, true), (true, true)] {
            let PreparedInput::Image(back) = p.mirrored(h, v).mirrored(h, v) else { unreachable!() };
            assert_eq!(back, t);
        }
        let b = GroundTruth { x: 2.0, y: 1.0, w: 10.0, h: 5.0, class_id: 1 };
        assert_eq!(mirror_boxes(&[b], 32, 64, true, false)[0], GroundTruth { x: 20.0, ..b });
        assert_eq!(mirror_boxes(&[b], 32, 64, false, true)[0], GroundTruth { y: 58.0, ..b });
    }

    #[test]
    fn synth_split_and_preparation() {
        let mut cfg = RunConfig::default();
        cfg.data.synth.train_images = 3;
        cfg.data.synth.eval_images = 2;
        cfg.data.synth.size = 32;
        let (train, eval) = load_split(&cfg).unwrap();
        assert_eq!((train.len(), eval.len()), (3, 2));
        let set = PreparedSet::new(&train, 4, 1000).unwrap();
        assert_eq!(set.channels(), 3);
        cfg.data.synth.mode = SynthMode::Events;
        let (train, _) = load_split(&cfg).unwrap();
        let set = PreparedSet::new(&train, 4, 1000).unwrap();
        assert_eq!(set.channels(), 2);
        let refs: Vec<_> = set.inputs.iter().collect();
        let Input::Sequence(x) = batch_input(&refs).unwrap() else { panic!("events batch as sequences") };
        assert_eq!(x.shape(), &[12, 2, 32, 32]);
        assert!(PreparedSet::new(&[], 4, 1000).is_err());
    }
}

//! Network inputs: replicated static frames, binned event streams, the
//! synthetic shapes dataset and annotation files.

mod annotations;
mod events;
mod synth;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use annotations::{parse_annotations_jsonl, write_annotations_jsonl, Annotation};
pub use events::{
    bin_events, parse_events_binary, parse_events_csv, read_events, write_events, write_events_binary,
    write_events_csv, BinMode, BinSpec, EventFormat, EventRecord, BINARY_MAGIC, BINARY_VERSION,
};
pub use image::RgbImage;
pub use synth::{synth_dataset, Sample, SampleInput, SynthConfig, SynthMode, CLASS_DISK, CLASS_SQUARE, SYNTH_CLASSES};

/// `[T, C, H, W]` frames. `dt` is the bin width in microseconds, absent for
/// replicated static images.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Tensor<f32>,
    pub dt: Option<u64>,
}

impl FrameSequence {
    pub fn steps(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Total window `T·dt`.
    pub fn gamma(&self) -> Option<u64> {
        self.dt.map(|dt| dt * self.steps() as u64)
    }
}

/// Repeats a `[C, H, W]` image over `steps` frames.
pub fn replicate_static(image: &Tensor<f32>, steps: usize) -> Result<FrameSequence> {
    if steps == 0 {
        return Err(Error::Config("time steps must be at least 1".into()));
    }
    if image.shape().len() != 3 {
        return Err(Error::shape("replicate_static", format!("expected [C, H, W], got {:?}", image.shape())));
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(image.shape());
    let data = image.data().repeat(steps);
    Ok(FrameSequence { frames: Tensor::new(shape, data)?, dt: None })
}

/// Interleaves per-sample sequences into the time-major `[T·B, C, H, W]`
/// layout the network consumes: row `t·B + b` is frame `t` of sample `b`.
pub fn batch_sequences(seqs: &[&FrameSequence]) -> Result<Tensor<f32>> {
    let Some(first) = seqs.first() else {
        return Err(Error::Data("cannot batch an empty list of sequences".into()));
    };
    let shape = first.frames.shape().to_vec();
    if seqs.iter().any(|s| s.frames.shape() != shape.as_slice()) {
        return Err(Error::shape("batch_sequences", "sequences differ in shape"));
    }
    let frame = shape[1..].iter().product::<usize>();
    let (steps, batch) = (shape[0], seqs.len());
    let mut data = Vec::with_capacity(steps * batch * frame);
    for t in 0..steps {
        for s in seqs {
            data.extend_from_slice(&s.frames.data()[t * frame..(t + 1) * frame]);
        }
    }
    let mut out_shape = vec![steps * batch];
    out_shape.extend_from_slice(&shape[1..]);
    Tensor::new(out_shape, data)
}

/// Stacks `[C, H, W]` images into `[B, C, H, W]`.
pub fn batch_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::Data("cannot batch an empty list of images".into()));
    };
    let shape = first.shape().to_vec();
    if images.iter().any(|t| t.shape() != shape.as_slice()) {
        return Err(Error::shape("batch_images", "images differ in shape"));
    }
    let mut out_shape = vec![images.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::new(out_shape, images.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// RGB pixels scaled to `[0, 1]` as `[3, H, W]`.
pub fn image_to_tensor(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f32::from(raw[p * 3 + c]) / 255.0
    })
}

/// One RGB image per step of a `[T, 2, H, W]` event sequence: positive
/// events in red, negative in blue, scaled by the largest bin value.
pub fn preview_frames(seq: &FrameSequence) -> Result<Vec<image::RgbImage>> {
    let [steps, channels, h, w] = seq.frames.dims4("preview_frames")?;
    if channels != 2 {
        return Err(Error::shape("preview_frames", format!("expected 2 polarity channels, got {channels}")));
    }
    let d = seq.frames.data();
    let peak = d.iter().copied().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE);
    let level = |v: f32| (v / peak * 255.0).round() as u8;
    Ok((0..steps)
        .map(|t| {
            image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let at = |c: usize| d[((t * 2 + c) * h + y as usize) * w + x as usize];
                image::Rgb([level(at(0)), 0, level(at(1))])
            })
        })
        .collect())
}

/// Reads a PNG as 8-bit RGB.
pub fn open_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// Writes images as PNG (or streams in the binary event format) next to an
/// `annotations.jsonl` that lists them.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    let mut anns = Vec::with_capacity(samples.len());
    for s in samples {
        let sub = dir.join(match s.input {
            SampleInput::Image(_) => "images",
            SampleInput::Events { .. } => "events",
        });
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let (rel, width, height) = match &s.input {
            SampleInput::Image(img) => {
                let rel = format!("images/{}.png", s.image_id);
                let path = dir.join(&rel);
                img.save(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                (rel, None, None)
            }
            SampleInput::Events { events, width, height } => {
                let rel = format!("events/{}.evs", s.image_id);
                write_events(&dir.join(&rel), events, EventFormat::Binary)?;
                (rel, Some(*width), Some(*height))
            }
        };
        anns.push(Annotation { image_id: s.image_id.clone(), path: rel, width, height, boxes: s.boxes.clone() });
    }
    let path = dir.join(ANNOTATIONS_FILE);
    std::fs::write(&path, write_annotations_jsonl(&anns)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads every sample listed in an annotation file, or in the
/// `annotations.jsonl` of a directory. Paths ending in `.png` are images;
/// anything else is an event stream. Boxes are checked
/// against the sample size and `classes`.
pub fn load_dataset(path: &Path, classes: usize) -> Result<Vec<Sample>> {
    let file = if path.is_dir() { path.join(ANNOTATIONS_FILE) } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(Error::Data(format!("annotation file {} not found", file.display())));
    }
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let root = file.parent().unwrap_or(Path::new("."));
    let anns = parse_annotations_jsonl(&text).map_err(|e| e.in_file(&file))?;
    if anns.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", file.display())));
    }
    anns.into_iter()
        .map(|a| {
            let p = root.join(&a.path);
            let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            let input = match ext.as_deref() {
                Some("png") => SampleInput::Image(open_rgb(&p)?),
                _ => {
                    let (Some(width), Some(height)) = (a.width, a.height) else {
                        return Err(Error::Data(format!("event sample {:?} needs width and height", a.image_id)));
                    };
                    let events = read_events(&p, EventFormat::from_path(&p))?;
                    SampleInput::Events { events, width, height }
                }
            };
            let sample = Sample { image_id: a.image_id, input, boxes: a.boxes };
            let (w, h) = sample.size();
            for b in &sample.boxes {
                b.validate(w, h, classes).map_err(|e| Error::Data(format!("sample {:?}: {e}", sample.image_id)))?;
            }
            Ok(sample)
        })
        .collect()
}

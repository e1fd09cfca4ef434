use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EventRecord;
use crate::detection::GroundTruth;
use crate::error::{Error, Result};

pub const SYNTH_CLASSES: usize = 2;
pub const CLASS_SQUARE: usize = 0;
pub const CLASS_DISK: usize = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    #[default]
    Frames,
    Events,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub images: usize,
    pub size: usize,
    pub mode: SynthMode,
    /// Micro-frames of motion in events mode.
    pub steps: usize,
    /// Microseconds between micro-frames in events mode.
    pub dt: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seed: 0, images: 100, size: 64, mode: SynthMode::Frames, steps: 4, dt: 1000 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 || self.size > usize::from(u16::MAX) {
            return Err(Error::Config(format!("synthetic image size must be in [32, 65535], got {}", self.size)));
        }
        if self.mode == SynthMode::Events && (self.steps == 0 || self.dt == 0) {
            return Err(Error::Config("events mode needs steps >= 1 and dt >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleInput {
    /// Row-major RGB pixels.
    Image(image::RgbImage),
    Events { events: Vec<EventRecord>, width: usize, height: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub input: SampleInput,
    pub boxes: Vec<GroundTruth>,
}

impl Sample {
    /// `(width, height)` in pixels.
    pub fn size(&self) -> (usize, usize) {
        match &self.input {
            SampleInput::Image(img) => (img.width() as usize, img.height() as usize),
            SampleInput::Events { width, height, .. } => (*width, *height),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class_id: usize,
    x0: i64,
    y0: i64,
    side: i64,
    vx: i64,
    vy: i64,
}

impl Shape {
    /// Whether the pixel is covered after `k` micro-frames of motion.
    fn covers(&self, px: i64, py: i64, k: i64) -> bool {
        let (x0, y0) = (self.x0 + self.vx * k, self.y0 + self.vy * k);
        if px < x0 || py < y0 || px >= x0 + self.side || py >= y0 + self.side {
            return false;
        }
        match self.class_id {
            CLASS_SQUARE => true,
            _ => {
                let r = self.side as f64 / 2.0;
                let dx = (px - x0) as f64 + 0.5 - r;
                let dy = (py - y0) as f64 + 0.5 - r;
                dx * dx + dy * dy <= r * r
            }
        }
    }

    /// Bounding box of the covered pixels after `k` micro-frames.
    fn tight_box(&self, k: i64) -> GroundTruth {
        let (x0, y0) = (self.x0 + self.vx * k, self.y0 + self.vy * k);
        let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for py in y0..y0 + self.side {
            for px in x0..x0 + self.side {
                if self.covers(px, py, k) {
                    lo_x = lo_x.min(px);
                    lo_y = lo_y.min(py);
                    hi_x = hi_x.max(px);
                    hi_y = hi_y.max(py);
                }
            }
        }
        GroundTruth {
            x: lo_x as f64,
            y: lo_y as f64,
            w: (hi_x - lo_x + 1) as f64,
            h: (hi_y - lo_y + 1) as f64,
            class_id: self.class_id,
        }
    }

    /// Region swept over micro-frames `0..=steps`, as `[x0, y0, x1, y1)`.
    fn swept(&self, steps: i64) -> [i64; 4] {
        let (ex, ey) = (self.x0 + self.vx * steps, self.y0 + self.vy * steps);
        [self.x0.min(ex), self.y0.min(ey), self.x0.max(ex) + self.side, self.y0.max(ey) + self.side]
    }
}

const GAP: i64 = 2;
const PLACEMENT_TRIES: usize = 200;

fn place_shapes(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<Shape> {
    let size = cfg.size as i64;
    let lo = (size * 3 / 16).max(6);
    let hi = (size * 3 / 8).max(lo);
    let moving = cfg.mode == SynthMode::Events;
    let steps = if moving { cfg.steps as i64 } else { 0 };
    let wanted = rng.random_range(1..=3);
    let mut shapes: Vec<Shape> = Vec::new();
    for _ in 0..PLACEMENT_TRIES {
        if shapes.len() == wanted {
            break;
        }
        let side = rng.random_range(lo..=hi);
        let (vx, vy) = if moving {
            loop {
                let v = (rng.random_range(-2..=2i64), rng.random_range(-2..=2i64));
                if v != (0, 0) {
                    break v;
                }
            }
        } else {
            (0, 0)
        };
        // Start positions that keep the whole trajectory inside the image.
        let span_x = (vx * steps).abs();
        let span_y = (vy * steps).abs();
        if side + span_x > size || side + span_y > size {
            continue;
        }
        let sx = rng.random_range(0..=size - side - span_x);
        let sy = rng.random_range(0..=size - side - span_y);
        let shape = Shape {
            class_id: rng.random_range(0..SYNTH_CLASSES),
            x0: if vx < 0 { sx + span_x } else { sx },
            y0: if vy < 0 { sy + span_y } else { sy },
            side,
            vx,
            vy,
        };
        let a = shape.swept(steps);
        let clear = shapes.iter().all(|other| {
            let b = other.swept(steps);
            a[2] + GAP <= b[0] || b[2] + GAP <= a[0] || a[3] + GAP <= b[1] || b[3] + GAP <= a[1]
        });
        if clear {
            shapes.push(shape);
        }
    }
    shapes
}

fn render_image(rng: &mut ChaCha8Rng, shapes: &[Shape], size: usize) -> image::RgbImage {
    let mut img = image::RgbImage::from_fn(size as u32, size as u32, |_, _| {
        image::Rgb([rng.random_range(0..=100), rng.random_range(0..=100), rng.random_range(0..=100)])
    });
    for s in shapes {
        let color = image::Rgb([rng.random_range(150..=255), rng.random_range(150..=255), rng.random_range(150..=255)]);
        for py in s.y0..s.y0 + s.side {
            for px in s.x0..s.x0 + s.side {
                if s.covers(px, py, 0) {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }
    img
}

/// Events for every pixel whose coverage changes between consecutive
/// micro-frames. The change from frame `k - 1` to `k` is stamped inside
/// `[(k - 1)·dt, k·dt)`, so binning with the same `dt` puts it in bin `k - 1`.
fn render_events(rng: &mut ChaCha8Rng, shapes: &[Shape], cfg: &SynthConfig) -> Vec<EventRecord> {
    let size = cfg.size as i64;
    let mut events = Vec::new();
    for k in 1..=cfg.steps as i64 {
        let base = (k as u64 - 1) * cfg.dt;
        for py in 0..size {
            for px in 0..size {
                let before = shapes.iter().any(|s| s.covers(px, py, k - 1));
                let after = shapes.iter().any(|s| s.covers(px, py, k));
                if before != after {
                    events.push(EventRecord {
                        t: base + rng.random_range(0..cfg.dt),
                        x: px as u16,
                        y: py as u16,
                        p: if after { 1 } else { -1 },
                    });
                }
            }
        }
    }
    events.sort_by_key(|e| e.t);
    events
}

/// Deterministic toy detection set: filled squares (class 0) and disks
/// (class 1). Frames mode draws them on uniform noise; events mode moves them
/// linearly and labels their final position.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = cfg.steps as i64;
    let samples = (0..cfg.images)
        .map(|i| {
            let shapes = place_shapes(&mut rng, cfg);
            let (input, boxes) = match cfg.mode {
                SynthMode::Frames => (
                    SampleInput::Image(render_image(&mut rng, &shapes, cfg.size)),
                    shapes.iter().map(|s| s.tight_box(0)).collect(),
                ),
                SynthMode::Events => (
                    SampleInput::Events {
                        events: render_events(&mut rng, &shapes, cfg),
                        width: cfg.size,
                        height: cfg.size,
                    },
                    shapes.iter().map(|s| s.tight_box(steps)).collect(),
                ),
            };
            Sample { image_id: format!("{i:06}"), input, boxes }
        })
        .collect();
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{bin_events, BinMode, BinSpec};

    #[test]
    fn deterministic_and_in_bounds() {
        let cfg = SynthConfig { images: 50, ..SynthConfig::default() };
        let a = synth_dataset(&cfg).unwrap();
        assert_eq!(a, synth_dataset(&cfg).unwrap());
        assert_ne!(a, synth_dataset(&SynthConfig { seed: 1, ..cfg.clone() }).unwrap());
        let mut classes = [0; SYNTH_CLASSES];
        for s in &a {
            assert!((1..=3).contains(&s.boxes.len()));
            for b in &s.boxes {
                b.validate(64, 64, SYNTH_CLASSES).unwrap();
                assert!(b.w >= 4.0 && b.h >= 4.0);
                classes[b.class_id] += 1;
            }
        }
        assert!(classes.iter().all(|&c| c > 10), "{classes:?}");
    }

    #[test]
    fn boxes_are_tight() {
        let cfg = SynthConfig { images: 20, size: 48, ..SynthConfig::default() };
        for s in synth_dataset(&cfg).unwrap() {
            let SampleInput::Image(img) = &s.input else { panic!() };
            for b in &s.boxes {
                // Object pixels are brighter than any background pixel in
                // at least one channel; each edge row/column of a tight box
                // holds at least one of them.
                let bright = |x: u32, y: u32| img.get_pixel(x, y).0.iter().any(|&c| c >= 150);
                let (x0, y0, x1, y1) = (b.x as u32, b.y as u32, (b.x + b.w) as u32 - 1, (b.y + b.h) as u32 - 1);
                assert!((x0..=x1).any(|x| bright(x, y0)) && (x0..=x1).any(|x| bright(x, y1)));
                assert!((y0..=y1).any(|y| bright(x0, y)) && (y0..=y1).any(|y| bright(x1, y)));
            }
        }
    }

    #[test]
    fn events_bin_back_to_moving_edges() {
        let cfg = SynthConfig { images: 10, size: 40, mode: SynthMode::Events, steps: 5, dt: 700, seed: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for s in synth_dataset(&cfg).unwrap() {
            // Replay the placement to get the shapes back.
            let shapes = place_shapes(&mut rng, &cfg);
            let SampleInput::Events { events, .. } = &s.input else { panic!() };
            render_events(&mut rng, &shapes, &cfg);
            assert!(!events.is_empty());
            assert!(events.windows(2).all(|w| w[0].t <= w[1].t));
            let spec = BinSpec { steps: cfg.steps, dt: cfg.dt, height: 40, width: 40, start: 0 };
            let frames = bin_events(events, &spec, BinMode::Presence).unwrap().frames;
            let d = frames.data();
            for k in 0..cfg.steps {
                for y in 0..40i64 {
                    for x in 0..40i64 {
                        let before = shapes.iter().any(|sh| sh.covers(x, y, k as i64));
                        let after = shapes.iter().any(|sh| sh.covers(x, y, k as i64 + 1));
                        let pos = d[((k * 2) * 40 + y as usize) * 40 + x as usize];
                        let neg = d[((k * 2 + 1) * 40 + y as usize) * 40 + x as usize];
                        assert_eq!(pos == 1.0, !before && after);
                        assert_eq!(neg == 1.0, before && !after);
                    }
                }
            }
            for b in &s.boxes {
                b.validate(40, 40, SYNTH_CLASSES).unwrap();
            }
        }
    }

    #[test]
    fn rejects_small_images() {
        assert!(synth_dataset(&SynthConfig { size: 31, ..SynthConfig::default() }).is_err());
    }
}

use serde::{Deserialize, Serialize};

use super::FrameSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BINARY_MAGIC: &[u8; 4] = b"EVS1";
pub const BINARY_VERSION: u32 = 1;
const HEADER_LEN: usize = 8;
const RECORD_LEN: usize = 16;

/// One event: timestamp in microseconds, pixel, and polarity ±1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: i8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    /// Guesses the format from a file extension: `.csv` or anything else.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => EventFormat::Csv,
            _ => EventFormat::Binary,
        }
    }
}

fn check_order(prev: &mut Option<u64>, t: u64, location: impl FnOnce() -> String) -> Result<()> {
    if let Some(p) = *prev {
        if t < p {
            return Err(Error::parse(location(), format!("timestamp {t} precedes {p}")));
        }
    }
    *prev = Some(t);
    Ok(())
}

/// Parses `t,x,y,p` lines. Blank lines and lines starting with `#` are
/// skipped, as is a leading `t,x,y,p` header.
pub fn parse_events_csv(text: &str) -> Result<Vec<EventRecord>> {
    let mut out = Vec::new();
    let mut prev = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let loc = || format!("line {}", i + 1);
        if line.is_empty() || line.starts_with('#') || (out.is_empty() && line.eq_ignore_ascii_case("t,x,y,p")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [t, x, y, p] = fields[..] else {
            return Err(Error::parse(loc(), format!("expected 4 fields t,x,y,p, found {}", fields.len())));
        };
        let t: u64 = t.parse().map_err(|e| Error::parse(loc(), format!("timestamp {t:?}: {e}")))?;
        let x: u16 = x.parse().map_err(|e| Error::parse(loc(), format!("x {x:?}: {e}")))?;
        let y: u16 = y.parse().map_err(|e| Error::parse(loc(), format!("y {y:?}: {e}")))?;
        let p: i8 = match p {
            "1" | "+1" => 1,
            "-1" => -1,
            other => return Err(Error::parse(loc(), format!("polarity must be 1 or -1, got {other:?}"))),
        };
        check_order(&mut prev, t, loc)?;
        out.push(EventRecord { t, x, y, p });
    }
    Ok(out)
}

pub fn write_events_csv(events: &[EventRecord]) -> String {
    let mut out = String::from("t,x,y,p\n");
    for e in events {
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p));
    }
    out
}

/// Parses the `EVS1` container: magic, little-endian `u32` version, then
/// 16-byte records `t: u64, x: u16, y: u16, p: i8` and three zero bytes.
pub fn parse_events_binary(bytes: &[u8]) -> Result<Vec<EventRecord>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse("byte 0", format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != BINARY_MAGIC {
        return Err(Error::parse("byte 0", "missing EVS1 magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != BINARY_VERSION {
        return Err(Error::parse("byte 4", format!("unsupported version {version}")));
    }
    let body = &bytes[HEADER_LEN..];
    if !body.len().is_multiple_of(RECORD_LEN) {
        let offset = HEADER_LEN + body.len() / RECORD_LEN * RECORD_LEN;
        return Err(Error::parse(format!("byte {offset}"), "truncated record"));
    }
    let mut out = Vec::with_capacity(body.len() / RECORD_LEN);
    let mut prev = None;
    for (i, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let offset = HEADER_LEN + i * RECORD_LEN;
        let t = u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes"));
        let x = u16::from_le_bytes(rec[8..10].try_into().expect("2 bytes"));
        let y = u16::from_le_bytes(rec[10..12].try_into().expect("2 bytes"));
        let p = rec[12] as i8;
        if p != 1 && p != -1 {
            return Err(Error::parse(format!("byte {}", offset + 12), format!("polarity must be 1 or -1, got {p}")));
        }
        if rec[13..16] != [0, 0, 0] {
            return Err(Error::parse(format!("byte {}", offset + 13), "padding bytes must be zero"));
        }
        check_order(&mut prev, t, || format!("byte {offset}"))?;
        out.push(EventRecord { t, x, y, p });
    }
    Ok(out)
}

pub fn write_events_binary(events: &[EventRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * events.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    for e in events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p as u8);
        out.extend_from_slice(&[0, 0, 0]);
    }
    out
}

pub fn read_events(path: &std::path::Path, format: EventFormat) -> Result<Vec<EventRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        EventFormat::Binary => parse_events_binary(&bytes),
        EventFormat::Csv => std::str::from_utf8(&bytes)
            .map_err(|e| Error::parse("byte 0", format!("not UTF-8: {e}")))
            .and_then(parse_events_csv),
    }
    .map_err(|e| e.in_file(path))
}

pub fn write_events(path: &std::path::Path, events: &[EventRecord], format: EventFormat) -> Result<()> {
    let bytes = match format {
        EventFormat::Binary => write_events_binary(events),
        EventFormat::Csv => write_events_csv(events).into_bytes(),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// How events landing on one pixel, bin and polarity are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinMode {
    /// 1 if at least one event arrived; keeps event input spike-valued.
    #[default]
    Presence,
    /// Number of events. Not binary, so such input is not spike input.
    Count,
}

/// Geometry of a binning window: `steps` bins of `dt` microseconds from
/// `start`, on a `height × width` sensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinSpec {
    pub steps: usize,
    pub dt: u64,
    pub height: usize,
    pub width: usize,
    pub start: u64,
}

/// Bins a stream into `[T, 2, H, W]` frames; channel 0 holds positive and
/// channel 1 negative events. Events outside `[start, start + T·dt)` are
/// dropped; events outside the sensor are an error.
pub fn bin_events(events: &[EventRecord], spec: &BinSpec, mode: BinMode) -> Result<FrameSequence> {
    let BinSpec { steps, dt, height, width, start } = *spec;
    if dt == 0 {
        return Err(Error::Config("bin width dt must be positive".into()));
    }
    if steps == 0 {
        return Err(Error::Config("time steps must be at least 1".into()));
    }
    let mut frames = Tensor::zeros(&[steps, 2, height, width]);
    let data = frames.data_mut();
    let span = dt.checked_mul(steps as u64).ok_or_else(|| Error::Config("binning window overflows".into()))?;
    for (i, e) in events.iter().enumerate() {
        let (x, y) = (usize::from(e.x), usize::from(e.y));
        if x >= width || y >= height {
            return Err(Error::Data(format!(
                "event {i} at ({x}, {y}) lies outside the {width}x{height} sensor"
            )));
        }
        if e.t < start || e.t - start >= span {
            continue;
        }
        let bin = ((e.t - start) / dt) as usize;
        let channel = if e.p > 0 { 0 } else { 1 };
        let idx = ((bin * 2 + channel) * height + y) * width + x;
        match mode {
            BinMode::Presence => data[idx] = 1.0,
            BinMode::Count => data[idx] += 1.0,
        }
    }
    Ok(FrameSequence { frames, dt: Some(dt) })
}

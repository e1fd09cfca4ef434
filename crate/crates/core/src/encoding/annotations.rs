use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::detection::GroundTruth;
use crate::error::{Error, Result};

/// One line of an annotation file. `path` is relative to the file's
/// directory. Event streams carry no image size, so their sensor size is
/// given by `width` and `height`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub image_id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    pub boxes: Vec<GroundTruth>,
}

pub fn parse_annotations_jsonl(text: &str) -> Result<Vec<Annotation>> {
    let mut out: Vec<Annotation> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("line {}", i + 1);
        let ann: Annotation = serde_json::from_str(line).map_err(|e| Error::parse(loc(), e.to_string()))?;
        if ann.image_id.is_empty() || ann.path.is_empty() {
            return Err(Error::parse(loc(), "image_id and path must be non-empty"));
        }
        if !seen.insert(ann.image_id.clone()) {
            return Err(Error::parse(loc(), format!("duplicate image_id {:?}", ann.image_id)));
        }
        if ann.width.is_some() != ann.height.is_some() {
            return Err(Error::parse(loc(), "width and height must be given together"));
        }
        for b in &ann.boxes {
            if ![b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite()) || b.w <= 0.0 || b.h <= 0.0 {
                return Err(Error::parse(loc(), format!("degenerate box {b:?}")));
            }
        }
        out.push(ann);
    }
    Ok(out)
}

pub fn write_annotations_jsonl(anns: &[Annotation]) -> String {
    let mut out = String::new();
    for a in anns {
        out.push_str(&serde_json::to_string(a).expect("plain struct serializes"));
        out.push('\n');
    }
    out
}

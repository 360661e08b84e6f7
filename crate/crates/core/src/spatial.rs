//! Instruction/object/layout data and the geometry used to decide which
//! annotated objects a camera can see.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatClient, ChatError, ChatMessage};
use crate::world::ObjectAnnotation;

/// Objects farther than this from the camera are never reported.
pub const VISIBILITY_RANGE: f64 = 3.0;
/// Fraction of a box's area that a closer box must cover to hide it.
pub const OCCLUSION_THRESHOLD: f64 = 0.5;

const MIN_DEPTH: f64 = 1e-9;

pub fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

fn dedup_names(names: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    names
        .into_iter()
        .filter(|n| !n.trim().is_empty() && seen.insert(normalize_name(n)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoSample {
    pub instruction: String,
    pub direct_objects: Vec<String>,
    pub inferred_objects: Vec<String>,
    pub layout: String,
}

#[derive(Debug, Error)]
pub enum IoSampleError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("sample {index}: {reason}")]
    Invalid { index: usize, reason: String },
}

impl IoSample {
    pub fn validate(&self) -> Result<(), String> {
        for (field, list) in [
            ("direct_objects", &self.direct_objects),
            ("inferred_objects", &self.inferred_objects),
        ] {
            if list.iter().any(|n| n.trim().is_empty()) {
                return Err(format!("{field} contains an empty name"));
            }
            if dedup_names(list.iter().cloned()).len() != list.len() {
                return Err(format!("{field} contains duplicates"));
            }
        }
        Ok(())
    }

    pub fn all_objects(&self) -> Vec<String> {
        dedup_names(self.direct_objects.iter().chain(&self.inferred_objects).cloned())
    }
}

pub fn load_io_samples(path: impl AsRef<Path>) -> Result<Vec<IoSample>, IoSampleError> {
    let samples: Vec<IoSample> = serde_json::from_str(&fs::read_to_string(path)?)?;
    for (index, s) in samples.iter().enumerate() {
        s.validate()
            .map_err(|reason| IoSampleError::Invalid { index, reason })?;
    }
    Ok(samples)
}

/// Objects pulled out of an instruction, in order of relevance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub direct: Vec<String>,
    pub inferred: Vec<String>,
    pub layout: Option<String>,
}

impl Extraction {
    pub fn all_objects(&self) -> Vec<String> {
        dedup_names(self.direct.iter().chain(&self.inferred).cloned())
    }

    pub fn is_empty(&self) -> bool {
        self.direct.is_empty() && self.inferred.is_empty() && self.layout.is_none()
    }
}

impl From<&IoSample> for Extraction {
    fn from(s: &IoSample) -> Self {
        Self {
            direct: s.direct_objects.clone(),
            inferred: s.inferred_objects.clone(),
            layout: Some(s.layout.clone()),
        }
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Vocabulary entries mentioned in the instruction, by first occurrence.
/// Matching is on whole lowercase tokens; where entries overlap the longest
/// one wins.
pub fn extract_objects_rule_based(instruction: &str, vocabulary: &BTreeSet<String>) -> Extraction {
    let words = tokens(instruction);
    let entries: Vec<(&String, Vec<String>)> = vocabulary
        .iter()
        .map(|v| (v, tokens(v)))
        .filter(|(_, t)| !t.is_empty())
        .collect();
    let mut direct: Vec<String> = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let best = entries
            .iter()
            .filter(|(_, t)| words[i..].starts_with(t))
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then_with(|| b.0.cmp(a.0)));
        match best {
            Some((name, t)) => {
                if !direct.contains(name) {
                    direct.push((*name).clone());
                }
                i += t.len();
            }
            None => i += 1,
        }
    }
    Extraction {
        direct,
        inferred: Vec::new(),
        layout: None,
    }
}

pub const OBJECT_EXTRACTION_PROMPT: &str = "\
You help a navigation agent understand an indoor route instruction.
Read the instruction and list the objects that matter for following it.
Direct objects are mentioned explicitly in the instruction.
Inferred objects are not mentioned but are likely to be seen along the route or at the destination.
Order each list from most to least relevant.
Then describe the likely spatial layout of the destination in one or two sentences.

Answer with exactly these three lines:
Direct Objects: ['object', ...]
Inferred Objects: ['object', ...]
Destination Spatial Layout: <description>";

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error(transparent)]
    Transport(#[from] ChatError),
    #[error("could not parse extraction reply: {reason}")]
    Parse { reason: String, raw: String },
}

/// Asks a chat model to extract objects and the destination layout.
pub fn extract_objects_external(instruction: &str, client: &dyn ChatClient) -> Result<Extraction, ExtractionError> {
    let messages = [
        ChatMessage::system(OBJECT_EXTRACTION_PROMPT),
        ChatMessage::user(format!("Instruction: {instruction}")),
    ];
    let raw = client.complete(&messages)?;
    parse_extraction_reply(&raw)
}

pub fn parse_extraction_reply(raw: &str) -> Result<Extraction, ExtractionError> {
    let fail = |reason: &str| ExtractionError::Parse {
        reason: reason.to_string(),
        raw: raw.to_string(),
    };
    let mut direct = None;
    let mut inferred = None;
    let mut layout = None;
    for line in raw.lines() {
        let line = line.trim().trim_start_matches(['-', '*', ' ']).replace("**", "");
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        match key.trim().to_lowercase().as_str() {
            "direct objects" => {
                direct = Some(parse_name_list(value).ok_or_else(|| fail("malformed direct object list"))?)
            }
            "inferred objects" | "potential objects" => {
                inferred = Some(parse_name_list(value).ok_or_else(|| fail("malformed inferred object list"))?)
            }
            "destination spatial layout" | "layout" => {
                let text = value.trim().trim_matches('"').trim();
                if !text.is_empty() {
                    layout = Some(text.to_string());
                }
            }
            _ => {}
        }
    }
    Ok(Extraction {
        direct: dedup_names(direct.ok_or_else(|| fail("missing Direct Objects line"))?),
        inferred: dedup_names(inferred.unwrap_or_default()),
        layout,
    })
}

/// Parses `['a', "b", c]`; bare comma lists are accepted too.
fn parse_name_list(text: &str) -> Option<Vec<String>> {
    let text = text.trim();
    let inner = match (text.starts_with('['), text.ends_with(']')) {
        (true, true) => &text[1..text.len() - 1],
        (false, false) => text,
        _ => return None,
    };
    let mut items = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.next_if(|c| c.is_whitespace() || *c == ',').is_some() {}
        let Some(&c) = chars.peek() else { break };
        let mut item = String::new();
        if c == '\'' || c == '"' || c == '\u{2018}' || c == '\u{201c}' {
            chars.next();
            let close = match c {
                '\u{2018}' => '\u{2019}',
                '\u{201c}' => '\u{201d}',
                other => other,
            };
            loop {
                match chars.next() {
                    Some(ch) if ch == close => break,
                    Some(ch) => item.push(ch),
                    None => return None,
                }
            }
        } else {
            while let Some(ch) = chars.next_if(|ch| *ch != ',') {
                item.push(ch);
            }
        }
        let item = item.trim();
        if !item.is_empty() {
            items.push(item.to_string());
        }
    }
    Some(items)
}

/// Task objects present in the current view, in task order.
pub fn enhance_observation<S: AsRef<str>, T: AsRef<str>>(visible: &[S], task_objects: &[T]) -> Vec<String> {
    let visible: HashSet<String> = visible.iter().map(|v| normalize_name(v.as_ref())).collect();
    dedup_names(
        task_objects
            .iter()
            .filter(|t| visible.contains(&normalize_name(t.as_ref())))
            .map(|t| t.as_ref().to_string()),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    /// Clockwise from north, radians.
    pub heading: f64,
    /// Upward from horizontal, radians.
    pub elevation: f64,
    pub focal: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraPose {
    /// Camera basis `(right, up, forward)` in world coordinates.
    fn basis(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let (sh, ch) = self.heading.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        let forward = Vector3::new(sh * ce, ch * ce, se);
        let right = Vector3::new(ch, -sh, 0.0);
        let up = right.cross(&forward);
        (right, up, forward)
    }

    /// Pixel coordinates and depth of a world point.
    pub fn project(&self, point: &Vector3<f64>) -> (f64, f64, f64) {
        let (right, up, forward) = self.basis();
        let d = point - self.position;
        let depth = d.dot(&forward);
        let u = self.width / 2.0 + self.focal * d.dot(&right) / depth;
        let v = self.height / 2.0 - self.focal * d.dot(&up) / depth;
        (u, v, depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox2D {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Bbox2D {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &Bbox2D) -> f64 {
        let w = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let h = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        w.max(0.0) * h.max(0.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x && u <= self.x + self.w && v >= self.y && v <= self.y + self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible(Bbox2D),
    NotVisible,
}

pub fn box_vertices(object: &ObjectAnnotation) -> [Vector3<f64>; 8] {
    let mut out = [Vector3::zeros(); 8];
    for (i, v) in out.iter_mut().enumerate() {
        *v = object.center;
        for axis in 0..3 {
            let sign = if i >> axis & 1 == 1 { 1.0 } else { -1.0 };
            *v += object.axes[axis] * (sign * object.half_extents[axis]);
        }
    }
    out
}

/// Image-space bounding box of an oriented 3D box. Only corners in front of
/// the camera contribute; the hull is clipped to the image.
pub fn project_bbox(object: &ObjectAnnotation, camera: &CameraPose) -> Projection {
    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut any = false;
    for corner in box_vertices(object) {
        let (u, v, depth) = camera.project(&corner);
        if depth <= MIN_DEPTH {
            continue;
        }
        any = true;
        min = (min.0.min(u), min.1.min(v));
        max = (max.0.max(u), max.1.max(v));
    }
    if !any || max.0 <= 0.0 || max.1 <= 0.0 || min.0 >= camera.width || min.1 >= camera.height {
        return Projection::NotVisible;
    }
    let (x0, y0) = (min.0.max(0.0), min.1.max(0.0));
    let (x1, y1) = (max.0.min(camera.width), max.1.min(camera.height));
    Projection::Visible(Bbox2D {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    })
}

/// Objects within range whose boxes are not mostly covered by a strictly
/// closer object. `others` only act as occluders.
pub fn filter_visible(
    objects: &[ObjectAnnotation],
    camera: &CameraPose,
    others: &[ObjectAnnotation],
) -> Vec<(String, Bbox2D)> {
    let projected: Vec<(f64, Option<Bbox2D>)> = objects
        .iter()
        .chain(others)
        .map(|o| {
            let dist = (o.center - camera.position).norm();
            match project_bbox(o, camera) {
                Projection::Visible(b) => (dist, Some(b)),
                Projection::NotVisible => (dist, None),
            }
        })
        .collect();
    objects
        .iter()
        .zip(&projected)
        .filter_map(|(obj, &(dist, bbox))| {
            let bbox = bbox?;
            if dist > VISIBILITY_RANGE {
                return None;
            }
            let hidden = projected.iter().any(|&(d, other)| {
                d < dist && other.is_some_and(|b| b.intersection_area(&bbox) >= OCCLUSION_THRESHOLD * bbox.area())
            });
            (!hidden).then(|| (obj.name.clone(), bbox))
        })
        .collect()
}

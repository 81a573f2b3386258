//! Object-level metadata for samples.
//!
//! Real region detection is an offline preprocessing step; here a
//! sample gets its `(class, attribute, confidence)` triples either
//! inline from the dataset file or from a pluggable backend. The
//! shipped backend reads a precomputed sidecar file keyed by sample id.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};

/// A detected object's textual labels. The attribute may be empty
/// (degenerate detection with a class but no attribute).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub class: String,
    #[serde(default)]
    pub attribute: String,
    pub confidence: f64,
}

impl ObjectMeta {
    pub fn new(class: impl Into<String>, attribute: impl Into<String>, confidence: f64) -> Self {
        ObjectMeta {
            class: class.into(),
            attribute: attribute.into(),
            confidence,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.class.trim().is_empty() {
            return Err("class label is empty".into());
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0,1]", self.confidence));
        }
        Ok(())
    }
}

/// Source of detections for an image reference. Output order must be
/// deterministic for a fixed `image_ref`.
pub trait DetectorBackend {
    fn name(&self) -> &str;
    fn detect(&self, image_ref: &str) -> std::result::Result<Vec<ObjectMeta>, String>;
}

/// Backend over a sidecar JSON-lines file of `{id, objects}` records,
/// keyed by sample id (the `image_ref` is the id in this scheme).
pub struct FixtureBackend {
    name: String,
    detections: BTreeMap<String, Vec<ObjectMeta>>,
}

#[derive(Deserialize)]
struct SidecarRecord {
    id: String,
    #[serde(default)]
    objects: Vec<ObjectMeta>,
}

impl FixtureBackend {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let display = path.as_ref().display().to_string();
        let file = File::open(path.as_ref()).map_err(|e| Error::io(&display, e))?;
        let mut detections = BTreeMap::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&display, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SidecarRecord = serde_json::from_str(&line)
                .map_err(|e| Error::dataset(&display, idx + 1, e.to_string()))?;
            for (i, obj) in record.objects.iter().enumerate() {
                obj.validate().map_err(|msg| {
                    Error::dataset(&display, idx + 1, format!("objects[{i}]: {msg}"))
                })?;
            }
            detections.insert(record.id, record.objects);
        }
        Ok(FixtureBackend {
            name: format!("fixture:{display}"),
            detections,
        })
    }

    pub fn empty() -> Self {
        FixtureBackend {
            name: "fixture:empty".into(),
            detections: BTreeMap::new(),
        }
    }
}

impl DetectorBackend for FixtureBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn detect(&self, image_ref: &str) -> std::result::Result<Vec<ObjectMeta>, String> {
        Ok(self.detections.get(image_ref).cloned().unwrap_or_default())
    }
}

/// Keeps the `k` highest-confidence objects, ties broken by input
/// order, output sorted by confidence descending.
pub fn top_k_by_confidence(mut objects: Vec<ObjectMeta>, k: usize) -> Vec<ObjectMeta> {
    // stable sort preserves input order among equal confidences
    objects.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    objects.truncate(k);
    objects
}

/// Resolves a sample's objects and applies the top-k confidence filter.
///
/// Inline objects from the dataset file bypass the backend entirely.
/// A sample with neither inline objects nor an `image_ref` yields an
/// empty list, which is valid (text-only post).
pub fn detect_objects(
    sample: &Sample,
    backend: &dyn DetectorBackend,
    k: usize,
) -> Result<Vec<ObjectMeta>> {
    if k == 0 {
        return Err(Error::Config("object cap k must be >= 1".into()));
    }
    let raw = if !sample.objects.is_empty() {
        sample.objects.clone()
    } else if let Some(image_ref) = &sample.image_ref {
        backend.detect(image_ref).map_err(|message| Error::Backend {
            backend: backend.name().to_string(),
            message,
        })?
    } else {
        Vec::new()
    };
    Ok(top_k_by_confidence(raw, k))
}

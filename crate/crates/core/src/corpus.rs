//! Dataset loading and validation.
//!
//! A dataset is UTF-8 JSON-lines: one record per line with fields
//! `id`, `caption`, optional `objects` (array of `{class, attribute,
//! confidence}`), optional `explanation`, optional `image_ref`.
//! Train and val splits require `explanation`; test does not.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::ObjectMeta;
use crate::error::{Error, Result};

/// One (caption, objects, explanation) triplet. The image itself is
/// never touched; `image_ref` is an opaque handle for detector backends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects: Vec<ObjectMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn requires_explanation(self) -> bool {
        matches!(self, SplitName::Train | SplitName::Val)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train, val, or test)"
            ))),
        }
    }
}

/// An ordered, validated list of samples for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub samples: Vec<Sample>,
}

/// Loads and validates one split file, preserving file order.
///
/// Every record must have a non-empty caption (after trimming); train
/// and val records must carry a non-empty explanation; ids must be
/// unique within the file. Errors name the offending 1-based line.
pub fn load_dataset(path: impl AsRef<Path>, split: SplitName) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let reader = BufReader::new(file);

    let mut samples = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::dataset(&display, line_no, e.to_string()))?;
        validate_sample(&sample, split)
            .map_err(|msg| Error::dataset(&display, line_no, msg))?;
        if !seen_ids.insert(sample.id.clone()) {
            return Err(Error::dataset(
                &display,
                line_no,
                format!("duplicate id '{}'", sample.id),
            ));
        }
        samples.push(sample);
    }

    Ok(DatasetSplit {
        name: split,
        samples,
    })
}

fn validate_sample(sample: &Sample, split: SplitName) -> std::result::Result<(), String> {
    if sample.id.is_empty() {
        return Err("field 'id' is empty".into());
    }
    if sample.caption.trim().is_empty() {
        return Err("field 'caption' is empty".into());
    }
    match &sample.explanation {
        Some(e) if e.trim().is_empty() => {
            return Err("field 'explanation' is present but empty".into())
        }
        None if split.requires_explanation() => {
            return Err(format!(
                "field 'explanation' is required for the {split} split"
            ))
        }
        _ => {}
    }
    for (i, obj) in sample.objects.iter().enumerate() {
        obj.validate()
            .map_err(|msg| format!("field 'objects[{i}]': {msg}"))?;
    }
    Ok(())
}

/// Serializes a split back to JSON-lines, one record per line in order.
pub fn write_dataset(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let display = path.as_ref().display().to_string();
    let mut file = File::create(path.as_ref()).map_err(|e| Error::io(&display, e))?;
    for sample in &split.samples {
        let line = serde_json::to_string(sample)
            .map_err(|e| Error::dataset(&display, 0, e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(&display, e))?;
    }
    Ok(())
}

/// Checks the cross-split invariant that no id appears twice.
pub fn check_splits_disjoint(splits: &[&DatasetSplit]) -> Result<()> {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for split in splits {
        for sample in &split.samples {
            if !seen.insert(&sample.id) {
                return Err(Error::Config(format!(
                    "sample id '{}' appears in more than one split",
                    sample.id
                )));
            }
        }
    }
    Ok(())
}

/// Corpus summary over captions: sample count, mean whitespace-token
/// caption length, and distinct lowercased token count.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitStats {
    pub split: SplitName,
    pub samples: usize,
    pub mean_caption_len: f64,
    pub vocab_size: usize,
}

pub fn dataset_stats(split: &DatasetSplit) -> Result<SplitStats> {
    if split.samples.is_empty() {
        return Err(Error::Evaluation(format!(
            "cannot compute stats for empty {} split",
            split.name
        )));
    }
    let mut total_tokens = 0usize;
    let mut vocab = BTreeSet::new();
    for sample in &split.samples {
        for token in sample.caption.split_whitespace() {
            total_tokens += 1;
            vocab.insert(token.to_lowercase());
        }
    }
    Ok(SplitStats {
        split: split.name,
        samples: split.samples.len(),
        mean_caption_len: total_tokens as f64 / split.samples.len() as f64,
        vocab_size: vocab.len(),
    })
}

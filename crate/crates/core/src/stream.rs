//! Prediction streams: one JSON object per line carrying the logits and
//! argmax of one attribute at one segment. Stage-one streams omit `stage`;
//! corrected streams carry `"stage": "seq"`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nncore::argmax;
use crate::{Error, Result};

pub const SEQ_STAGE: &str = "seq";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub section_id: String,
    pub index: usize,
    pub attribute: String,
    pub logits: Vec<f64>,
    pub argmax: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

impl StreamRecord {
    pub fn new(section_id: &str, index: usize, attribute: &str, logits: Vec<f64>, stage: Option<&str>) -> Self {
        Self {
            section_id: section_id.to_string(),
            index,
            attribute: attribute.to_string(),
            argmax: argmax(&logits),
            logits,
            stage: stage.map(str::to_string),
        }
    }
}

pub fn write_stream(path: &Path, records: &[StreamRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serialises");
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_stream(path: &Path) -> Result<Vec<StreamRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let r: StreamRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if r.logits.is_empty() || r.argmax >= r.logits.len() {
            return Err(malformed(format!(
                "argmax {} invalid for {} logits",
                r.argmax,
                r.logits.len()
            )));
        }
        if r.logits.iter().any(|v| !v.is_finite()) {
            return Err(malformed("non-finite logit".into()));
        }
        records.push(r);
    }
    Ok(records)
}

/// One attribute's predictions over one section, ordered by segment index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SectionPredictions {
    pub logits: Vec<Vec<f64>>,
    pub argmax: Vec<usize>,
}

/// Stream records grouped by attribute and section.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamIndex {
    by_attribute: BTreeMap<String, BTreeMap<String, SectionPredictions>>,
}

impl StreamIndex {
    /// Groups records; every (attribute, section) must cover indices
    /// `0..len` exactly once.
    pub fn new(records: &[StreamRecord]) -> Result<Self> {
        let mut staged: BTreeMap<&str, BTreeMap<&str, BTreeMap<usize, &StreamRecord>>> = BTreeMap::new();
        for r in records {
            let slot = staged
                .entry(&r.attribute)
                .or_default()
                .entry(&r.section_id)
                .or_default();
            if slot.insert(r.index, r).is_some() {
                return Err(Error::InvalidDataset(format!(
                    "stream has duplicate record for {}/{} attribute '{}'",
                    r.section_id, r.index, r.attribute
                )));
            }
        }
        let mut by_attribute = BTreeMap::new();
        for (attr, sections) in staged {
            let mut out = BTreeMap::new();
            for (section, recs) in sections {
                let mut preds = SectionPredictions::default();
                for (expected, (&index, r)) in recs.iter().enumerate() {
                    if index != expected {
                        return Err(Error::InvalidDataset(format!(
                            "stream for section '{section}' attribute '{attr}' is missing index {expected}"
                        )));
                    }
                    preds.logits.push(r.logits.clone());
                    preds.argmax.push(r.argmax);
                }
                out.insert(section.to_string(), preds);
            }
            by_attribute.insert(attr.to_string(), out);
        }
        Ok(Self { by_attribute })
    }

    pub fn section(&self, attribute: &str, section: &str) -> Result<&SectionPredictions> {
        self.by_attribute
            .get(attribute)
            .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))?
            .get(section)
            .ok_or_else(|| {
                Error::InvalidDataset(format!(
                    "section '{section}' absent from the stream for attribute '{attribute}'"
                ))
            })
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.by_attribute.keys().map(String::as_str)
    }

    pub fn sections(&self, attribute: &str) -> impl Iterator<Item = (&str, &SectionPredictions)> {
        self.by_attribute
            .get(attribute)
            .into_iter()
            .flat_map(|m| m.iter().map(|(k, v)| (k.as_str(), v)))
    }
}

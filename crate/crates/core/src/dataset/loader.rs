use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{
    read_features, write_features, AttributeSpec, ClassCounts, DatasetManifest, FeatureStore,
    Segment, SegmentRecord, Split,
};
use crate::{Error, Result};

/// Contiguous run of segments belonging to one section.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SectionSpan {
    pub id: String,
    pub start: usize,
    pub len: usize,
    pub split: Split,
}

/// A validated, immutable in-memory dataset. Segments are stored grouped by
/// section (manifest order) and sorted by index within a section.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    manifest: DatasetManifest,
    segments: Vec<Segment>,
    sections: Vec<SectionSpan>,
    features: FeatureStore,
}

impl Dataset {
    /// Validates and assembles a dataset. `segments` may be in any order.
    pub fn from_parts(
        manifest: DatasetManifest,
        mut segments: Vec<Segment>,
        features: FeatureStore,
    ) -> Result<Self> {
        manifest.validate()?;
        let order: HashMap<&str, usize> = manifest
            .sections
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        for s in &segments {
            if !order.contains_key(s.section_id.as_str()) {
                return Err(Error::InvalidDataset(format!(
                    "segment references unknown section '{}'",
                    s.section_id
                )));
            }
            if s.labels.len() != manifest.attributes.len() {
                return Err(Error::InvalidDataset(format!(
                    "segment {}/{} has {} labels, expected {}",
                    s.section_id,
                    s.index,
                    s.labels.len(),
                    manifest.attributes.len()
                )));
            }
            for (a, &l) in manifest.attributes.iter().zip(&s.labels) {
                if l >= a.num_classes() {
                    return Err(Error::InvalidDataset(format!(
                        "segment {}/{}: label {l} out of range for attribute '{}'",
                        s.section_id, s.index, a.name
                    )));
                }
            }
            if s.feature_offset >= features.len() {
                return Err(Error::InvalidDataset(format!(
                    "segment {}/{}: feature offset {} beyond {} grids",
                    s.section_id,
                    s.index,
                    s.feature_offset,
                    features.len()
                )));
            }
        }
        segments.sort_by(|a, b| {
            order[a.section_id.as_str()]
                .cmp(&order[b.section_id.as_str()])
                .then(a.index.cmp(&b.index))
        });

        let mut sections = Vec::with_capacity(manifest.sections.len());
        let mut start = 0;
        for info in &manifest.sections {
            let len = segments[start..]
                .iter()
                .take_while(|s| s.section_id == info.id)
                .count();
            for (expected, seg) in segments[start..start + len].iter().enumerate() {
                if seg.index != expected {
                    return Err(Error::InvalidDataset(format!(
                        "section '{}': expected segment index {expected}, found {} (indices must be contiguous from 0)",
                        info.id, seg.index
                    )));
                }
            }
            if len != info.num_segments {
                return Err(Error::InvalidDataset(format!(
                    "section '{}' declares {} segments but has {len}",
                    info.id, info.num_segments
                )));
            }
            sections.push(SectionSpan {
                id: info.id.clone(),
                start,
                len,
                split: manifest.splits.split_of(&info.id).unwrap(),
            });
            start += len;
        }
        Ok(Self {
            manifest,
            segments,
            sections,
            features,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn attributes(&self) -> &[AttributeSpec] {
        &self.manifest.attributes
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.manifest.attribute_index(name)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn sections(&self) -> &[SectionSpan] {
        &self.sections
    }

    pub fn features(&self) -> &FeatureStore {
        &self.features
    }

    pub fn section(&self, id: &str) -> Option<&SectionSpan> {
        self.sections.iter().find(|s| s.id == id)
    }

    pub fn section_segments(&self, span: &SectionSpan) -> &[Segment] {
        &self.segments[span.start..span.start + span.len]
    }

    pub fn split_sections(&self, split: Split) -> impl Iterator<Item = &SectionSpan> {
        self.sections.iter().filter(move |s| s.split == split)
    }

    /// Global segment indices of a split, in storage order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.split_sections(split)
            .flat_map(|s| s.start..s.start + s.len)
            .collect()
    }

    /// Global index of the segment `back` positions earlier in the same
    /// section, clamped to the section's first segment.
    pub fn clamped_back(&self, global: usize, back: usize) -> usize {
        global - self.segments[global].index.min(back)
    }

    /// Ground-truth label sequence of one attribute over one section.
    pub fn section_labels(&self, span: &SectionSpan, attribute: usize) -> Vec<usize> {
        self.section_segments(span)
            .iter()
            .map(|s| s.labels[attribute])
            .collect()
    }

    pub fn class_frequencies(&self, split: Split, attribute: &str) -> Result<ClassCounts> {
        super::class_frequencies(
            self.split_indices(split).into_iter().map(|i| &self.segments[i]),
            self.attributes(),
            attribute,
        )
    }
}

fn parse_record(
    line: &str,
    path: &Path,
    lineno: usize,
    manifest: &DatasetManifest,
) -> Result<Segment> {
    let malformed = |message: String| Error::MalformedRecord {
        path: path.to_path_buf(),
        line: lineno,
        message,
    };
    let record: SegmentRecord =
        serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    for key in record.labels.keys() {
        if manifest.attribute_index(key).is_err() {
            return Err(malformed(format!("unknown attribute '{key}'")));
        }
    }
    let mut labels = Vec::with_capacity(manifest.attributes.len());
    for a in &manifest.attributes {
        let &index = record
            .labels
            .get(&a.name)
            .ok_or_else(|| malformed(format!("missing label for attribute '{}'", a.name)))?;
        if index >= a.num_classes() {
            return Err(Error::LabelOutOfRange {
                path: path.to_path_buf(),
                line: lineno,
                attribute: a.name.clone(),
                index,
                classes: a.num_classes(),
            });
        }
        labels.push(index);
    }
    Ok(Segment {
        section_id: record.section_id,
        index: record.index,
        feature_offset: record.feature_offset,
        labels,
    })
}

/// Loads and validates a dataset from its JSON manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    manifest.validate()?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let features_path = root.join(&manifest.features_path);
    let features = read_features(&features_path)?;

    let records_path = root.join(&manifest.records_path);
    let file = std::fs::File::open(&records_path).map_err(|e| Error::io(&records_path, e))?;
    let mut segments = Vec::new();
    let mut seen: HashMap<(String, usize), usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(&records_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seg = parse_record(&line, &records_path, lineno, &manifest)?;
        let malformed = |message: String| Error::MalformedRecord {
            path: records_path.clone(),
            line: lineno,
            message,
        };
        if !manifest.sections.iter().any(|s| s.id == seg.section_id) {
            return Err(malformed(format!("unknown section '{}'", seg.section_id)));
        }
        if seg.feature_offset >= features.len() {
            return Err(malformed(format!(
                "feature_offset {} beyond the {} grids in {}",
                seg.feature_offset,
                features.len(),
                features_path.display()
            )));
        }
        if let Some(prev) = seen.insert((seg.section_id.clone(), seg.index), lineno) {
            return Err(malformed(format!(
                "duplicate segment {}/{} (first at line {prev})",
                seg.section_id, seg.index
            )));
        }
        segments.push(seg);
    }
    Dataset::from_parts(manifest, segments, features)
}

/// Writes `manifest.json`, the records and the feature file into `dir`
/// using the paths named in the manifest. Returns the manifest path.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dataset.manifest();
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serialises");
    std::fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    let records_path = dir.join(&manifest.records_path);
    let file = std::fs::File::create(&records_path).map_err(|e| Error::io(&records_path, e))?;
    let mut out = BufWriter::new(file);
    for seg in dataset.segments() {
        let record = SegmentRecord {
            section_id: seg.section_id.clone(),
            index: seg.index,
            feature_offset: seg.feature_offset,
            labels: manifest
                .attributes
                .iter()
                .zip(&seg.labels)
                .map(|(a, &l)| (a.name.clone(), l))
                .collect(),
        };
        serde_json::to_writer(&mut out, &record).expect("record serialises");
        out.write_all(b"\n").map_err(|e| Error::io(&records_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&records_path, e))?;

    write_features(&dir.join(&manifest.features_path), dataset.features())?;
    Ok(manifest_path)
}

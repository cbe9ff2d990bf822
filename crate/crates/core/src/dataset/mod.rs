//! Segment / section / attribute data model, on-disk formats and
//! section-disjoint splitting.

mod features;
mod loader;
mod split;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use features::{read_features, write_features, FeatureGrid, FeatureStore, FEATURE_MAGIC};
pub use loader::{load_dataset, write_dataset, Dataset, SectionSpan};
pub use split::split_by_section;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalKind {
    /// Default class almost everywhere; each occurrence annotated at a single
    /// segment.
    SinglePeak,
    /// Classes persist over long runs of segments.
    Smooth,
    Other,
}

/// One classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_class: Option<usize>,
    pub temporal_kind: TemporalKind,
}

impl AttributeSpec {
    pub fn new(name: &str, classes: &[&str], default_class: Option<usize>, kind: TemporalKind) -> Self {
        Self {
            name: name.to_string(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
            default_class,
            temporal_kind: kind,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let field = format!("attributes.{}", self.name);
        if self.name.is_empty() {
            return Err(Error::config("attributes", "attribute name is empty"));
        }
        if self.classes.len() < 2 {
            return Err(Error::config(field, "needs at least 2 classes"));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return Err(Error::config(field, format!("duplicate class name '{c}'")));
            }
        }
        if let Some(d) = self.default_class {
            if d >= self.classes.len() {
                return Err(Error::config(field, format!("default_class {d} out of range")));
            }
        }
        if self.temporal_kind == TemporalKind::SinglePeak && self.default_class.is_none() {
            return Err(Error::config(field, "single-peak attribute requires a default_class"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split '{other}'"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Section ids per split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// Which split a section belongs to, if any.
    pub fn split_of(&self, section: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|&s| self.get(s).iter().any(|id| id == section))
    }

    /// Checks pairwise disjointness.
    pub fn validate_disjoint(&self) -> Result<()> {
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        for split in Split::ALL {
            for id in self.get(split) {
                if owner.insert(id.as_str(), split).is_some() {
                    return Err(Error::SectionInMultipleSplits(id.clone()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub id: String,
    pub num_segments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub attributes: Vec<AttributeSpec>,
    pub sections: Vec<SectionInfo>,
    pub splits: Splits,
    /// Relative to the manifest's directory.
    pub records_path: String,
    pub features_path: String,
}

impl DatasetManifest {
    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::InvalidDataset("manifest declares no attributes".into()));
        }
        let mut names = std::collections::HashSet::new();
        for a in &self.attributes {
            a.validate()?;
            if !names.insert(&a.name) {
                return Err(Error::InvalidDataset(format!("duplicate attribute '{}'", a.name)));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for s in &self.sections {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate section '{}'", s.id)));
            }
            if s.num_segments == 0 {
                return Err(Error::InvalidDataset(format!("section '{}' is empty", s.id)));
            }
        }
        self.splits.validate_disjoint()?;
        for split in Split::ALL {
            for id in self.splits.get(split) {
                if !ids.contains(id.as_str()) {
                    return Err(Error::InvalidDataset(format!(
                        "split '{split}' references unknown section '{id}'"
                    )));
                }
            }
        }
        for s in &self.sections {
            if self.splits.split_of(&s.id).is_none() {
                return Err(Error::InvalidDataset(format!(
                    "section '{}' is not assigned to any split",
                    s.id
                )));
            }
        }
        Ok(())
    }
}

/// One 10-meter road unit. `labels` is aligned with the manifest's attribute
/// order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub section_id: String,
    pub index: usize,
    pub feature_offset: usize,
    pub labels: Vec<usize>,
}

/// On-disk form of a [`Segment`]: one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub section_id: String,
    pub index: usize,
    pub feature_offset: usize,
    pub labels: BTreeMap<String, usize>,
}

/// Per-class counts `N_c` and their total `N`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub counts: Vec<usize>,
    pub total: usize,
}

impl ClassCounts {
    pub fn from_labels(labels: impl IntoIterator<Item = usize>, num_classes: usize) -> Self {
        let mut counts = vec![0; num_classes];
        for l in labels {
            counts[l] += 1;
        }
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn frequency(&self, class: usize) -> f64 {
        self.counts[class] as f64 / self.total as f64
    }
}

/// Class histogram of one attribute over a set of segments.
pub fn class_frequencies<'a>(
    segments: impl IntoIterator<Item = &'a Segment>,
    attributes: &[AttributeSpec],
    attribute: &str,
) -> Result<ClassCounts> {
    let a = attributes
        .iter()
        .position(|s| s.name == attribute)
        .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))?;
    let counts = ClassCounts::from_labels(
        segments.into_iter().map(|s| s.labels[a]),
        attributes[a].num_classes(),
    );
    if counts.total == 0 {
        return Err(Error::Empty("class_frequencies needs at least one segment".into()));
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(labels: Vec<usize>) -> Segment {
        Segment {
            section_id: "s".into(),
            index: 0,
            feature_offset: 0,
            labels,
        }
    }

    fn attrs() -> Vec<AttributeSpec> {
        vec![
            AttributeSpec::new("bin", &["no", "yes"], Some(0), TemporalKind::SinglePeak),
            AttributeSpec::new("tri", &["a", "b", "c"], None, TemporalKind::Smooth),
        ]
    }

    #[test]
    fn frequencies_all_one_class() {
        let segs: Vec<Segment> = (0..10).map(|_| seg(vec![0, 0])).collect();
        let c = class_frequencies(&segs, &attrs(), "bin").unwrap();
        assert_eq!(c.counts, vec![10, 0]);
        assert_eq!(c.total, 10);
    }

    #[test]
    fn frequencies_three_classes() {
        let segs: Vec<Segment> = [0, 0, 1, 2].iter().map(|&l| seg(vec![0, l])).collect();
        let c = class_frequencies(&segs, &attrs(), "tri").unwrap();
        assert_eq!(c.counts, vec![2, 1, 1]);
        assert_eq!(c.counts.iter().sum::<usize>(), c.total);
    }

    #[test]
    fn frequencies_errors() {
        let segs = vec![seg(vec![0, 0])];
        assert!(matches!(
            class_frequencies(&segs, &attrs(), "nope"),
            Err(Error::UnknownAttribute(_))
        ));
        assert!(matches!(
            class_frequencies(&[], &attrs(), "bin"),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn attribute_spec_invariants() {
        assert!(attrs()[0].validate().is_ok());
        let mut dup = attrs()[1].clone();
        dup.classes[1] = "a".into();
        assert!(dup.validate().is_err());
        let no_default = AttributeSpec::new("x", &["a", "b"], None, TemporalKind::SinglePeak);
        assert!(no_default.validate().is_err());
        let unary = AttributeSpec::new("x", &["a"], None, TemporalKind::Smooth);
        assert!(unary.validate().is_err());
    }

    #[test]
    fn overlapping_splits_rejected() {
        let splits = Splits {
            train: vec!["a".into(), "b".into()],
            val: vec!["c".into()],
            test: vec!["b".into()],
        };
        let err = splits.validate_disjoint().unwrap_err();
        assert_eq!(err.to_string(), "section 'b' in multiple splits");
    }
}

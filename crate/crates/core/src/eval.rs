//! Classification metrics and temporal diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{AttributeSpec, Dataset, Split, TemporalKind};
use crate::nncore::softmax;
use crate::stream::{StreamIndex, StreamRecord};
use crate::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: n,
            counts: rows.concat(),
        })
    }

    pub fn from_pairs(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for i in [truth, pred] {
            if i >= self.classes {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// `TP / (TP + FN)`; `None` without support.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let s = self.support(class);
        (s > 0).then(|| self.get(class, class) as f64 / s as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    /// Percentage points; `None` for classes without ground-truth support.
    pub per_class: Vec<Option<f64>>,
    pub macro_f1: f64,
}

/// Per-class F1 and the macro average over supported classes, in
/// percentage points.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<F1Report> {
    if cm.total() == 0 {
        return Err(Error::Empty("confusion matrix".into()));
    }
    let per_class: Vec<Option<f64>> = (0..cm.num_classes())
        .map(|c| {
            (cm.support(c) > 0).then(|| {
                let tp = cm.get(c, c) as f64;
                let fp = (cm.predicted(c) - cm.get(c, c)) as f64;
                let fnn = (cm.support(c) - cm.get(c, c)) as f64;
                100.0 * 2.0 * tp / (2.0 * tp + fp + fnn)
            })
        })
        .collect();
    let supported: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_f1 = supported.iter().sum::<f64>() / supported.len() as f64;
    Ok(F1Report { per_class, macro_f1 })
}

pub fn mean_macro_f1(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("no attributes to average".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `trace / total`, as a fraction.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::Empty("confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / cm.total() as f64)
}

/// Mean of precision@k over the ranks of the positives, ranking by score
/// descending with ties kept in input order. `None` when there are no
/// positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// One-vs-rest AP averaged over classes that occur in `truth`.
pub fn attribute_ap(posteriors: &[Vec<f64>], truth: &[usize], classes: usize) -> Option<f64> {
    let aps: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let scores: Vec<f64> = posteriors.iter().map(|p| p[c]).collect();
            let labels: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            average_precision(&scores, &labels)
        })
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Counts of class pairs at consecutive segments of a section.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoocMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl CoocMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, from: usize, to: usize) -> u64 {
        self.counts[from * self.classes + to]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn off_diagonal(&self) -> u64 {
        self.total() - self.diagonal()
    }

    /// Mass in cells whose row and column both differ from `class`.
    pub fn mass_outside(&self, class: usize) -> u64 {
        let mut m = 0;
        for i in (0..self.classes).filter(|&i| i != class) {
            for j in (0..self.classes).filter(|&j| j != class) {
                m += self.get(i, j);
            }
        }
        m
    }

    pub fn add_sequence(&mut self, labels: &[usize]) -> Result<()> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.classes,
            });
        }
        for w in labels.windows(2) {
            self.counts[w[0] * self.classes + w[1]] += 1;
        }
        Ok(())
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut s = String::from("from\\to");
        for n in class_names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (i, n) in class_names.iter().enumerate() {
            s.push_str(n);
            for j in 0..self.classes {
                let _ = write!(s, ",{}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

/// Co-occurrence over several sections; transitions never cross sections.
pub fn cooccurrence<'a, I>(classes: usize, sections: I) -> Result<CoocMatrix>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let mut m = CoocMatrix::new(classes);
    for s in sections {
        m.add_sequence(s)?;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalDiagnostics {
    pub attribute: String,
    pub kind: TemporalKind,
    pub transitions: u64,
    /// Repeated positive classes at consecutive segments, per transition.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duplicated_peak_mass: Option<f64>,
    /// Off-diagonal mass above the ground truth, per transition.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spurious_transition_excess: Option<f64>,
}

pub fn temporal_diagnostics(gt: &CoocMatrix, pred: &CoocMatrix, attribute: &AttributeSpec) -> Result<TemporalDiagnostics> {
    if gt.num_classes() != pred.num_classes() || gt.num_classes() != attribute.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "co-occurrence sizes {} and {} for attribute '{}' with {} classes",
            gt.num_classes(),
            pred.num_classes(),
            attribute.name,
            attribute.num_classes()
        )));
    }
    let total = pred.total();
    let norm = |x: f64| if total == 0 { 0.0 } else { x / total as f64 };
    let mut report = TemporalDiagnostics {
        attribute: attribute.name.clone(),
        kind: attribute.temporal_kind,
        transitions: total,
        duplicated_peak_mass: None,
        spurious_transition_excess: None,
    };
    match attribute.temporal_kind {
        TemporalKind::SinglePeak => {
            let default = attribute.default_class.ok_or_else(|| {
                Error::config(format!("attributes.{}", attribute.name), "single-peak attribute without default_class")
            })?;
            let dup: u64 = (0..pred.num_classes()).filter(|&c| c != default).map(|c| pred.get(c, c)).sum();
            report.duplicated_peak_mass = Some(norm(dup as f64));
        }
        TemporalKind::Smooth => {
            let excess = pred.off_diagonal() as f64 - gt.off_diagonal() as f64;
            report.spurious_transition_excess = Some(norm(excess.max(0.0)));
        }
        TemporalKind::Other => {}
    }
    Ok(report)
}

/// Stage-one or stage-two predictions paired with ground truth for one
/// attribute over the sections of a split, in section order.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeOutcome {
    pub truth: Vec<Vec<usize>>,
    pub pred: Vec<Vec<usize>>,
    pub posteriors: Vec<Vec<Vec<f64>>>,
}

impl AttributeOutcome {
    pub fn flat_truth(&self) -> Vec<usize> {
        self.truth.concat()
    }

    pub fn flat_pred(&self) -> Vec<usize> {
        self.pred.concat()
    }
}

/// Aligns a prediction stream with the dataset over one split.
pub fn collect_outcome(dataset: &Dataset, index: &StreamIndex, split: Option<Split>, attribute: usize) -> Result<AttributeOutcome> {
    let spec = &dataset.attributes()[attribute];
    let mut out = AttributeOutcome {
        truth: Vec::new(),
        pred: Vec::new(),
        posteriors: Vec::new(),
    };
    for span in dataset.sections().iter().filter(|s| split.is_none_or(|sp| s.split == sp)) {
        let p = index.section(&spec.name, &span.id)?;
        if p.logits.len() != span.len {
            return Err(Error::InvalidDataset(format!(
                "stream covers {} of {} segments of section '{}' for attribute '{}'",
                p.logits.len(),
                span.len,
                span.id,
                spec.name
            )));
        }
        if let Some(l) = p.logits.iter().find(|l| l.len() != spec.num_classes()) {
            return Err(Error::ShapeMismatch(format!(
                "attribute '{}' has {} classes but stream logits have {}",
                spec.name,
                spec.num_classes(),
                l.len()
            )));
        }
        out.truth.push(dataset.section_labels(span, attribute));
        out.pred.push(p.argmax.clone());
        out.posteriors.push(p.logits.iter().map(|l| softmax(l)).collect());
    }
    if out.truth.is_empty() {
        return Err(Error::Empty(format!("no sections in split {split:?}")));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub name: String,
    pub segments: u64,
    pub macro_f1: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_precision: Option<f64>,
    pub per_class_f1: Vec<Option<f64>>,
    pub support: Vec<u64>,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: String,
    pub split: String,
    pub attributes: Vec<AttributeReport>,
    pub mean_macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_ap: Option<f64>,
    /// Attributes left out of `mean_macro_f1_excluding`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub excluded: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_macro_f1_excluding: Option<f64>,
}

/// Metrics of a prediction stream on one split. `exclude` names
/// attributes left out of an additional mean.
pub fn evaluate_stream(
    dataset: &Dataset,
    records: &[StreamRecord],
    split: Split,
    run: &str,
    exclude: &[String],
) -> Result<EvalReport> {
    let index = StreamIndex::new(records)?;
    for name in exclude {
        dataset.attribute_index(name)?;
    }
    let mut attributes = Vec::new();
    for (a, spec) in dataset.attributes().iter().enumerate() {
        let o = collect_outcome(dataset, &index, Some(split), a)?;
        let cm = ConfusionMatrix::from_pairs(spec.num_classes(), &o.flat_truth(), &o.flat_pred())?;
        let f1 = macro_f1(&cm)?;
        let post: Vec<Vec<f64>> = o.posteriors.concat();
        attributes.push(AttributeReport {
            name: spec.name.clone(),
            segments: cm.total(),
            macro_f1: f1.macro_f1,
            accuracy: accuracy(&cm)?,
            average_precision: attribute_ap(&post, &o.flat_truth(), spec.num_classes()),
            per_class_f1: f1.per_class,
            support: (0..spec.num_classes()).map(|c| cm.support(c)).collect(),
            confusion: cm,
        });
    }
    let all: Vec<f64> = attributes.iter().map(|a| a.macro_f1).collect();
    let aps: Vec<f64> = attributes.iter().filter_map(|a| a.average_precision).collect();
    let kept: Vec<f64> = attributes
        .iter()
        .filter(|a| !exclude.contains(&a.name))
        .map(|a| a.macro_f1)
        .collect();
    Ok(EvalReport {
        run: run.to_string(),
        split: split.to_string(),
        mean_macro_f1: mean_macro_f1(&all)?,
        mean_ap: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
        excluded: exclude.to_vec(),
        mean_macro_f1_excluding: if exclude.is_empty() { None } else { Some(mean_macro_f1(&kept)?) },
        attributes,
    })
}

impl EvalReport {
    /// Fixed-width table, percentages with two decimals.
    pub fn to_table(&self) -> String {
        let width = self.attributes.iter().map(|a| a.name.len()).max().unwrap_or(9).max(9);
        let mut s = format!("run: {}  split: {}\n", self.run, self.split);
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}", "attribute", "segments", "macroF1", "acc", "AP");
        for a in &self.attributes {
            let ap = a.average_precision.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
            let _ = writeln!(
                s,
                "{:<width$}  {:>8}  {:>8.2}  {:>8.2}  {:>8}",
                a.name,
                a.segments,
                a.macro_f1,
                100.0 * a.accuracy,
                ap
            );
        }
        let _ = writeln!(s, "mean macro-F1: {:.2}", self.mean_macro_f1);
        if let Some(m) = self.mean_ap {
            let _ = writeln!(s, "mAP: {:.2}", 100.0 * m);
        }
        if let Some(m) = self.mean_macro_f1_excluding {
            let _ = writeln!(s, "mean macro-F1 without {}: {:.2}", self.excluded.join(", "), m);
        }
        s
    }
}

/// Temporal diagnostics of a prediction stream against ground truth, for
/// every attribute, over the sections of `split` (all sections if `None`).
pub fn stream_diagnostics(dataset: &Dataset, records: &[StreamRecord], split: Option<Split>) -> Result<Vec<(TemporalDiagnostics, CoocMatrix, CoocMatrix)>> {
    let index = StreamIndex::new(records)?;
    dataset
        .attributes()
        .iter()
        .enumerate()
        .map(|(a, spec)| {
            let o = collect_outcome(dataset, &index, split, a)?;
            let gt = cooccurrence(spec.num_classes(), o.truth.iter().map(Vec::as_slice))?;
            let pred = cooccurrence(spec.num_classes(), o.pred.iter().map(Vec::as_slice))?;
            Ok((temporal_diagnostics(&gt, &pred, spec)?, gt, pred))
        })
        .collect()
}

//! Synthetic segment sequences with controllable imbalance and the two
//! temporal regimes (single-peak events and smooth sticky runs), plus
//! class-conditioned feature grids.
//!
//! Each `(attribute, class)` pair owns a fixed unit-norm direction in feature
//! space. A segment's grid is the sum of the directions of its classes, plus
//! `leakage_decay^k` times the direction of any single-peak event `k <= 5`
//! segments ahead, plus Gaussian noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    split_by_section, AttributeSpec, Dataset, DatasetManifest, FeatureGrid, FeatureStore,
    SectionInfo, Segment, TemporalKind,
};
use crate::{seeded_rng, Error, Result};

/// How far ahead an upcoming single-peak event leaks into the features.
pub const LEAKAGE_HORIZON: usize = 5;

const SECTION_STREAM: u64 = 1;
const DIRECTION_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    /// Isolated events at rate `event_rate`; `positive_weights` (optional)
    /// skews which non-default class an event takes.
    SinglePeak {
        event_rate: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        positive_weights: Option<Vec<f64>>,
    },
    /// Sticky chain: keep the previous class with probability `stay_prob`,
    /// otherwise redraw from `prior`.
    Smooth { stay_prob: f64, prior: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAttribute {
    pub name: String,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_class: Option<usize>,
    pub regime: Regime,
}

impl SyntheticAttribute {
    pub fn single_peak(name: &str, classes: &[&str], event_rate: f64, weights: Option<Vec<f64>>) -> Self {
        Self {
            name: name.into(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
            default_class: Some(0),
            regime: Regime::SinglePeak {
                event_rate,
                positive_weights: weights,
            },
        }
    }

    pub fn smooth(name: &str, classes: &[&str], stay_prob: f64, prior: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
            default_class: None,
            regime: Regime::Smooth { stay_prob, prior },
        }
    }

    pub fn spec(&self) -> AttributeSpec {
        AttributeSpec {
            name: self.name.clone(),
            classes: self.classes.clone(),
            default_class: self.default_class,
            temporal_kind: match self.regime {
                Regime::SinglePeak { .. } => TemporalKind::SinglePeak,
                Regime::Smooth { .. } => TemporalKind::Smooth,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        self.spec().validate()?;
        let field = |f: &str| format!("attributes.{}.{f}", self.name);
        let check_probs = |f: &str, p: &[f64], n: usize| -> Result<()> {
            if p.len() != n {
                return Err(Error::config(field(f), format!("expected {n} entries, got {}", p.len())));
            }
            if p.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::config(field(f), "entries must be nonnegative"));
            }
            Ok(())
        };
        match &self.regime {
            Regime::SinglePeak {
                event_rate,
                positive_weights,
            } => {
                if !(0.0..0.5).contains(event_rate) {
                    return Err(Error::config(field("event_rate"), "must lie in [0, 0.5)"));
                }
                if let Some(w) = positive_weights {
                    check_probs("positive_weights", w, self.classes.len() - 1)?;
                    if w.iter().sum::<f64>() <= 0.0 {
                        return Err(Error::config(field("positive_weights"), "must not all be zero"));
                    }
                }
            }
            Regime::Smooth { stay_prob, prior } => {
                if !(*stay_prob > 0.5 && *stay_prob <= 1.0) {
                    return Err(Error::config(field("stay_prob"), "must lie in (0.5, 1]"));
                }
                check_probs("prior", prior, self.classes.len())?;
                if (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::config(field("prior"), "must sum to 1"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_sections: usize,
    pub segments_per_section: usize,
    pub attributes: Vec<SyntheticAttribute>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_std: f64,
    /// Per-segment decay of pre-event leakage; 0 disables leakage.
    pub leakage_decay: f64,
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl Default for GeneratorConfig {
    /// Eight attributes (three single-peak, five smooth) over 50 sections of
    /// 200 segments; the rarest classes sit below 2%.
    fn default() -> Self {
        Self {
            num_sections: 50,
            segments_per_section: 200,
            attributes: vec![
                SyntheticAttribute::single_peak(
                    "intersection_type",
                    &["none", "t_junction", "crossroads", "roundabout"],
                    0.06,
                    Some(vec![0.5, 0.35, 0.15]),
                ),
                SyntheticAttribute::single_peak(
                    "pedestrian_crossing",
                    &["none", "marked", "signalised"],
                    0.04,
                    Some(vec![0.7, 0.3]),
                ),
                SyntheticAttribute::single_peak(
                    "property_access",
                    &["none", "residential", "commercial"],
                    0.08,
                    Some(vec![0.65, 0.35]),
                ),
                SyntheticAttribute::smooth("area_type", &["rural", "urban"], 0.98, vec![0.8, 0.2]),
                SyntheticAttribute::smooth(
                    "lane_count",
                    &["one", "two", "three", "four_plus"],
                    0.97,
                    vec![0.6, 0.3, 0.08, 0.02],
                ),
                SyntheticAttribute::smooth(
                    "roadside_severity",
                    &["low", "medium", "high"],
                    0.95,
                    vec![0.7, 0.25, 0.05],
                ),
                SyntheticAttribute::smooth(
                    "speed_limit",
                    &["30", "50", "70", "90"],
                    0.98,
                    vec![0.15, 0.45, 0.3, 0.1],
                ),
                SyntheticAttribute::smooth(
                    "median_type",
                    &["none", "barrier", "painted"],
                    0.96,
                    vec![0.85, 0.12, 0.03],
                ),
            ],
            height: 6,
            width: 6,
            channels: 8,
            noise_std: 0.6,
            leakage_decay: 0.5,
            split_fractions: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sections == 0 {
            return Err(Error::config("num_sections", "must be positive"));
        }
        if self.segments_per_section == 0 {
            return Err(Error::config("segments_per_section", "must be positive"));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config("height/width/channels", "feature dims must be positive"));
        }
        if self.attributes.is_empty() {
            return Err(Error::config("attributes", "at least one attribute is required"));
        }
        let mut names = std::collections::HashSet::new();
        for a in &self.attributes {
            a.validate()?;
            if !names.insert(&a.name) {
                return Err(Error::config("attributes", format!("duplicate attribute '{}'", a.name)));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be a nonnegative finite number"));
        }
        if !(0.0..1.0).contains(&self.leakage_decay) {
            return Err(Error::config("leakage_decay", "must lie in [0, 1)"));
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "split_fractions",
                format!("must be nonnegative and sum to 1, got {:?}", self.split_fractions),
            ));
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<AttributeSpec> {
        self.attributes.iter().map(|a| a.spec()).collect()
    }
}

/// Draws one section's label sequence for an attribute.
pub fn generate_labels<R: Rng + ?Sized>(attribute: &SyntheticAttribute, len: usize, rng: &mut R) -> Vec<usize> {
    let mut labels = Vec::with_capacity(len);
    match &attribute.regime {
        Regime::SinglePeak {
            event_rate,
            positive_weights,
        } => {
            let default = attribute.default_class.expect("validated single-peak default");
            let positives: Vec<usize> = (0..attribute.classes.len()).filter(|&c| c != default).collect();
            let uniform = vec![1.0; positives.len()];
            let weights = positive_weights.as_deref().unwrap_or(&uniform);
            let mut previous_positive = false;
            for _ in 0..len {
                // consecutive positives are impossible: the segment after an
                // event always carries the default class
                let label = if !previous_positive && rng.random::<f64>() < *event_rate {
                    positives[sample_index(weights, rng)]
                } else {
                    default
                };
                previous_positive = label != default;
                labels.push(label);
            }
        }
        Regime::Smooth { stay_prob, prior } => {
            let mut current = sample_index(prior, rng);
            for i in 0..len {
                if i > 0 && rng.random::<f64>() >= *stay_prob {
                    current = sample_index(prior, rng);
                }
                labels.push(current);
            }
        }
    }
    labels
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generator with its class directions drawn.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    /// `directions[a][c]` has `H * W * C_f` entries.
    directions: Vec<Vec<Vec<f64>>>,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let dim = config.height * config.width * config.channels;
        let mut rng = seeded_rng(config.seed, DIRECTION_STREAM);
        let directions = config
            .attributes
            .iter()
            .map(|a| {
                (0..a.classes.len())
                    .map(|_| {
                        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        v.into_iter().map(|x| x / norm).collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { config, directions })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn direction(&self, attribute: usize, class: usize) -> &[f64] {
        &self.directions[attribute][class]
    }

    pub fn section_id(index: usize) -> String {
        format!("sec{index:04}")
    }

    /// Random source for one section: seed XOR section index.
    pub fn section_rng(&self, section: usize) -> ChaCha8Rng {
        seeded_rng(self.config.seed ^ section as u64, SECTION_STREAM)
    }

    /// Feature grids for one section given every attribute's label sequence.
    pub fn generate_features<R: Rng + ?Sized>(&self, labels: &[Vec<usize>], rng: &mut R) -> Vec<FeatureGrid> {
        let cfg = &self.config;
        let len = labels.first().map_or(0, |l| l.len());
        let dim = cfg.height * cfg.width * cfg.channels;
        let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).unwrap());
        (0..len)
            .map(|i| {
                let mut grid = vec![0.0f64; dim];
                for (a, attr) in cfg.attributes.iter().enumerate() {
                    add(&mut grid, 1.0, &self.directions[a][labels[a][i]]);
                    if let (Regime::SinglePeak { .. }, Some(default)) = (&attr.regime, attr.default_class) {
                        if cfg.leakage_decay > 0.0 {
                            for k in 1..=LEAKAGE_HORIZON {
                                match labels[a].get(i + k) {
                                    Some(&c) if c != default => {
                                        add(&mut grid, cfg.leakage_decay.powi(k as i32), &self.directions[a][c]);
                                    }
                                    _ => {}
                                }
                            }
                        }
                    }
                }
                if let Some(n) = &noise {
                    grid.iter_mut().for_each(|v| *v += n.sample(rng));
                }
                let values = grid.into_iter().map(|v| v as f32).collect();
                FeatureGrid::new(cfg.height, cfg.width, cfg.channels, values).expect("finite grid")
            })
            .collect()
    }

    /// Labels (per attribute) and grids of one section.
    pub fn generate_section(&self, section: usize) -> (Vec<Vec<usize>>, Vec<FeatureGrid>) {
        let mut rng = self.section_rng(section);
        let len = self.config.segments_per_section;
        let labels: Vec<Vec<usize>> = self
            .config
            .attributes
            .iter()
            .map(|a| generate_labels(a, len, &mut rng))
            .collect();
        let grids = self.generate_features(&labels, &mut rng);
        (labels, grids)
    }

    /// The full dataset, split by section.
    pub fn generate(&self) -> Result<Dataset> {
        let cfg = &self.config;
        let ids: Vec<String> = (0..cfg.num_sections).map(Self::section_id).collect();
        let splits = split_by_section(&ids, cfg.split_fractions, cfg.seed)?;
        let mut store = FeatureStore::new(cfg.height, cfg.width, cfg.channels);
        let mut segments = Vec::with_capacity(cfg.num_sections * cfg.segments_per_section);
        for (s, id) in ids.iter().enumerate() {
            let (labels, grids) = self.generate_section(s);
            for (i, grid) in grids.iter().enumerate() {
                let offset = store.push(grid)?;
                segments.push(Segment {
                    section_id: id.clone(),
                    index: i,
                    feature_offset: offset,
                    labels: labels.iter().map(|l| l[i]).collect(),
                });
            }
        }
        let manifest = DatasetManifest {
            attributes: cfg.specs(),
            sections: ids
                .iter()
                .map(|id| SectionInfo {
                    id: id.clone(),
                    num_segments: cfg.segments_per_section,
                })
                .collect(),
            splits,
            records_path: "records.jsonl".into(),
            features_path: "features.bin".into(),
        };
        Dataset::from_parts(manifest, segments, store)
    }
}

fn add(acc: &mut [f64], scale: f64, v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

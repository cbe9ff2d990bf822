//! End-to-end orchestration shared by the command-line tool and tests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::localmodel::{predict_dataset, GridCache, LocalModel, LocalModelConfig};
use crate::seqmodel::{SeqEnhancer, SeqEnhancerConfig};
use crate::stream::{StreamIndex, StreamRecord};
use crate::trainer::{train_local, train_seq, TrainConfig, TrainLog};
use crate::{seeded_rng, Error, Result};

/// RNG stream for local model initialisation.
pub const LOCAL_INIT_STREAM: u64 = 10;
/// Base RNG stream for enhancer initialisation (plus attribute index).
pub const SEQ_INIT_STREAM: u64 = 20;

/// Enhancer shape shared by all attributes; the embedding width follows
/// each attribute's class count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqShape {
    pub half_window: usize,
    pub num_layers: usize,
    pub hidden: usize,
}

impl Default for SeqShape {
    fn default() -> Self {
        let d = SeqEnhancerConfig::new(2);
        Self {
            half_window: d.half_window,
            num_layers: d.num_layers,
            hidden: d.hidden,
        }
    }
}

impl SeqShape {
    pub fn config(&self, num_classes: usize) -> SeqEnhancerConfig {
        SeqEnhancerConfig {
            half_window: self.half_window,
            num_layers: self.num_layers,
            hidden: self.hidden,
            ..SeqEnhancerConfig::new(num_classes)
        }
    }
}

pub struct LocalRun {
    pub model: LocalModel,
    pub log: TrainLog,
    pub best_epoch: usize,
    /// Predictions for every segment of the dataset.
    pub stream: Vec<StreamRecord>,
}

pub fn init_local(config: LocalModelConfig, seed: u64) -> Result<LocalModel> {
    LocalModel::new(config, &mut seeded_rng(seed, LOCAL_INIT_STREAM))
}

pub fn predict_all(model: &LocalModel, dataset: &Dataset) -> Result<Vec<StreamRecord>> {
    let grids = GridCache::new(dataset);
    let all: Vec<usize> = (0..dataset.segments().len()).collect();
    predict_dataset(model, dataset, &grids, &all)
}

pub fn run_local(dataset: &Dataset, model: LocalModelConfig, train: &TrainConfig) -> Result<LocalRun> {
    let init = init_local(model, train.seed)?;
    let out = train_local(train, dataset, init)?;
    let stream = predict_all(&out.model, dataset)?;
    Ok(LocalRun {
        model: out.model,
        log: out.log,
        best_epoch: out.best_epoch,
        stream,
    })
}

pub fn init_seq(dataset: &Dataset, attribute: usize, shape: &SeqShape, seed: u64) -> Result<SeqEnhancer> {
    let spec = &dataset.attributes()[attribute];
    SeqEnhancer::new(
        &spec.name,
        shape.config(spec.num_classes()),
        &mut seeded_rng(seed, SEQ_INIT_STREAM + attribute as u64),
    )
}

pub struct SeqRun {
    /// One enhancer per attribute, dataset order.
    pub models: Vec<SeqEnhancer>,
    pub logs: Vec<TrainLog>,
    pub best_epochs: Vec<usize>,
    pub stream: Vec<StreamRecord>,
}

/// Trains one enhancer per attribute (in parallel) and enhances the whole
/// local stream.
pub fn run_seq(dataset: &Dataset, local: &[StreamRecord], shape: &SeqShape, train: &TrainConfig) -> Result<SeqRun> {
    let index = StreamIndex::new(local)?;
    let outcomes: Vec<_> = (0..dataset.attributes().len())
        .into_par_iter()
        .map(|a| {
            let init = init_seq(dataset, a, shape, train.seed)?;
            train_seq(train, dataset, &index, a, init)
        })
        .collect::<Result<_>>()?;
    let mut models = Vec::new();
    let mut logs = Vec::new();
    let mut best_epochs = Vec::new();
    for o in outcomes {
        models.push(o.model);
        logs.push(o.log);
        best_epochs.push(o.best_epoch);
    }
    let sections: Vec<&str> = dataset.sections().iter().map(|s| s.id.as_str()).collect();
    let stream = enhance_all(&models, dataset, &index, &sections)?;
    Ok(SeqRun {
        models,
        logs,
        best_epochs,
        stream,
    })
}

/// Enhanced stream for the given sections, ordered by segment then
/// attribute like the local stream.
pub fn enhance_all(models: &[SeqEnhancer], dataset: &Dataset, local: &StreamIndex, sections: &[&str]) -> Result<Vec<StreamRecord>> {
    if models.len() != dataset.attributes().len() {
        return Err(Error::ShapeMismatch(format!(
            "{} enhancers for {} attributes",
            models.len(),
            dataset.attributes().len()
        )));
    }
    let per_attr: Vec<Vec<StreamRecord>> = models
        .iter()
        .zip(dataset.attributes())
        .map(|(m, spec)| m.enhance_stream(local, &spec.name, sections))
        .collect::<Result<_>>()?;
    let n = per_attr.first().map_or(0, Vec::len);
    let mut iters: Vec<_> = per_attr.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::with_capacity(n * iters.len());
    for _ in 0..n {
        for it in &mut iters {
            out.push(it.next().expect("equal stream lengths"));
        }
    }
    Ok(out)
}

//! Optimisation loops for both stages.
//!
//! Training is single-threaded and deterministic for a given seed; only
//! validation inference fans out across threads, and its results are merged
//! in section order.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::eval::{macro_f1, mean_macro_f1, ConfusionMatrix};
use crate::localmodel::{GridCache, LocalModel};
use crate::losses::{
    cross_entropy, ifw_weights, multitask_recall_ce, multitask_total_loss, recall_weights, weighted_ce,
    BatchPosteriors, ClassWeights, Normalization, RECALL_EPS,
};
use crate::nncore::{softmax_backward, Module, Parameter};
use crate::seqmodel::SeqEnhancer;
use crate::stream::StreamIndex;
use crate::{seeded_rng, Error, Result};

/// RNG stream used for per-epoch shuffling.
pub const SHUFFLE_STREAM: u64 = 11;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Local,
    Seq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Plain cross-entropy.
    Ce,
    /// Inverse-frequency weights, normalised by batch size.
    Ifw,
    /// Recall-balanced weights refreshed every epoch, normalised by the
    /// weight sum.
    RecallMt,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::Ifw => "ifw",
            LossMode::RecallMt => "recall-mt",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossMode::Ce),
            "ifw" => Ok(LossMode::Ifw),
            "recall-mt" => Ok(LossMode::RecallMt),
            other => Err(Error::config("loss", format!("expected ce|ifw|recall-mt, got '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_per_epoch: f64,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Caps the number of training examples drawn per epoch (after the
    /// shuffle); `None` uses all of them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_examples_per_epoch: Option<usize>,
}

impl TrainConfig {
    pub fn local_defaults() -> Self {
        Self {
            stage: Stage::Local,
            learning_rate: 1e-5,
            weight_decay: 1e-3,
            batch_size: 12,
            epochs: 15,
            lr_decay_per_epoch: 0.88,
            loss_mode: LossMode::RecallMt,
            seed: 0,
            max_examples_per_epoch: None,
        }
    }

    pub fn seq_defaults() -> Self {
        Self {
            stage: Stage::Seq,
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 10,
            lr_decay_per_epoch: 1.0,
            loss_mode: LossMode::RecallMt,
            seed: 0,
            max_examples_per_epoch: None,
        }
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_per_epoch.powi(epoch as i32 - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) {
            return Err(Error::config("train.learning_rate", "must be positive and finite"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if !positive(self.lr_decay_per_epoch) {
            return Err(Error::config("train.lr_decay_per_epoch", "must be positive"));
        }
        if self.max_examples_per_epoch == Some(0) {
            return Err(Error::config("train.max_examples_per_epoch", "must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl AdamState {
    pub fn steps(&self) -> u32 {
        self.t
    }
}

/// One Adam update with decoupled weight decay (`p -= lr * wd * p` before the
/// adaptive step). Gradients are read from each parameter.
pub fn adam_step(params: &mut [&mut Parameter], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    for p in params.iter() {
        if !p.grad.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in '{}'", p.name)));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let p = &mut **p;
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for k in 0..value.len() {
            let g = grad[k];
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
            value[k] -= lr * weight_decay * value[k];
            value[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Validation recall per attribute and class, as used for the weights of
/// `epoch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecallTable {
    pub epoch: usize,
    pub recall: Vec<Vec<f64>>,
}

impl EpochRecallTable {
    /// Before any validation every recall is 0.
    pub fn initial(num_classes: &[usize]) -> Self {
        Self {
            epoch: 1,
            recall: num_classes.iter().map(|&c| vec![0.0; c]).collect(),
        }
    }
}

/// Recall table for the next epoch from this epoch's validation confusion
/// matrices. Classes without validation support keep their previous recall.
pub fn compute_epoch_recall(prev: &EpochRecallTable, confusions: &[ConfusionMatrix]) -> Result<EpochRecallTable> {
    if confusions.len() != prev.recall.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} confusion matrices for {} attributes",
            confusions.len(),
            prev.recall.len()
        )));
    }
    let recall = prev
        .recall
        .iter()
        .zip(confusions)
        .map(|(old, cm)| {
            if cm.num_classes() != old.len() {
                return Err(Error::ShapeMismatch("confusion size differs from recall table".into()));
            }
            Ok(old.iter().enumerate().map(|(c, &r)| cm.recall(c).unwrap_or(r)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(EpochRecallTable {
        epoch: prev.epoch + 1,
        recall,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss per attribute over the epoch's batches.
    pub loss: Vec<f64>,
    pub val_macro_f1: Vec<f64>,
    pub val_mean_macro_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// One table per attribute per epoch, empty under plain cross-entropy.
    pub weight_tables: Vec<(String, ClassWeights)>,
    lines: String,
}

impl TrainLog {
    pub fn text(&self) -> &str {
        &self.lines
    }

    fn weights(&mut self, attribute: &str, counts: &[usize], w: ClassWeights) {
        let recall = w.inputs.as_ref().map(|i| i.recall.clone());
        for (c, weight) in w.weights.iter().enumerate() {
            let r = recall.as_ref().map_or("-".to_string(), |r| format!("{:.6}", r[c]));
            let wt = weight.map_or("-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                self.lines,
                "weights epoch={} attribute={attribute} class={c} count={} recall={r} weight={wt}",
                w.epoch, counts[c]
            );
        }
        self.weight_tables.push((attribute.to_string(), w));
    }

    fn epoch(&mut self, names: &[String], rec: EpochRecord) {
        for (a, name) in names.iter().enumerate() {
            let _ = writeln!(
                self.lines,
                "epoch={} attribute={name} lr={:.6e} loss={:.8} val_macro_f1={:.4}",
                rec.epoch, rec.lr, rec.loss[a], rec.val_macro_f1[a]
            );
        }
        let _ = writeln!(self.lines, "epoch={} val_mean_macro_f1={:.4}", rec.epoch, rec.val_mean_macro_f1);
        self.epochs.push(rec);
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Parameters from the epoch with the best validation mean macro-F1.
    pub model: M,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_mean_macro_f1: f64,
}

/// Loss weights of one attribute for one epoch; `None` under plain CE.
fn epoch_weights(mode: LossMode, counts: &[usize], recall: &[f64], epoch: usize) -> Result<Option<ClassWeights>> {
    let total: usize = counts.iter().sum();
    Ok(match mode {
        LossMode::Ce => None,
        LossMode::Ifw => Some(ifw_weights(total, counts).with_epoch(epoch)),
        LossMode::RecallMt => Some(recall_weights(total, counts, recall, RECALL_EPS)?.with_epoch(epoch)),
    })
}

/// Loss value and `dL/dlogits` for one attribute over a batch.
fn attribute_loss(
    mode: LossMode,
    posteriors: &[Vec<f64>],
    labels: Vec<usize>,
    weights: Option<&ClassWeights>,
    probe: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let c = posteriors[0].len();
    let batch = BatchPosteriors::from_rows(posteriors, labels)?;
    let loss = match (mode, weights) {
        (LossMode::Ce, _) | (_, None) => {
            let uniform = ClassWeights::uniform(c);
            let l = weighted_ce(&batch, &uniform, Normalization::BatchSize)?;
            if probe {
                let plain = cross_entropy(&batch)?.value;
                let normalised = multitask_recall_ce(&batch, &uniform)?.value;
                if (plain - normalised).abs() > 1e-12 || (plain - l.value).abs() > 1e-12 {
                    return Err(Error::Numeric(format!(
                        "uniform-weight normalised loss {normalised} differs from cross-entropy {plain}"
                    )));
                }
            }
            l
        }
        (LossMode::Ifw, Some(w)) => weighted_ce(&batch, w, Normalization::BatchSize)?,
        (LossMode::RecallMt, Some(w)) => weighted_ce(&batch, w, Normalization::WeightSum)?,
    };
    if !loss.value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", loss.value)));
    }
    let grads = posteriors
        .iter()
        .enumerate()
        .map(|(n, p)| softmax_backward(p, loss.grad.row(n)))
        .collect();
    Ok((loss.value, grads))
}

fn shuffled_epoch(indices: &[usize], rng: &mut rand_chacha::ChaCha8Rng, cap: Option<usize>) -> Vec<usize> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    if let Some(cap) = cap {
        order.truncate(cap);
    }
    order
}

fn require_split(dataset: &Dataset, split: Split) -> Result<Vec<usize>> {
    let idx = dataset.split_indices(split);
    if idx.is_empty() {
        return Err(Error::Empty(format!("{split} split has no segments")));
    }
    Ok(idx)
}

/// Validation confusion matrices of a local model, one per attribute.
pub fn local_confusions(model: &LocalModel, dataset: &Dataset, grids: &GridCache, split: Split) -> Result<Vec<ConfusionMatrix>> {
    let idx = dataset.split_indices(split);
    let preds: Vec<Vec<usize>> = idx
        .par_iter()
        .map(|&g| {
            let frames = grids.frames(dataset, g, model.config().frames);
            Ok(model.forward(&frames)?.attributes.iter().map(|p| p.argmax).collect())
        })
        .collect::<Result<_>>()?;
    dataset
        .attributes()
        .iter()
        .enumerate()
        .map(|(a, spec)| {
            let mut cm = ConfusionMatrix::new(spec.num_classes());
            for (&g, p) in idx.iter().zip(&preds) {
                cm.add(dataset.segments()[g].labels[a], p[a])?;
            }
            Ok(cm)
        })
        .collect()
}

fn macro_scores(confusions: &[ConfusionMatrix]) -> Result<(Vec<f64>, f64)> {
    let f1: Vec<f64> = confusions.iter().map(|cm| macro_f1(cm).map(|r| r.macro_f1)).collect::<Result<_>>()?;
    let mean = mean_macro_f1(&f1)?;
    Ok((f1, mean))
}

fn train_counts(dataset: &Dataset, attribute: usize) -> Vec<usize> {
    let mut counts = vec![0; dataset.attributes()[attribute].num_classes()];
    for g in dataset.split_indices(Split::Train) {
        counts[dataset.segments()[g].labels[attribute]] += 1;
    }
    counts
}

/// Joint multi-task training of the local model: every batch supervises all
/// attributes and the step minimises the mean of the attribute losses.
pub fn train_local(config: &TrainConfig, dataset: &Dataset, mut model: LocalModel) -> Result<TrainOutcome<LocalModel>> {
    config.validate()?;
    let train = require_split(dataset, Split::Train)?;
    require_split(dataset, Split::Val)?;
    let attrs = dataset.attributes();
    if attrs.iter().map(|a| &a.name).ne(model.config().attributes.iter().map(|a| &a.name)) {
        return Err(Error::InvalidDataset("model attributes do not match the dataset".into()));
    }
    let names: Vec<String> = attrs.iter().map(|a| a.name.clone()).collect();
    let n_attr = attrs.len();
    let counts: Vec<Vec<usize>> = (0..n_attr).map(|a| train_counts(dataset, a)).collect();
    let grids = GridCache::new(dataset);
    let mut rng = seeded_rng(config.seed, SHUFFLE_STREAM);
    let mut adam = AdamState::default();
    let mut recall = EpochRecallTable::initial(&attrs.iter().map(|a| a.num_classes()).collect::<Vec<_>>());
    let mut log = TrainLog::default();
    let mut best: Option<(LocalModel, usize, f64)> = None;
    let frames_mode = model.config().frames;

    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        let mut weights = Vec::with_capacity(n_attr);
        for a in 0..n_attr {
            let w = epoch_weights(config.loss_mode, &counts[a], &recall.recall[a], epoch)?;
            if let Some(w) = &w {
                log.weights(&names[a], &counts[a], w.clone());
            }
            weights.push(w);
        }
        let order = shuffled_epoch(&train, &mut rng, config.max_examples_per_epoch);
        let mut loss_sum = vec![0.0; n_attr];
        let mut batches = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            model.zero_grad();
            let mut caches = Vec::with_capacity(batch.len());
            let mut posts: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(batch.len()); n_attr];
            for &g in batch {
                let frames = grids.frames(dataset, g, frames_mode);
                let (pred, cache) = model.forward_train(&frames)?;
                for (a, p) in pred.attributes.into_iter().enumerate() {
                    posts[a].push(p.posteriors);
                }
                caches.push(cache);
            }
            let mut dlogits: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n_attr); batch.len()];
            let mut values = Vec::with_capacity(n_attr);
            for a in 0..n_attr {
                let labels = batch.iter().map(|&g| dataset.segments()[g].labels[a]).collect();
                let (v, grads) = attribute_loss(config.loss_mode, &posts[a], labels, weights[a].as_ref(), b == 0)?;
                values.push(v);
                loss_sum[a] += v;
                for (n, g) in grads.into_iter().enumerate() {
                    dlogits[n].push(g.into_iter().map(|x| x / n_attr as f64).collect());
                }
            }
            multitask_total_loss(&values)?;
            for ((&g, cache), dl) in batch.iter().zip(&caches).zip(&dlogits) {
                let frames = grids.frames(dataset, g, frames_mode);
                model.backward(&frames, cache, dl);
            }
            adam_step(&mut model.parameters_mut(), &mut adam, lr, config.weight_decay)?;
            batches += 1;
        }
        let confusions = local_confusions(&model, dataset, &grids, Split::Val)?;
        let (f1, mean) = macro_scores(&confusions)?;
        recall = compute_epoch_recall(&recall, &confusions)?;
        log.epoch(
            &names,
            EpochRecord {
                epoch,
                lr,
                loss: loss_sum.iter().map(|s| s / batches as f64).collect(),
                val_macro_f1: f1,
                val_mean_macro_f1: mean,
            },
        );
        if best.as_ref().is_none_or(|(_, _, m)| mean > *m) {
            best = Some((model.clone(), epoch, mean));
        }
    }
    let (model, best_epoch, best_val_mean_macro_f1) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_mean_macro_f1,
    })
}

/// `(section position in dataset, centre index)` for every segment of a
/// split.
fn split_windows(dataset: &Dataset, split: Split) -> Vec<(usize, usize)> {
    dataset
        .sections()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == split)
        .flat_map(|(i, s)| (0..s.len).map(move |t| (i, t)))
        .collect()
}

/// Validation confusion of one enhancer reading stage-one predictions.
pub fn seq_confusion(
    model: &SeqEnhancer,
    dataset: &Dataset,
    local: &StreamIndex,
    attribute: usize,
    split: Split,
) -> Result<ConfusionMatrix> {
    let spec = &dataset.attributes()[attribute];
    let spans: Vec<_> = dataset.split_sections(split).collect();
    let per_section: Vec<Vec<(usize, usize)>> = spans
        .par_iter()
        .map(|span| {
            let preds = local.section(&spec.name, &span.id)?;
            let truth = dataset.section_labels(span, attribute);
            (0..span.len)
                .map(|t| {
                    let logits = model.enhance(&model.build_window(preds, t)?)?;
                    Ok((truth[t], crate::nncore::argmax(&logits)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(spec.num_classes());
    for (t, p) in per_section.into_iter().flatten() {
        cm.add(t, p)?;
    }
    Ok(cm)
}

/// Trains the enhancer of one attribute on stage-one predictions of the
/// train split; recall weights come from the enhancer's own validation
/// recall.
pub fn train_seq(
    config: &TrainConfig,
    dataset: &Dataset,
    local: &StreamIndex,
    attribute: usize,
    mut model: SeqEnhancer,
) -> Result<TrainOutcome<SeqEnhancer>> {
    config.validate()?;
    require_split(dataset, Split::Train)?;
    require_split(dataset, Split::Val)?;
    let spec = dataset
        .attributes()
        .get(attribute)
        .ok_or(Error::IndexOutOfRange {
            index: attribute,
            len: dataset.attributes().len(),
        })?
        .clone();
    if spec.num_classes() != model.config().num_classes {
        return Err(Error::ShapeMismatch(format!(
            "attribute '{}' has {} classes, enhancer {}",
            spec.name,
            spec.num_classes(),
            model.config().num_classes
        )));
    }
    let windows = split_windows(dataset, Split::Train);
    let positions: Vec<usize> = (0..windows.len()).collect();
    let labels: Vec<usize> = windows
        .iter()
        .map(|&(s, t)| dataset.segments()[dataset.sections()[s].start + t].labels[attribute])
        .collect();
    let counts = train_counts(dataset, attribute);
    let names = vec![spec.name.clone()];
    let mut rng = seeded_rng(config.seed ^ (attribute as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), SHUFFLE_STREAM);
    let mut adam = AdamState::default();
    let mut recall = EpochRecallTable::initial(&[spec.num_classes()]);
    let mut log = TrainLog::default();
    let mut best: Option<(SeqEnhancer, usize, f64)> = None;

    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        let weights = epoch_weights(config.loss_mode, &counts, &recall.recall[0], epoch)?;
        if let Some(w) = &weights {
            log.weights(&spec.name, &counts, w.clone());
        }
        let order = shuffled_epoch(&positions, &mut rng, config.max_examples_per_epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            model.zero_grad();
            let mut items = Vec::with_capacity(batch.len());
            let mut posts = Vec::with_capacity(batch.len());
            for &k in batch {
                let (s, t) = windows[k];
                let preds = local.section(&spec.name, &dataset.sections()[s].id)?;
                let w = model.build_window(preds, t)?;
                let (logits, cache) = model.forward_train(&w)?;
                posts.push(crate::nncore::softmax(&logits));
                items.push((w, cache));
            }
            let lab = batch.iter().map(|&k| labels[k]).collect();
            let (v, grads) = attribute_loss(config.loss_mode, &posts, lab, weights.as_ref(), b == 0)?;
            loss_sum += v;
            for ((w, cache), g) in items.iter().zip(&grads) {
                model.backward(w, cache, g);
            }
            adam_step(&mut model.parameters_mut(), &mut adam, lr, config.weight_decay)?;
            batches += 1;
        }
        let cm = seq_confusion(&model, dataset, local, attribute, Split::Val)?;
        let (f1, mean) = macro_scores(std::slice::from_ref(&cm))?;
        recall = compute_epoch_recall(&recall, std::slice::from_ref(&cm))?;
        log.epoch(
            &names,
            EpochRecord {
                epoch,
                lr,
                loss: vec![loss_sum / batches as f64],
                val_macro_f1: f1,
                val_mean_macro_f1: mean,
            },
        );
        if best.as_ref().is_none_or(|(_, _, m)| mean > *m) {
            best = Some((model.clone(), epoch, mean));
        }
    }
    let (model, best_epoch, best_val_mean_macro_f1) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_mean_macro_f1,
    })
}

//! Stage-one multi-task recognition over feature grids.
//!
//! Each input frame passes through a shared per-position channel adapter
//! (a trainable stand-in for the end of a convolutional trunk) and is then
//! pooled twice: once by the shared spatial pyramid, once per attribute by
//! attention with a learned query. The attribute descriptor is
//! `[attention pool, pyramid pools]` per frame, concatenated over frames, and
//! feeds a one-hidden-layer tanh head producing the attribute logits.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AttributeSpec, Dataset};
use crate::nncore::{
    argmax, softmax, Array, Linear, Module, Parameter, SppPlan, DEFAULT_SPP_GRIDS,
};
use crate::nncore::{attention::attend, attention::attend_backward, linear::affine, linear::affine_backward};
use crate::stream::StreamRecord;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FramesMode {
    Single,
    /// Segments `T`, `T-1` and `T-4`.
    Multi,
}

impl FramesMode {
    /// How many segments back each input frame lies, in descriptor order.
    pub fn back_offsets(self) -> &'static [usize] {
        match self {
            FramesMode::Single => &[0],
            FramesMode::Multi => &[0, 1, 4],
        }
    }
}

impl std::str::FromStr for FramesMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(FramesMode::Single),
            "multi" => Ok(FramesMode::Multi),
            other => Err(Error::config("frames", format!("expected single|multi, got '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub spp_grids: Vec<usize>,
    pub attributes: Vec<AttributeSpec>,
    pub frames: FramesMode,
    pub head_hidden: usize,
}

impl LocalModelConfig {
    pub fn new(height: usize, width: usize, channels: usize, attributes: Vec<AttributeSpec>) -> Self {
        Self {
            height,
            width,
            channels,
            spp_grids: DEFAULT_SPP_GRIDS.to_vec(),
            attributes,
            frames: FramesMode::Single,
            head_hidden: 256,
        }
    }

    pub fn spp_len(&self) -> usize {
        self.channels * self.spp_grids.iter().map(|g| g * g).sum::<usize>()
    }

    /// Attention pool plus pyramid pools of one frame.
    pub fn frame_descriptor_len(&self) -> usize {
        self.channels + self.spp_len()
    }

    pub fn descriptor_len(&self) -> usize {
        self.frames.back_offsets().len() * self.frame_descriptor_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::config("local_model.attributes", "no attributes"));
        }
        for a in &self.attributes {
            a.validate()?;
        }
        if self.head_hidden == 0 {
            return Err(Error::config("local_model.head_hidden", "must be positive"));
        }
        if self.channels == 0 {
            return Err(Error::config("local_model.channels", "must be positive"));
        }
        SppPlan::new(self.height, self.width, &self.spp_grids)
            .map_err(|e| Error::config("local_model.spp_grids", e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    query: Parameter,
    hidden: Linear,
    output: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributePrediction {
    pub logits: Vec<f64>,
    pub posteriors: Vec<f64>,
    pub argmax: usize,
}

impl AttributePrediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        Self {
            posteriors: softmax(&logits),
            argmax: argmax(&logits),
            logits,
        }
    }
}

/// Per-attribute outputs, in config attribute order.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalPrediction {
    pub attributes: Vec<AttributePrediction>,
}

#[derive(Clone, Debug)]
struct HeadCache {
    attention: Vec<Vec<f64>>,
    descriptor: Vec<f64>,
    hidden: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct LocalCache {
    adapted: Vec<Vec<f64>>,
    heads: Vec<HeadCache>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalModel {
    config: LocalModelConfig,
    spp: SppPlan,
    adapter: Linear,
    heads: Vec<Head>,
}

impl LocalModel {
    pub fn new<R: Rng + ?Sized>(config: LocalModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let spp = SppPlan::new(config.height, config.width, &config.spp_grids)?;
        let mut eye = Array::zeros(&[c, c]);
        for i in 0..c {
            eye.data_mut()[i * c + i] = 1.0;
        }
        let adapter = Linear::from_parts("adapter", eye, Array::zeros(&[c]));
        let d = config.descriptor_len();
        let bound = 1.0 / (c as f64).sqrt();
        let heads = config
            .attributes
            .iter()
            .map(|a| {
                let q = (0..c).map(|_| rng.random_range(-bound..bound)).collect();
                let prefix = format!("heads.{}", a.name);
                Head {
                    query: Parameter::new(format!("{prefix}.query"), Array::vector(q)),
                    hidden: Linear::new(&format!("{prefix}.hidden"), d, config.head_hidden, rng),
                    output: Linear::new(&format!("{prefix}.output"), config.head_hidden, a.num_classes(), rng),
                }
            })
            .collect();
        Ok(Self {
            config,
            spp,
            adapter,
            heads,
        })
    }

    pub fn config(&self) -> &LocalModelConfig {
        &self.config
    }

    fn grid_len(&self) -> usize {
        self.config.height * self.config.width * self.config.channels
    }

    fn check_frames(&self, frames: &[&[f64]]) -> Result<()> {
        let n = self.config.frames.back_offsets().len();
        if frames.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "model expects {n} frame(s), got {}",
                frames.len()
            )));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != self.grid_len()) {
            return Err(Error::ShapeMismatch(format!(
                "frame has {} values, expected {}x{}x{} = {}",
                f.len(),
                self.config.height,
                self.config.width,
                self.config.channels,
                self.grid_len()
            )));
        }
        Ok(())
    }

    fn adapt(&self, frame: &[f64]) -> Vec<f64> {
        let c = self.config.channels;
        let mut out = vec![0.0; frame.len()];
        for (x, y) in frame.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            affine(self.adapter.weight.value.data(), self.adapter.bias.value.data(), x, y);
        }
        out
    }

    /// Descriptor of every attribute (config order) plus the cache needed by
    /// the backward pass.
    fn forward_cached(&self, frames: &[&[f64]]) -> Result<(LocalPrediction, LocalCache)> {
        self.check_frames(frames)?;
        let c = self.config.channels;
        let adapted: Vec<Vec<f64>> = frames.iter().map(|f| self.adapt(f)).collect();
        let pooled: Vec<Vec<f64>> = adapted.iter().map(|a| self.spp.pool(a, c)).collect();
        let mut preds = Vec::with_capacity(self.heads.len());
        let mut caches = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let mut descriptor = Vec::with_capacity(self.config.descriptor_len());
            let mut attention = Vec::with_capacity(frames.len());
            for (a, p) in adapted.iter().zip(&pooled) {
                let att = attend(a, c, head.query.value.data());
                descriptor.extend_from_slice(&att.output);
                descriptor.extend_from_slice(p);
                attention.push(att.weights);
            }
            let hidden: Vec<f64> = head.hidden.forward(&descriptor).into_iter().map(f64::tanh).collect();
            let logits = head.output.forward(&hidden);
            preds.push(AttributePrediction::from_logits(logits));
            caches.push(HeadCache {
                attention,
                descriptor,
                hidden,
            });
        }
        Ok((
            LocalPrediction { attributes: preds },
            LocalCache {
                adapted,
                heads: caches,
            },
        ))
    }

    /// Forward pass over the configured frames (most recent first).
    pub fn forward(&self, frames: &[&[f64]]) -> Result<LocalPrediction> {
        self.forward_cached(frames).map(|(p, _)| p)
    }

    pub fn forward_single(&self, grid: &[f64]) -> Result<LocalPrediction> {
        if self.config.frames != FramesMode::Single {
            return Err(Error::ShapeMismatch("forward_single on a multi-frame model".into()));
        }
        self.forward(&[grid])
    }

    /// Frames for offsets `0, -1, -4`, in that order.
    pub fn forward_multi(&self, grids: [&[f64]; 3]) -> Result<LocalPrediction> {
        if self.config.frames != FramesMode::Multi {
            return Err(Error::ShapeMismatch("forward_multi on a single-frame model".into()));
        }
        self.forward(&grids)
    }

    /// Per-attribute descriptors, exposed for inspection.
    pub fn descriptors(&self, frames: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let (_, cache) = self.forward_cached(frames)?;
        Ok(cache.heads.into_iter().map(|h| h.descriptor).collect())
    }

    pub fn forward_train(&self, frames: &[&[f64]]) -> Result<(LocalPrediction, LocalCache)> {
        self.forward_cached(frames)
    }

    /// Accumulates parameter gradients given `dL/dlogits` for every
    /// attribute (an empty vector skips that attribute).
    pub fn backward(&mut self, frames: &[&[f64]], cache: &LocalCache, grad_logits: &[Vec<f64>]) {
        let c = self.config.channels;
        let spp_len = self.config.spp_len();
        let frame_len = self.config.frame_descriptor_len();
        let n_frames = frames.len();
        let mut d_adapted = vec![vec![0.0; self.grid_len()]; n_frames];
        let mut d_pooled = vec![vec![0.0; spp_len]; n_frames];
        let mut any = false;
        for ((head, hc), dl) in self.heads.iter_mut().zip(&cache.heads).zip(grad_logits) {
            if dl.is_empty() {
                continue;
            }
            any = true;
            let dh = head.output.backward(&hc.hidden, dl);
            let dpre: Vec<f64> = dh
                .iter()
                .zip(&hc.hidden)
                .map(|(g, h)| g * (1.0 - h * h))
                .collect();
            let ddesc = head.hidden.backward(&hc.descriptor, &dpre);
            for f in 0..n_frames {
                let block = &ddesc[f * frame_len..(f + 1) * frame_len];
                let (d_att, d_spp) = block.split_at(c);
                for (acc, g) in d_pooled[f].iter_mut().zip(d_spp) {
                    *acc += g;
                }
                attend_backward(
                    &cache.adapted[f],
                    c,
                    head.query.value.data(),
                    &hc.attention[f],
                    d_att,
                    Some(&mut d_adapted[f]),
                    head.query.grad.data_mut(),
                );
            }
        }
        if !any {
            return;
        }
        for f in 0..n_frames {
            self.spp.backward_into(&d_pooled[f], c, &mut d_adapted[f]);
            for (x, dy) in frames[f].chunks_exact(c).zip(d_adapted[f].chunks_exact(c)) {
                affine_backward(
                    self.adapter.weight.value.data(),
                    x,
                    dy,
                    self.adapter.weight.grad.data_mut(),
                    self.adapter.bias.grad.data_mut(),
                    None,
                );
            }
        }
    }

    /// Parameters of one attribute's back-end (query and head).
    pub fn head_parameters_mut(&mut self, attribute: usize) -> Vec<&mut Parameter> {
        let h = &mut self.heads[attribute];
        let mut v = vec![&mut h.query];
        v.extend(h.hidden.parameters_mut());
        v.extend(h.output.parameters_mut());
        v
    }

    pub fn shared_parameters(&self) -> Vec<&Parameter> {
        self.adapter.parameters()
    }
}

impl Module for LocalModel {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.adapter.parameters();
        for h in &self.heads {
            v.push(&h.query);
            v.extend(h.hidden.parameters());
            v.extend(h.output.parameters());
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.adapter.parameters_mut();
        for h in &mut self.heads {
            v.push(&mut h.query);
            v.extend(h.hidden.parameters_mut());
            v.extend(h.output.parameters_mut());
        }
        v
    }
}

/// All feature grids of a dataset converted to `f64` once.
#[derive(Clone, Debug)]
pub struct GridCache {
    grids: Vec<Vec<f64>>,
}

impl GridCache {
    pub fn new(dataset: &Dataset) -> Self {
        let store = dataset.features();
        Self {
            grids: (0..store.len()).map(|i| store.grid_f64(i)).collect(),
        }
    }

    /// Input frames of a segment (global index), clamped at section start.
    pub fn frames<'a>(&'a self, dataset: &Dataset, segment: usize, mode: FramesMode) -> Vec<&'a [f64]> {
        mode.back_offsets()
            .iter()
            .map(|&back| {
                let g = dataset.clamped_back(segment, back);
                self.grids[dataset.segments()[g].feature_offset].as_slice()
            })
            .collect()
    }
}

/// Predictions for the given segments (global indices): one record per
/// segment per attribute, ordered by segment then attribute.
pub fn predict_dataset(
    model: &LocalModel,
    dataset: &Dataset,
    grids: &GridCache,
    segments: &[usize],
) -> Result<Vec<StreamRecord>> {
    let attrs = &model.config().attributes;
    if attrs.iter().map(|a| &a.name).ne(dataset.attributes().iter().map(|a| &a.name)) {
        return Err(Error::InvalidDataset(
            "model attributes do not match the dataset".into(),
        ));
    }
    let per_segment: Vec<Vec<StreamRecord>> = segments
        .par_iter()
        .map(|&g| {
            let seg = &dataset.segments()[g];
            let frames = grids.frames(dataset, g, model.config().frames);
            let pred = model.forward(&frames)?;
            Ok(attrs
                .iter()
                .zip(pred.attributes)
                .map(|(a, p)| StreamRecord::new(&seg.section_id, seg.index, &a.name, p.logits, None))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_segment.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TemporalKind;
    use crate::seeded_rng;

    fn attrs() -> Vec<AttributeSpec> {
        vec![
            AttributeSpec::new("a", &["x", "y"], Some(0), TemporalKind::SinglePeak),
            AttributeSpec::new("b", &["p", "q", "r"], None, TemporalKind::Smooth),
        ]
    }

    fn model(frames: FramesMode, c: usize) -> LocalModel {
        let mut cfg = LocalModelConfig::new(6, 6, c, attrs());
        cfg.frames = frames;
        cfg.head_hidden = 5;
        LocalModel::new(cfg, &mut seeded_rng(4, 0)).unwrap()
    }

    fn random_grid(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = seeded_rng(seed, 9);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn descriptor_lengths() {
        let m = model(FramesMode::Single, 8);
        assert_eq!(m.config().descriptor_len(), 408);
        let d = m.descriptors(&[&random_grid(1, 288)]).unwrap();
        assert!(d.iter().all(|v| v.len() == 408));
        let mm = model(FramesMode::Multi, 8);
        assert_eq!(mm.config().descriptor_len(), 3 * 408);
    }

    #[test]
    fn constant_grid_descriptor() {
        let m = model(FramesMode::Single, 3);
        let f = [0.4, -1.1, 2.0];
        let grid = f.repeat(36);
        for d in m.descriptors(&[&grid]).unwrap() {
            for (k, v) in d.iter().enumerate() {
                assert!((v - f[k % 3]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn queries_differentiate_attention_pools() {
        // two distinct positions; orthogonal queries favour different ones
        let mut cfg = LocalModelConfig::new(1, 2, 2, attrs());
        cfg.spp_grids = vec![1];
        cfg.head_hidden = 3;
        let mut m = LocalModel::new(cfg, &mut seeded_rng(0, 0)).unwrap();
        let s = 3f64.ln() * 2f64.sqrt();
        m.heads[0].query.value = Array::vector(vec![s, 0.0]);
        m.heads[1].query.value = Array::vector(vec![0.0, s]);
        let grid = [1.0, 0.0, 0.0, 1.0];
        let d = m.descriptors(&[&grid]).unwrap();
        // head a: scores (ln 3, 0) -> weights (0.75, 0.25)
        assert!((d[0][0] - 0.75).abs() < 1e-12 && (d[0][1] - 0.25).abs() < 1e-12);
        assert!((d[1][0] - 0.25).abs() < 1e-12 && (d[1][1] - 0.75).abs() < 1e-12);
        assert_eq!(&d[0][2..], &d[1][2..]);
        assert_eq!(&d[0][2..], &[0.5, 0.5]);
    }

    #[test]
    fn multi_frame_with_identical_inputs_matches_summed_blocks() {
        let multi = model(FramesMode::Multi, 4);
        let mut single = model(FramesMode::Single, 4);
        let fl = multi.config().frame_descriptor_len();
        for (hs, hm) in single.heads.iter_mut().zip(&multi.heads) {
            hs.query = hm.query.clone();
            hs.output = hm.output.clone();
            hs.hidden.bias = hm.hidden.bias.clone();
            let rows = hm.hidden.d_out();
            let w = hm.hidden.weight.value.data();
            let summed: Vec<f64> = (0..rows)
                .flat_map(|r| (0..fl).map(move |k| (0..3).map(|f| w[r * 3 * fl + f * fl + k]).sum::<f64>()))
                .collect();
            hs.hidden.weight.value = Array::from_vec(&[rows, fl], summed).unwrap();
        }
        let g = random_grid(3, 144);
        let pm = multi.forward_multi([&g, &g, &g]).unwrap();
        let ps = single.forward_single(&g).unwrap();
        for (a, b) in pm.attributes.iter().zip(&ps.attributes) {
            for (x, y) in a.logits.iter().zip(&b.logits) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_heads_give_uniform_posteriors() {
        let mut m = model(FramesMode::Single, 2);
        for a in 0..2 {
            for p in m.head_parameters_mut(a) {
                p.value.fill(0.0);
            }
        }
        let p = m.forward_single(&random_grid(5, 72)).unwrap();
        assert!(p.attributes[0].posteriors.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(p.attributes[1].posteriors.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn heads_are_independent() {
        let m = model(FramesMode::Single, 2);
        let g = random_grid(6, 72);
        let before = m.forward_single(&g).unwrap();
        let mut z = m.clone();
        for p in z.head_parameters_mut(1) {
            p.value.fill(0.0);
        }
        let after = z.forward_single(&g).unwrap();
        assert_eq!(before.attributes[0], after.attributes[0]);
        assert_ne!(before.attributes[1], after.attributes[1]);
    }

    #[test]
    fn attribute_loss_reaches_shared_params_only_through_own_query() {
        let mut m = model(FramesMode::Single, 3);
        let g = random_grid(7, 108);
        let (_, cache) = m.forward_train(&[&g]).unwrap();
        m.backward(&[&g], &cache, &[vec![0.3, -0.3], vec![]]);
        assert!(m.shared_parameters().iter().all(|p| p.grad.data().iter().any(|&v| v != 0.0)));
        assert!(m.heads[0].query.grad.data().iter().any(|&v| v != 0.0));
        assert!(m.heads[1].query.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_frame_count_or_size() {
        let m = model(FramesMode::Multi, 2);
        let g = random_grid(1, 72);
        assert!(m.forward(&[&g]).is_err());
        assert!(m.forward_single(&g).is_err());
        assert!(m.forward(&[&g[..10], &g, &g]).is_err());
    }
}

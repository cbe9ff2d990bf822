//! Stage-two sequential enhancement.
//!
//! One independent enhancer per attribute reads a window of stage-one
//! predictions centred on a segment. Each window element is the segment's
//! logits concatenated with a learned embedding of its winning class. A
//! stack of bidirectional LSTM layers runs over the window; the final
//! descriptor joins every layer's last forward and backward states with the
//! top layer's output at the centre, and a linear layer maps it to corrected
//! logits for the centre segment.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nncore::{argmax, embedding_dim, softmax, Embedding, Linear, LstmCache, LstmCell, Module, Parameter};
use crate::stream::{SectionPredictions, StreamIndex, StreamRecord, SEQ_STAGE};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqEnhancerConfig {
    pub num_classes: usize,
    pub half_window: usize,
    pub num_layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl SeqEnhancerConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            half_window: 10,
            num_layers: 4,
            hidden: 128,
            embed_dim: embedding_dim(num_classes),
        }
    }

    pub fn window_len(&self) -> usize {
        2 * self.half_window + 1
    }

    pub fn input_len(&self) -> usize {
        self.num_classes + self.embed_dim
    }

    pub fn descriptor_len(&self) -> usize {
        self.num_layers * 2 * self.hidden + 2 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("num_classes", self.num_classes >= 2, "needs at least two classes"),
            ("num_layers", self.num_layers >= 1, "must be positive"),
            ("hidden", self.hidden >= 1, "must be positive"),
            ("embed_dim", self.embed_dim >= 1, "must be positive"),
        ];
        for (field, ok, msg) in checks {
            if !ok {
                return Err(Error::config(format!("seq_model.{field}"), msg));
            }
        }
        Ok(())
    }
}

/// The clamped window around one centre segment.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowInput {
    /// Segment index of each window element, clamped to the section.
    pub indices: Vec<usize>,
    /// Winning stage-one class of each element.
    pub classes: Vec<usize>,
    /// `concat(logits, embedding[class])` per element.
    pub vectors: Vec<Vec<f64>>,
}

impl WindowInput {
    pub fn center(&self) -> usize {
        self.indices.len() / 2
    }
}

struct Direction {
    steps: Vec<LstmCache>,
}

/// Per-layer caches: forward direction in time order, backward direction
/// indexed by time position as well.
pub struct EnhanceCache {
    layers: Vec<(Direction, Direction)>,
    descriptor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqEnhancer {
    config: SeqEnhancerConfig,
    embedding: Embedding,
    layers: Vec<(LstmCell, LstmCell)>,
    output: Linear,
}

impl SeqEnhancer {
    pub fn new<R: Rng + ?Sized>(name: &str, config: SeqEnhancerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embedding = Embedding::new(&format!("{name}.embedding"), config.num_classes, config.embed_dim, 0.1, rng);
        let h = config.hidden;
        let layers = (0..config.num_layers)
            .map(|l| {
                let input = if l == 0 { config.input_len() } else { 2 * h };
                (
                    LstmCell::new(&format!("{name}.lstm{l}.fwd"), input, h, rng),
                    LstmCell::new(&format!("{name}.lstm{l}.bwd"), input, h, rng),
                )
            })
            .collect();
        let output = Linear::new(&format!("{name}.output"), config.descriptor_len(), config.num_classes, rng);
        Ok(Self {
            config,
            embedding,
            layers,
            output,
        })
    }

    pub fn config(&self) -> &SeqEnhancerConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    /// Window centred on segment `t` of one section's predictions.
    pub fn build_window(&self, preds: &SectionPredictions, t: usize) -> Result<WindowInput> {
        let len = preds.logits.len();
        if t >= len {
            return Err(Error::IndexOutOfRange { index: t, len });
        }
        let hw = self.config.half_window as isize;
        let indices: Vec<usize> = (-hw..=hw)
            .map(|d| (t as isize + d).clamp(0, len as isize - 1) as usize)
            .collect();
        let mut classes = Vec::with_capacity(indices.len());
        let mut vectors = Vec::with_capacity(indices.len());
        for &i in &indices {
            let logits = &preds.logits[i];
            if logits.len() != self.config.num_classes {
                return Err(Error::ShapeMismatch(format!(
                    "stream has {} logits, enhancer expects {}",
                    logits.len(),
                    self.config.num_classes
                )));
            }
            let c = preds.argmax[i];
            let mut v = logits.clone();
            v.extend_from_slice(self.embedding.lookup(c)?);
            classes.push(c);
            vectors.push(v);
        }
        Ok(WindowInput {
            indices,
            classes,
            vectors,
        })
    }

    fn check_window(&self, window: &WindowInput) -> Result<()> {
        if window.vectors.len() != self.config.window_len()
            || window.vectors.iter().any(|v| v.len() != self.config.input_len())
        {
            return Err(Error::ShapeMismatch(format!(
                "window must hold {} vectors of length {}",
                self.config.window_len(),
                self.config.input_len()
            )));
        }
        Ok(())
    }

    pub fn forward_train(&self, window: &WindowInput) -> Result<(Vec<f64>, EnhanceCache)> {
        self.check_window(window)?;
        let h = self.config.hidden;
        let t_len = window.vectors.len();
        let zeros = vec![0.0; h];
        let mut inputs: Vec<Vec<f64>> = window.vectors.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut descriptor = Vec::with_capacity(self.config.descriptor_len());
        for (fwd, bwd) in &self.layers {
            let mut fsteps: Vec<LstmCache> = Vec::with_capacity(t_len);
            for x in &inputs {
                let (hp, cp) = fsteps.last().map_or((&zeros, &zeros), |s| (&s.h, &s.c));
                let s = fwd.step(x, hp, cp);
                fsteps.push(s);
            }
            let mut bsteps: Vec<Option<LstmCache>> = (0..t_len).map(|_| None).collect();
            let (mut hp, mut cp) = (zeros.clone(), zeros.clone());
            for t in (0..t_len).rev() {
                let s = bwd.step(&inputs[t], &hp, &cp);
                hp = s.h.clone();
                cp = s.c.clone();
                bsteps[t] = Some(s);
            }
            let bsteps: Vec<LstmCache> = bsteps.into_iter().map(Option::unwrap).collect();
            descriptor.extend_from_slice(&fsteps[t_len - 1].h);
            descriptor.extend_from_slice(&bsteps[0].h);
            inputs = fsteps
                .iter()
                .zip(&bsteps)
                .map(|(f, b)| [f.h.as_slice(), b.h.as_slice()].concat())
                .collect();
            layers.push((Direction { steps: fsteps }, Direction { steps: bsteps }));
        }
        descriptor.extend_from_slice(&inputs[window.center()]);
        let logits = self.output.forward(&descriptor);
        Ok((logits, EnhanceCache { layers, descriptor }))
    }

    /// Corrected logits for the window's centre segment.
    pub fn enhance(&self, window: &WindowInput) -> Result<Vec<f64>> {
        self.forward_train(window).map(|(l, _)| l)
    }

    pub fn final_descriptor(&self, window: &WindowInput) -> Result<Vec<f64>> {
        self.forward_train(window).map(|(_, c)| c.descriptor)
    }

    /// Full backpropagation through time; accumulates parameter gradients
    /// including the embedding rows selected by the window.
    pub fn backward(&mut self, window: &WindowInput, cache: &EnhanceCache, grad_logits: &[f64]) {
        let h = self.config.hidden;
        let n_layers = self.layers.len();
        let t_len = window.vectors.len();
        let ddesc = self.output.backward(&cache.descriptor, grad_logits);
        let mut d_out = vec![vec![0.0; 2 * h]; t_len];
        d_out[window.center()].copy_from_slice(&ddesc[n_layers * 2 * h..]);
        for l in (0..n_layers).rev() {
            let (fwd, bwd) = &mut self.layers[l];
            let (fc, bc) = &cache.layers[l];
            let d_last = &ddesc[l * 2 * h..(l + 1) * 2 * h];
            let mut d_in = vec![vec![0.0; fwd.input()]; t_len];

            let mut dh_next = d_last[..h].to_vec();
            let mut dc_next = vec![0.0; h];
            for t in (0..t_len).rev() {
                let dh: Vec<f64> = dh_next.iter().zip(&d_out[t][..h]).map(|(a, b)| a + b).collect();
                let (dx, dhp, dcp) = fwd.step_backward(&fc.steps[t], &dh, &dc_next);
                add_into(&mut d_in[t], &dx);
                dh_next = dhp;
                dc_next = dcp;
            }

            let mut dh_next = d_last[h..].to_vec();
            let mut dc_next = vec![0.0; h];
            for t in 0..t_len {
                let dh: Vec<f64> = dh_next.iter().zip(&d_out[t][h..]).map(|(a, b)| a + b).collect();
                let (dx, dhp, dcp) = bwd.step_backward(&bc.steps[t], &dh, &dc_next);
                add_into(&mut d_in[t], &dx);
                dh_next = dhp;
                dc_next = dcp;
            }
            d_out = d_in;
        }
        let c = self.config.num_classes;
        for (class, d) in window.classes.iter().zip(&d_out) {
            self.embedding.backward(*class, &d[c..]);
        }
    }

    /// Corrected predictions for every segment of one section; windows are
    /// independent of each other.
    pub fn enhance_section(&self, preds: &SectionPredictions, section_id: &str, attribute: &str) -> Result<Vec<StreamRecord>> {
        (0..preds.logits.len())
            .map(|t| {
                let w = self.build_window(preds, t)?;
                let logits = self.enhance(&w)?;
                Ok(StreamRecord::new(section_id, t, attribute, logits, Some(SEQ_STAGE)))
            })
            .collect()
    }

    /// Enhances the listed sections of one attribute's stream in parallel;
    /// output follows the order of `sections`.
    pub fn enhance_stream(&self, index: &StreamIndex, attribute: &str, sections: &[&str]) -> Result<Vec<StreamRecord>> {
        let parts: Vec<Vec<StreamRecord>> = sections
            .par_iter()
            .map(|s| self.enhance_section(index.section(attribute, s)?, s, attribute))
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn posteriors(logits: &[f64]) -> (Vec<f64>, usize) {
        (softmax(logits), argmax(logits))
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

impl Module for SeqEnhancer {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.embedding.parameters();
        for (f, b) in &self.layers {
            v.extend(f.parameters());
            v.extend(b.parameters());
        }
        v.extend(self.output.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.embedding.parameters_mut();
        for (f, b) in &mut self.layers {
            v.extend(f.parameters_mut());
            v.extend(b.parameters_mut());
        }
        v.extend(self.output.parameters_mut());
        v
    }
}

//! Declarative run configuration (TOML), overridable from the command line.

use std::path::Path;

use roadattr_core::localmodel::{FramesMode, LocalModelConfig};
use roadattr_core::nncore::DEFAULT_SPP_GRIDS;
use roadattr_core::pipeline::SeqShape;
use roadattr_core::synthgen::GeneratorConfig;
use roadattr_core::trainer::{LossMode, TrainConfig};
use roadattr_core::dataset::AttributeSpec;
use serde::{Deserialize, Serialize};

use crate::Invalid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, initialisation and shuffling.
    pub seed: u64,
    pub threads: usize,
    pub generator: GeneratorConfig,
    pub local_model: LocalModelSection,
    pub seq_model: SeqShape,
    pub train_local: TrainSection,
    pub train_seq: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            generator: GeneratorConfig::default(),
            local_model: LocalModelSection::default(),
            seq_model: SeqShape::default(),
            train_local: TrainSection::default(),
            train_seq: TrainSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalModelSection {
    pub frames: FramesMode,
    pub head_hidden: usize,
    pub spp_grids: Vec<usize>,
}

impl Default for LocalModelSection {
    fn default() -> Self {
        Self {
            frames: FramesMode::Single,
            head_hidden: 256,
            spp_grids: DEFAULT_SPP_GRIDS.to_vec(),
        }
    }
}

impl LocalModelSection {
    pub fn build(&self, height: usize, width: usize, channels: usize, attributes: Vec<AttributeSpec>) -> LocalModelConfig {
        LocalModelConfig {
            frames: self.frames,
            head_hidden: self.head_hidden,
            spp_grids: self.spp_grids.clone(),
            ..LocalModelConfig::new(height, width, channels, attributes)
        }
    }
}

/// Optional overrides of the stage defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lr_decay_per_epoch: Option<f64>,
    pub loss: Option<LossMode>,
    pub max_examples_per_epoch: Option<usize>,
}

impl TrainSection {
    pub fn apply(&self, mut base: TrainConfig, seed: u64) -> TrainConfig {
        base.seed = seed;
        if let Some(v) = self.learning_rate {
            base.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            base.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            base.batch_size = v;
        }
        if let Some(v) = self.epochs {
            base.epochs = v;
        }
        if let Some(v) = self.lr_decay_per_epoch {
            base.lr_decay_per_epoch = v;
        }
        if let Some(v) = self.loss {
            base.loss_mode = v;
        }
        if self.max_examples_per_epoch.is_some() {
            base.max_examples_per_epoch = self.max_examples_per_epoch;
        }
        base
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
        if cfg.threads == 0 {
            return Err(Invalid("config field 'threads' must be positive".into()).into());
        }
        Ok(cfg)
    }

    /// Generator settings with the run seed applied.
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seed,
            ..self.generator.clone()
        }
    }

    pub fn train_local(&self) -> TrainConfig {
        self.train_local.apply(TrainConfig::local_defaults(), self.seed)
    }

    pub fn train_seq(&self) -> TrainConfig {
        self.train_seq.apply(TrainConfig::seq_defaults(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_overrides_defaults() {
        let cfg: RunConfig = toml::from_str(
            "seed = 7\n[generator]\nnum_sections = 12\n[train_local]\nepochs = 2\nloss = \"ifw\"\n[seq_model]\nhidden = 8\n",
        )
        .unwrap();
        assert_eq!(cfg.generator().seed, 7);
        assert_eq!(cfg.generator.num_sections, 12);
        assert_eq!(cfg.generator.segments_per_section, 200);
        let t = cfg.train_local();
        assert_eq!((t.epochs, t.loss_mode, t.seed), (2, LossMode::Ifw, 7));
        assert_eq!(t.batch_size, 12);
        assert_eq!(cfg.seq_model.hidden, 8);
        assert_eq!(cfg.seq_model.num_layers, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train_local]\nepoch = 2\n").is_err());
    }
}

//! Run configuration: every module's settings plus the master seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_builder::FrameSequence;
use crate::label_prop::PropagationConfig;
use crate::synth_data::{generate_split, GroundTruth, Split, SpriteSceneConfig};
use crate::trainer::{AdaptConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_sequences: usize,
    pub heldout_sequences: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_sequences: 128,
            heldout_sequences: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub hops: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { hops: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub out: PathBuf,
    pub data: SpriteSceneConfig,
    pub dataset: DatasetConfig,
    /// `train.seed` is overwritten by `seed` on resolution.
    pub train: TrainConfig,
    pub propagation: PropagationConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: SpriteSceneConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            propagation: PropagationConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Propagates the master seed and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.train.encoder.channels = self.data.channels;
        self.data.validate()?;
        self.train.validate()?;
        self.propagation.validate()?;
        self.adapt.validate()?;
        if self.eval.hops.is_empty() || self.eval.hops.contains(&0) {
            return Err(Error::config("eval hops must be a non-empty list of positive integers"));
        }
        Ok(self)
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn train_sequences(&self) -> Result<Vec<FrameSequence>> {
        Ok(generate_split(&self.data, self.seed, Split::Train, self.dataset.train_sequences)?
            .into_iter()
            .map(|(s, _)| s)
            .collect())
    }

    pub fn heldout_set(&self) -> Result<Vec<(FrameSequence, GroundTruth)>> {
        generate_split(&self.data, self.seed, Split::Heldout, self.dataset.heldout_sequences)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::default().resolve().unwrap();
        assert_eq!(c.train.seed, 0);
    }

    #[test]
    fn partial_json_keeps_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 9, "train": {"steps": 5}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.propagation.k_nn, 10);
    }

    #[test]
    fn unknown_top_level_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json("not json").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_value(c.echo()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_sections_fail_resolution() {
        let mut c = RunConfig::default();
        c.train.walk.edge_dropout = 1.0;
        assert!(c.resolve().is_err());
        let mut c = RunConfig::default();
        c.eval.hops = vec![0];
        assert!(c.resolve().is_err());
    }
}

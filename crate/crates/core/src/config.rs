//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{BeamConfig, BEAM_SIZE, MAX_CAPTION_LEN};
use crate::distill::KdWeights;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::PretrainSampling;
use crate::tensor::AdamWConfig;

pub const TOP_K_CONCEPTS: usize = 20;
pub const KD_TEMPERATURE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub tau: f64,
    pub weights: KdWeights,
    /// Trunk terms first, prediction terms second.
    pub two_phase: bool,
    /// 1-based teacher layer per student layer; uniform `m(j) = j·L_t/L_s`
    /// when absent.
    pub layer_map: Option<Vec<usize>>,
    /// Teacher checkpoints, one per ensemble branch (assigned round-robin).
    pub teachers: Vec<PathBuf>,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            tau: KD_TEMPERATURE,
            weights: KdWeights::default(),
            two_phase: false,
            layer_map: None,
            teachers: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// JSONL training set.
    pub train: Option<PathBuf>,
    /// JSONL validation set.
    pub val: Option<PathBuf>,
    /// One token per line.
    pub vocab: Option<PathBuf>,
    /// Checkpoint to start from.
    pub init: Option<PathBuf>,
    /// Checkpoint written at the end of training.
    pub output: Option<PathBuf>,
    /// JSON-lines loss log.
    pub log: Option<PathBuf>,
    /// Concept names (one per line) and their LTEN text embeddings.
    pub concept_names: Option<PathBuf>,
    pub concept_embeddings: Option<PathBuf>,
    /// Alignment MLP checkpoint.
    pub alignment: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Concepts retrieved per image.
    pub top_k: usize,
    pub sampling: PretrainSampling,
    pub kd: KdConfig,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Log a line every this many steps (the last step is always logged).
    pub log_every: usize,
    pub decode: BeamConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Full-size student with lr 5e-5, batch 32 and 1M steps.
    pub fn full() -> Self {
        Self {
            model: ModelConfig::full_student(),
            top_k: TOP_K_CONCEPTS,
            sampling: PretrainSampling::default(),
            kd: KdConfig::default(),
            optimizer: AdamWConfig::default(),
            batch_size: 32,
            steps: 1_000_000,
            seed: 0,
            log_every: 100,
            decode: BeamConfig {
                beam_size: BEAM_SIZE,
                max_len: MAX_CAPTION_LEN,
                length_penalty: None,
            },
            paths: Paths::default(),
        }
    }

    /// Hidden 32, 2 layers, 200-token vocabulary; trains on one core in
    /// seconds, so the learning rate is raised.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(200),
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            batch_size: 8,
            steps: 500,
            log_every: 10,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let s = &self.sampling;
        if !(0.0..1.0).contains(&s.mask_rate) || !(0.0..=1.0).contains(&s.pollution_rate) {
            return Err(Error::Config("sampling rates must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.top_k == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch_size, top_k and log_every must be positive".into(),
            ));
        }
        if !(self.kd.tau > 0.0) {
            return Err(Error::Config("kd.tau must be positive".into()));
        }
        if self.decode.beam_size == 0 {
            return Err(Error::Config("decode.beam_size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("optimizer.lr must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_defaults() {
        let c = RunConfig::full();
        assert_eq!(c.sampling.mask_rate, 0.15);
        assert_eq!(c.sampling.pollution_rate, 0.5);
        assert_eq!(c.kd.tau, 1.0);
        assert_eq!(c.top_k, 20);
        assert_eq!(c.model.branches, 3);
        assert_eq!((c.decode.beam_size, c.decode.max_len), (5, 20));
        assert_eq!((c.optimizer.beta1, c.optimizer.beta2), (0.9, 0.999));
        assert_eq!(c.optimizer.weight_decay, 1e-2);
        assert_eq!(c.optimizer.lr, 5e-5);
        let d = RunConfig::desk();
        assert_eq!(
            (d.model.hidden, d.model.layers, d.model.vocab_size),
            (32, 2, 200)
        );
        assert_eq!(d.sampling, c.sampling);
    }

    #[test]
    fn partial_file_fills_defaults_and_rejects_unknown_keys() {
        let c = RunConfig::from_json(r#"{"seed": 7, "steps": 2}"#).unwrap();
        assert_eq!((c.seed, c.steps), (7, 2));
        assert_eq!(c.model, RunConfig::desk().model);
        assert!(RunConfig::from_json(r#"{"sede": 7}"#).is_err());
        assert!(RunConfig::from_json(r#"{"batch_size": 0}"#).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(seed in any::<u64>(), steps in 0usize..10_000, lr in 1e-6f64..1.0, mask in 0.0f64..0.99, two in any::<bool>()) {
            let mut c = RunConfig::desk();
            c.seed = seed;
            c.steps = steps;
            c.optimizer.lr = lr;
            c.sampling.mask_rate = mask;
            c.kd.two_phase = two;
            c.paths.train = Some("train.jsonl".into());
            let back = RunConfig::from_json(&c.to_json()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}

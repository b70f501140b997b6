//! Synthetic grid-feature / caption corpora.
//!
//! Each item draws a latent scene (size, color, object, action, relation,
//! place). Every latent value owns a random prototype vector; the grid cells
//! hold noisy mixtures of the scene's prototypes, so the caption is
//! recoverable from the features. The object and place words are the
//! item's concepts.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{save_records, Record};
use crate::error::{Error, Result};
use crate::objectives::Sample;
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;
use crate::vision::GridFeature;

const SIZES: &[&str] = &["small", "large", "tiny", "big", "young", "old"];
const COLORS: &[&str] = &[
    "red", "blue", "green", "black", "white", "brown", "yellow", "gray", "orange", "pink",
];
const OBJECTS: &[&str] = &[
    "dog", "cat", "man", "woman", "boy", "girl", "horse", "bird", "car", "bus", "train", "truck",
    "bike", "boat", "plane", "cow", "sheep", "bear", "zebra", "giraffe", "elephant", "child",
    "player", "person",
];
const ACTIONS: &[&str] = &[
    "sits", "stands", "runs", "walks", "rests", "waits", "jumps", "plays", "sleeps", "moves",
    "stops", "turns",
];
const RELATIONS: &[&str] = &["on", "near", "in", "by", "under", "behind"];
const PLACES: &[&str] = &[
    "street", "field", "beach", "road", "park", "grass", "water", "snow", "table", "bench",
    "track", "hill", "river", "lake", "city", "yard", "forest", "farm", "station", "bridge",
];
const FILLER: &[&str] = &["a", "the", "."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub items: usize,
    /// Grid is `side × side`.
    pub side: usize,
    pub channels: usize,
    /// Standard deviation of the per-cell noise relative to unit prototypes.
    pub noise: f64,
    /// Probability of replacing each caption slot's word by a random
    /// alternative of the same kind (label noise).
    pub word_noise: f64,
    /// Pad the vocabulary with unused tokens up to this size.
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            items: 8,
            side: 2,
            channels: 64,
            noise: 0.1,
            word_noise: 0.0,
            vocab_size: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthItem {
    pub caption: String,
    pub concepts: Vec<String>,
    pub grid: GridFeature,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub vocab: Vocab,
    pub items: Vec<SynthItem>,
}

/// The caption vocabulary: specials, every word of the grammar, then
/// `[unusedN]` fillers up to `size`.
pub fn vocabulary(size: usize) -> Result<Vocab> {
    let mut words: Vec<String> = [SIZES, COLORS, OBJECTS, ACTIONS, RELATIONS, PLACES, FILLER]
        .concat()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let base = words.len() + 5;
    if size < base {
        return Err(Error::Config(format!(
            "synthetic vocabulary needs at least {base} tokens"
        )));
    }
    words.extend((0..size - base).map(|i| format!("[unused{i}]")));
    Vocab::with_words(&words)
}

/// Index into the grammar's slot lists, one per slot.
type Scene = [usize; 6];

const SLOTS: [&[&str]; 6] = [SIZES, COLORS, OBJECTS, ACTIONS, RELATIONS, PLACES];

fn caption(scene: &Scene) -> String {
    let w = |k: usize| SLOTS[k][scene[k]];
    format!(
        "a {} {} {} {} {} the {} .",
        w(0),
        w(1),
        w(2),
        w(3),
        w(4),
        w(5)
    )
}

impl SynthCorpus {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        if cfg.items == 0 || cfg.side == 0 || cfg.channels == 0 {
            return Err(Error::Config(
                "synthetic corpus needs items, side and channels".into(),
            ));
        }
        let vocab = vocabulary(cfg.vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let cells = cfg.side * cfg.side;
        // One prototype per (slot, value), spread over the cells by a fixed
        // per-slot cell weighting so spatial layout matters.
        let protos: Vec<Vec<Tensor>> = SLOTS
            .iter()
            .map(|list| {
                list.iter()
                    .map(|_| Tensor::randn([cfg.channels], 1.0, &mut rng))
                    .collect()
            })
            .collect();
        let cell_weights: Vec<Vec<f64>> = (0..SLOTS.len())
            .map(|_| (0..cells).map(|_| rng.random_range(0.5..1.5)).collect())
            .collect();
        let noise =
            Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Parameter(e.to_string()))?;

        let mut seen = std::collections::HashSet::new();
        let mut items = Vec::with_capacity(cfg.items);
        while items.len() < cfg.items {
            let scene: Scene = std::array::from_fn(|k| rng.random_range(0..SLOTS[k].len()));
            if !seen.insert(scene) {
                continue;
            }
            let mut data = vec![0.0; cells * cfg.channels];
            for (cell, chunk) in data.chunks_mut(cfg.channels).enumerate() {
                for (k, &v) in scene.iter().enumerate() {
                    let w = cell_weights[k][cell];
                    for (x, p) in chunk.iter_mut().zip(protos[k][v].data()) {
                        *x += w * p;
                    }
                }
                for x in chunk.iter_mut() {
                    *x += noise.sample(&mut rng);
                }
            }
            let mut shown = scene;
            for (k, s) in shown.iter_mut().enumerate() {
                if rng.random::<f64>() < cfg.word_noise {
                    *s = rng.random_range(0..SLOTS[k].len());
                }
            }
            items.push(SynthItem {
                caption: caption(&shown),
                concepts: vec![OBJECTS[scene[2]].to_string(), PLACES[scene[5]].to_string()],
                grid: GridFeature::new(Tensor::new([cfg.side, cfg.side, cfg.channels], data)?)?,
            });
        }
        Ok(Self { vocab, items })
    }

    /// Training samples; ids are item indices.
    pub fn samples(&self) -> Vec<Sample> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, it)| Sample {
                id: i as u64,
                grid: it.grid.flatten(),
                concepts: it
                    .concepts
                    .iter()
                    .flat_map(|c| self.vocab.encode(c))
                    .collect(),
                words: self.vocab.encode(&it.caption),
            })
            .collect()
    }

    /// Splits into the first `n` items and the rest (same vocabulary).
    pub fn split(&self, n: usize) -> (SynthCorpus, SynthCorpus) {
        let n = n.min(self.items.len());
        (
            Self {
                vocab: self.vocab.clone(),
                items: self.items[..n].to_vec(),
            },
            Self {
                vocab: self.vocab.clone(),
                items: self.items[n..].to_vec(),
            },
        )
    }

    /// Writes `vocab.txt`, one LTEN grid per item under `features/`, and
    /// `{name}.jsonl`. Returns the dataset path.
    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let feat = dir.join("features");
        std::fs::create_dir_all(&feat).map_err(|e| Error::io(&feat, e))?;
        self.vocab.save(dir.join("vocab.txt"))?;
        let mut records = Vec::with_capacity(self.items.len());
        for (i, it) in self.items.iter().enumerate() {
            let rel = PathBuf::from("features").join(format!("{name}_{i:05}.lten"));
            it.grid.save(dir.join(&rel))?;
            records.push(Record {
                id: format!("{name}_{i}").into(),
                caption: it.caption.clone(),
                feature_file: rel,
                concepts: Some(it.concepts.clone()),
                regions: None,
            });
        }
        let path = dir.join(format!("{name}.jsonl"));
        save_records(&path, &records)?;
        Ok(path)
    }
}

/// Random pick used by examples to fabricate region boxes.
pub fn random_boxes(n: usize, rng: &mut impl Rng) -> Vec<[f64; 4]> {
    let starts = [0.0, 0.1, 0.25, 0.4, 0.5];
    (0..n)
        .map(|_| {
            let x = *starts.choose(rng).expect("non-empty");
            let y = *starts.choose(rng).expect("non-empty");
            [
                x,
                y,
                (x + rng.random_range(0.2..0.5f64)).min(1.0),
                (y + rng.random_range(0.2..0.5f64)).min(1.0),
            ]
        })
        .collect()
}

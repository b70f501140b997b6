//! JSON-lines datasets, prediction files and reference files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{id_string, EvalItem};
use crate::objectives::Sample;
use crate::tokenizer::Vocab;
use crate::vision::{GridFeature, Region};

/// One dataset line. `feature_file` is an LTEN grid `[H, W, C]`, relative to
/// the dataset file unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: serde_json::Value,
    pub caption: String,
    pub feature_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concepts: Option<Vec<String>>,
    /// Normalized `[x1, y1, x2, y2]` boxes for concept retrieval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<Vec<[f64; 4]>>,
}

impl Record {
    pub fn id_string(&self) -> String {
        id_string(&self.id)
    }

    pub fn regions(&self) -> Result<Vec<Region>> {
        self.regions
            .iter()
            .flatten()
            .map(|b| Region::new(b[0], b[1], b[2], b[3]))
            .collect()
    }
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Line {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Records with `feature_file` resolved against the dataset's directory.
pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_lines::<Record>(path)?
        .into_iter()
        .map(|(line, mut r)| {
            if r.caption.trim().is_empty() {
                return Err(Error::Line {
                    path: path.to_path_buf(),
                    line,
                    detail: "empty caption".into(),
                });
            }
            if let Err(e) = r.regions() {
                return Err(Error::Line {
                    path: path.to_path_buf(),
                    line,
                    detail: e.to_string(),
                });
            }
            if r.feature_file.is_relative() {
                r.feature_file = base.join(&r.feature_file);
            }
            Ok(r)
        })
        .collect()
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    write_lines(path, records)
}

/// Word-piece ids of every concept word, in order.
pub fn concept_ids(vocab: &Vocab, concepts: &[String]) -> Vec<u32> {
    concepts.iter().flat_map(|c| vocab.encode(c)).collect()
}

/// Loads features and tokenizes captions and concepts. Item ids are record
/// indices, which seed the per-item sampling streams.
pub fn to_samples(records: &[Record], vocab: &Vocab) -> Result<Vec<Sample>> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let grid = GridFeature::load(&r.feature_file)?.flatten();
            let words = vocab.encode(&r.caption);
            if words.is_empty() {
                return Err(Error::Config(format!(
                    "record {} has no caption tokens",
                    r.id_string()
                )));
            }
            Ok(Sample {
                id: i as u64,
                grid,
                concepts: concept_ids(vocab, r.concepts.as_deref().unwrap_or(&[])),
                words,
            })
        })
        .collect()
}

pub fn load_samples(path: &Path, vocab: &Vocab) -> Result<Vec<Sample>> {
    to_samples(&load_records(path)?, vocab)
}

/// Distinct concept sets in first-seen order: the pollution pool.
pub fn concept_pool(samples: &[Sample]) -> Vec<Vec<u32>> {
    let mut seen = std::collections::HashSet::new();
    samples
        .iter()
        .filter(|s| seen.insert(s.concepts.clone()))
        .map(|s| s.concepts.clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: serde_json::Value,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct References {
    pub id: serde_json::Value,
    pub references: Vec<String>,
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    Ok(read_lines(path)?.into_iter().map(|(_, p)| p).collect())
}

pub fn save_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    write_lines(path, preds)
}

pub fn load_references(path: &Path) -> Result<Vec<References>> {
    Ok(read_lines(path)?.into_iter().map(|(_, r)| r).collect())
}

pub fn save_references(path: &Path, refs: &[References]) -> Result<()> {
    write_lines(path, refs)
}

/// References grouped by id from a dataset (one caption per line).
pub fn references_from_records(records: &[Record]) -> Vec<References> {
    let mut by_id: BTreeMap<String, (serde_json::Value, Vec<String>)> = BTreeMap::new();
    for r in records {
        by_id
            .entry(r.id_string())
            .or_insert_with(|| (r.id.clone(), Vec::new()))
            .1
            .push(r.caption.clone());
    }
    by_id
        .into_values()
        .map(|(id, references)| References { id, references })
        .collect()
}

/// Pairs each prediction with its references. Every prediction needs
/// references and vice versa.
pub fn join_eval(preds: &[Prediction], refs: &[References]) -> Result<Vec<EvalItem>> {
    let mut by_id: BTreeMap<String, &References> = BTreeMap::new();
    for r in refs {
        if by_id.insert(id_string(&r.id), r).is_some() {
            return Err(Error::Usage(format!(
                "duplicate reference id {}",
                id_string(&r.id)
            )));
        }
    }
    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        let id = id_string(&p.id);
        let r = by_id
            .remove(&id)
            .ok_or_else(|| Error::Usage(format!("no references for prediction {id}")))?;
        let refs: Vec<&str> = r.references.iter().map(String::as_str).collect();
        out.push(EvalItem::from_text(id, &p.caption, &refs));
    }
    if let Some(id) = by_id.keys().next() {
        return Err(Error::Usage(format!("no prediction for reference {id}")));
    }
    Ok(out)
}

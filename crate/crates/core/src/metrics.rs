//! Corpus BLEU@4 and CIDEr-D.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type Ngram = Vec<String>;
type Counts = BTreeMap<Ngram, usize>;

pub const MAX_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

/// Lowercase, punctuation to spaces, split on whitespace.
pub fn tokenize(s: &str) -> Vec<String> {
    s.chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalItem {
    pub fn from_text(id: impl Into<String>, candidate: &str, references: &[&str]) -> Self {
        Self {
            id: id.into(),
            candidate: tokenize(candidate),
            references: references.iter().map(|r| tokenize(r)).collect(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalLine {
    id: serde_json::Value,
    candidate: String,
    references: Vec<String>,
}

pub(crate) fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Reads `{"id", "candidate", "references"}` JSON lines.
pub fn load_eval_file(path: &Path) -> Result<Vec<EvalItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: EvalLine = serde_json::from_str(line).map_err(|e| Error::Line {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        let refs: Vec<&str> = l.references.iter().map(String::as_str).collect();
        out.push(EvalItem::from_text(id_string(&l.id), &l.candidate, &refs));
    }
    Ok(out)
}

fn check(corpus: &[EvalItem]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Usage("empty evaluation corpus".into()));
    }
    if let Some(it) = corpus.iter().find(|it| it.references.is_empty()) {
        return Err(Error::Usage(format!("image {} has no reference", it.id)));
    }
    Ok(())
}

fn ngrams(words: &[String], n: usize) -> Counts {
    let mut c = Counts::new();
    for w in words.windows(n) {
        *c.entry(w.to_vec()).or_default() += 1;
    }
    c
}

/// Clipped n-gram matches and total candidate n-grams for one image.
pub fn modified_precision(
    candidate: &[String],
    references: &[Vec<String>],
    n: usize,
) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let mut max_ref = Counts::new();
    for r in references {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_default();
            *e = (*e).max(c);
        }
    }
    let clipped = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, cand.values().sum())
}

/// Reference length closest to `c`, ties to the shorter one.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus-level BLEU@4 with uniform weights, no smoothing.
pub fn bleu4(corpus: &[EvalItem]) -> Result<f64> {
    check(corpus)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut c, mut r) = (0usize, 0usize);
    for it in corpus {
        for n in 1..=MAX_N {
            let (m, t) = modified_precision(&it.candidate, &it.references, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        c += it.candidate.len();
        r += closest_ref_len(it.candidate.len(), &it.references);
    }
    if c == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_N)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Document frequencies of n-grams over reference sets (one document per
/// image) and the document count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    pub documents: usize,
    pub df: BTreeMap<String, f64>,
}

fn key(g: &[String]) -> String {
    g.join(" ")
}

impl IdfTable {
    pub fn from_references(corpus: &[EvalItem]) -> Self {
        let mut df: BTreeMap<String, f64> = BTreeMap::new();
        for it in corpus {
            let mut seen = std::collections::BTreeSet::new();
            for r in &it.references {
                for n in 1..=MAX_N {
                    for g in ngrams(r, n).into_keys() {
                        seen.insert(key(&g));
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_default() += 1.0;
            }
        }
        Self {
            documents: corpus.len(),
            df,
        }
    }
}

struct TfIdf {
    vecs: Vec<BTreeMap<String, f64>>,
    norms: Vec<f64>,
    length: f64,
}

fn tfidf(words: &[String], idf: &IdfTable) -> TfIdf {
    let ref_len = (idf.documents as f64).ln();
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let mut v = BTreeMap::new();
        let mut norm = 0.0;
        for (g, tf) in ngrams(words, n) {
            let k = key(&g);
            let df = idf.df.get(&k).copied().unwrap_or(0.0);
            let w = tf as f64 * (ref_len - df.max(1.0).ln());
            norm += w * w;
            v.insert(k, w);
        }
        vecs.push(v);
        norms.push(norm.sqrt());
    }
    TfIdf {
        vecs,
        norms,
        length: words.len().saturating_sub(1) as f64,
    }
}

fn sim(h: &TfIdf, r: &TfIdf) -> [f64; MAX_N] {
    let delta = h.length - r.length;
    let mut out = [0.0; MAX_N];
    for n in 0..MAX_N {
        let mut val: f64 = h.vecs[n]
            .iter()
            .map(|(g, &x)| {
                let y = r.vecs[n].get(g).copied().unwrap_or(0.0);
                x.min(y) * y
            })
            .sum();
        if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
            val /= h.norms[n] * r.norms[n];
        }
        out[n] = val * (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    }
    out
}

/// Per-image CIDEr-D (×10) against a given IDF table.
pub fn cider_scores(corpus: &[EvalItem], idf: &IdfTable) -> Result<Vec<f64>> {
    check(corpus)?;
    if idf.documents == 0 {
        return Err(Error::Usage("IDF table has no documents".into()));
    }
    Ok(corpus
        .iter()
        .map(|it| {
            let h = tfidf(&it.candidate, idf);
            let mut acc = [0.0; MAX_N];
            for r in &it.references {
                let s = sim(&h, &tfidf(r, idf));
                acc.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            }
            let mean = acc.iter().sum::<f64>() / MAX_N as f64;
            mean / it.references.len() as f64 * 10.0
        })
        .collect())
}

/// Corpus CIDEr-D with document frequencies from the corpus references.
pub fn cider(corpus: &[EvalItem]) -> Result<f64> {
    check(corpus)?;
    if corpus.len() < 2 {
        return Err(Error::Usage(
            "CIDEr needs at least two images or an external IDF table".into(),
        ));
    }
    cider_with_idf(corpus, &IdfTable::from_references(corpus))
}

pub fn cider_with_idf(corpus: &[EvalItem], idf: &IdfTable) -> Result<f64> {
    let s = cider_scores(corpus, idf)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu4: f64,
    pub cider: f64,
}

pub fn evaluate(corpus: &[EvalItem]) -> Result<Scores> {
    Ok(Scores {
        bleu4: bleu4(corpus)?,
        cider: cider(corpus)?,
    })
}

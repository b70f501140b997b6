//! Visual concept retrieval: pooled region vectors are mapped into the text
//! embedding space by a two-layer MLP and labelled with their nearest
//! vocabulary concept.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lten;
use crate::tensor::loss::nll;
use crate::tensor::{kernels, AdamW, AdamWConfig, Binder, Graph, ParamId, ParamStore, Tensor, Var};
use crate::vision::{pool_region_vector, GridFeature, Region};

pub const REGION_DIM: usize = 2048;
pub const TEXT_DIM: usize = 1024;
pub const INIT_TEMPERATURE: f64 = 0.07;
const UNIT_NORM_TOL: f64 = 1e-6;

/// Concept names with unit-norm text embeddings `[N, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptVocabulary {
    names: Vec<String>,
    embeddings: Tensor,
}

impl ConceptVocabulary {
    pub fn new(names: Vec<String>, embeddings: Tensor) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("concept vocabulary is empty".into()));
        }
        if embeddings.rank() != 2 || embeddings.rows() != names.len() {
            return Err(Error::dim(
                "concept vocabulary",
                embeddings.shape(),
                &[names.len(), TEXT_DIM],
            ));
        }
        for (i, name) in names.iter().enumerate() {
            let row = embeddings.row(i);
            let n = kernels::dot(row, row).sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Numeric {
                    op: "concept vocabulary",
                    detail: format!("embedding {i} ({name}) has norm {n}"),
                });
            }
        }
        Ok(Self { names, embeddings })
    }

    /// Normalizes rows before validation; convenient for synthetic data.
    pub fn from_raw(names: Vec<String>, mut embeddings: Tensor) -> Result<Self> {
        let c = embeddings.cols();
        for row in embeddings.data_mut().chunks_mut(c.max(1)) {
            let n = kernels::dot(row, row).sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Self::new(names, embeddings)
    }

    /// Names file (one per line) plus an LTEN `[N, D]` embedding file.
    pub fn load(names_path: impl AsRef<Path>, embeddings_path: impl AsRef<Path>) -> Result<Self> {
        let p = names_path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let names = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::new(names, lten::read_file(embeddings_path)?)
    }

    pub fn save(
        &self,
        names_path: impl AsRef<Path>,
        embeddings_path: impl AsRef<Path>,
    ) -> Result<()> {
        let p = names_path.as_ref();
        let mut text = self.names.join("\n");
        text.push('\n');
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
        lten::write_file(embeddings_path, &self.embeddings, lten::DType::F64)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }
}

/// Two linear blocks with a ReLU between, output L2-normalized.
#[derive(Clone, Debug)]
pub struct AlignmentMLP {
    params: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    temperature: ParamId,
}

impl AlignmentMLP {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        p.insert(
            "align.w1",
            Tensor::randn([in_dim, hidden], (1.0 / in_dim as f64).sqrt(), &mut rng),
        )?;
        p.insert("align.b1", Tensor::zeros([hidden]))?;
        p.insert(
            "align.w2",
            Tensor::randn([hidden, out_dim], (1.0 / hidden as f64).sqrt(), &mut rng),
        )?;
        p.insert("align.b2", Tensor::zeros([out_dim]))?;
        p.insert("align.temperature", Tensor::scalar(INIT_TEMPERATURE))?;
        Self::from_params(p)
    }

    /// 2048 → 1024 → 1024.
    pub fn full(seed: u64) -> Result<Self> {
        Self::new(REGION_DIM, TEXT_DIM, TEXT_DIM, seed)
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let id = |n: &str| {
            params
                .id(n)
                .ok_or_else(|| Error::Config(format!("missing {n}")))
        };
        let (w1, b1, w2, b2, temperature) = (
            id("align.w1")?,
            id("align.b1")?,
            id("align.w2")?,
            id("align.b2")?,
            id("align.temperature")?,
        );
        let (s1, s2) = (params.get(w1).shape(), params.get(w2).shape());
        if s1.len() != 2
            || s2.len() != 2
            || s1[1] != s2[0]
            || params.get(b1).shape() != [s1[1]]
            || params.get(b2).shape() != [s2[1]]
        {
            return Err(Error::dim("alignment mlp", s1, s2));
        }
        Ok(Self {
            params,
            w1,
            b1,
            w2,
            b2,
            temperature,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn in_dim(&self) -> usize {
        self.params.get(self.w1).shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.params.get(self.w2).shape()[1]
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(self.temperature).data()[0]
    }

    /// Embeds one pooled region vector.
    pub fn embed_region(&self, roi_vec: &Tensor) -> Result<Tensor> {
        if roi_vec.len() != self.in_dim() {
            return Err(Error::dim(
                "embed_region",
                roi_vec.shape(),
                &[self.in_dim()],
            ));
        }
        let x = roi_vec.reshape([1, self.in_dim()])?;
        let mut h = x.matmul(self.params.get(self.w1))?;
        for (v, b) in h.data_mut().iter_mut().zip(self.params.get(self.b1).data()) {
            *v = (*v + b).max(0.0);
        }
        let mut o = h.matmul(self.params.get(self.w2))?;
        for (v, b) in o.data_mut().iter_mut().zip(self.params.get(self.b2).data()) {
            *v += b;
        }
        let n = kernels::dot(o.data(), o.data()).sqrt();
        if n > 0.0 {
            o.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        o.reshape([self.out_dim()])
    }

    /// Differentiable batch embedding of `[B, in]` rows.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            b.var(g, self.w1),
            b.var(g, self.b1),
            b.var(g, self.w2),
            b.var(g, self.b2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        let o = g.add_row(o, b2)?;
        Ok(g.l2_normalize_rows(o))
    }

    pub fn temperature_var(&self, g: &mut Graph, b: &mut Binder) -> Var {
        b.var(g, self.temperature)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Label<'a> {
    pub index: usize,
    pub name: &'a str,
    pub score: f64,
}

/// Highest dot product against the vocabulary; ties go to the lowest index.
pub fn assign_label<'a>(region_emb: &Tensor, vocab: &'a ConceptVocabulary) -> Result<Label<'a>> {
    if vocab.is_empty() {
        return Err(Error::Config("concept vocabulary is empty".into()));
    }
    if region_emb.len() != vocab.dim() {
        return Err(Error::dim(
            "assign_label",
            region_emb.shape(),
            &[vocab.dim()],
        ));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..vocab.len() {
        let s = kernels::dot(region_emb.data(), vocab.embeddings.row(i));
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(Label {
        index: best.0,
        name: &vocab.names[best.0],
        score: best.1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub name: String,
    pub score: f64,
}

/// Retrieved concepts for one image, best first, names unique.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub entries: Vec<ConceptEntry>,
}

impl ConceptSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }
}

/// Pools, embeds and labels every region, keeps each concept's best score,
/// sorts by score (ties by vocabulary index) and keeps the top `k`.
pub fn retrieve_concepts(
    grid: &GridFeature,
    regions: &[Region],
    mlp: &AlignmentMLP,
    vocab: &ConceptVocabulary,
    k: usize,
) -> Result<ConceptSet> {
    if k == 0 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    let mut best: Vec<Option<f64>> = vec![None; vocab.len()];
    for r in regions {
        let emb = mlp.embed_region(&pool_region_vector(grid, r)?)?;
        let label = assign_label(&emb, vocab)?;
        let slot = &mut best[label.index];
        if slot.is_none_or(|s| label.score > s) {
            *slot = Some(label.score);
        }
    }
    let mut hits: Vec<(usize, f64)> = best
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (i, s)))
        .collect();
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    hits.truncate(k);
    Ok(ConceptSet {
        entries: hits
            .into_iter()
            .map(|(i, score)| ConceptEntry {
                name: vocab.names[i].clone(),
                score,
            })
            .collect(),
    })
}

/// Symmetric InfoNCE over a batch of matched rows.
pub fn contrastive_loss(
    g: &mut Graph,
    region_embs: Var,
    text_embs: Var,
    temperature: Var,
) -> Result<Var> {
    let (rs, ts) = (g.shape(region_embs).to_vec(), g.shape(text_embs).to_vec());
    if rs != ts || rs.len() != 2 {
        return Err(Error::dim("contrastive_loss", &rs, &ts));
    }
    let b = rs[0];
    if b < 2 {
        return Err(Error::Usage(format!(
            "contrastive loss needs at least 2 pairs, got {b}"
        )));
    }
    let sim = g.matmul_nt(region_embs, text_embs)?;
    let logits = g.div_scalar(sim, temperature)?;
    let diag: Vec<usize> = (0..b).collect();
    let rows = nll(g, logits, &diag)?;
    let lt = g.transpose(logits)?;
    let cols = nll(g, lt, &diag)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, 0.5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 1e-5,
            weight_decay: 0.0,
        }
    }
}

/// Full-batch training of the MLP and temperature on `(roi_vec, text_emb)`
/// pairs. Returns the loss measured before each epoch's update.
pub fn train_alignment(
    mlp: &mut AlignmentMLP,
    pairs: &[(Tensor, Tensor)],
    cfg: &AlignTrainConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Usage(
            "alignment training needs at least one pair".into(),
        ));
    }
    let (din, dout) = (mlp.in_dim(), mlp.out_dim());
    let mut xs = Vec::with_capacity(pairs.len() * din);
    let mut ts = Vec::with_capacity(pairs.len() * dout);
    for (x, t) in pairs {
        if x.len() != din || t.len() != dout {
            return Err(Error::dim("alignment pair", x.shape(), t.shape()));
        }
        xs.extend_from_slice(x.data());
        ts.extend_from_slice(t.data());
    }
    let x = Tensor::new([pairs.len(), din], xs)?;
    let t = Tensor::new([pairs.len(), dout], ts)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let mut b = Binder::new(&mlp.params);
        let xv = g.constant(x.clone());
        let tv = g.constant(t.clone());
        let e = mlp.forward(&mut g, &mut b, xv)?;
        let temp = mlp.temperature_var(&mut g, &mut b);
        let loss = contrastive_loss(&mut g, e, tv, temp)?;
        losses.push(g.value(loss).item()?);
        let mut grads = g.backward(loss)?;
        let grads = b.collect(&mut grads);
        opt.step(&mut mlp.params, &grads)?;
    }
    Ok(losses)
}

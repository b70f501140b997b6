//! The fusion transformer: input assembly, seq2seq attention masks and a
//! post-norm BERT-style encoder that exposes per-layer scores and hiddens.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{CaptionModel, LayerIds};
use crate::modulator::gate_graph;
use crate::tensor::{kernels, Binder, Graph, ParamId, Tensor, Var};
use crate::tokenizer::{Segment, Specials, TokenSequence};
use crate::vision::GridFeature;

/// `allowed[i * n + j]`: row `i` may attend to row `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    n: usize,
    allowed: Arc<[bool]>,
}

impl AttentionMask {
    pub fn new(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(Error::dim("attention mask", &[n, n], &[allowed.len()]));
        }
        if (0..n).any(|i| !allowed[i * n + i]) {
            return Err(Error::Config(
                "attention mask must allow self-attention".into(),
            ));
        }
        Ok(Self {
            n,
            allowed: allowed.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn shared(&self) -> Arc<[bool]> {
        self.allowed.clone()
    }
}

/// Context rows (visual, concept) see each other and nothing else; caption
/// row `t` sees the whole context and caption rows up to `t`.
pub fn build_seq2seq_mask(n_visual: usize, n_concept: usize, n_caption: usize) -> AttentionMask {
    let ctx = n_visual + n_concept;
    let n = ctx + n_caption;
    let allowed = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i < ctx {
                j < ctx
            } else {
                j < ctx || j <= i
            }
        })
        .collect();
    AttentionMask::new(n, allowed).expect("diagonal always allowed")
}

/// Rows: context, `[CLS] x1 .. xT`, then prediction slots `M1 .. M(T+1)`.
/// Caption rows follow the seq2seq rule. Slot `Mt` sees the context,
/// `[CLS] .. x(t-1)` and itself, which is exactly what an appended `[MASK]`
/// sees during generation.
pub fn build_teacher_forcing_mask(n_context: usize, n_words: usize) -> AttentionMask {
    let cap = n_words + 1;
    let slots_start = n_context + cap;
    let n = slots_start + cap;
    let allowed = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i < n_context {
                j < n_context
            } else if i < slots_start {
                j <= i
            } else {
                let t = i - slots_start + 1;
                j < n_context + t || j == i
            }
        })
        .collect();
    AttentionMask::new(n, allowed).expect("diagonal always allowed")
}

/// Row layout of one fusion input: `n_visual` visual rows followed by token
/// rows (concepts, then caption).
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub n_visual: usize,
    pub n_concept: usize,
    pub tokens: TokenSequence,
    pub mask: AttentionMask,
}

/// Prediction slots of a teacher-forcing layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Slots {
    pub rows: Vec<usize>,
    pub targets: Vec<u32>,
}

impl Layout {
    fn context(n_visual: usize, concepts: &[u32]) -> TokenSequence {
        let mut seq = TokenSequence::default();
        for (i, &c) in concepts.iter().enumerate() {
            seq.push(c, Segment::Concept, n_visual + i);
        }
        seq
    }

    /// Seq2seq layout with the caption tokens given verbatim (typically
    /// `[CLS] .. [SEP]`, possibly with `[MASK]` substitutions).
    pub fn seq2seq(n_visual: usize, concepts: &[u32], caption: &[u32]) -> Self {
        let mut tokens = Self::context(n_visual, concepts);
        let start = n_visual + concepts.len();
        for (i, &c) in caption.iter().enumerate() {
            tokens.push(c, Segment::Caption, start + i);
        }
        Self {
            n_visual,
            n_concept: concepts.len(),
            tokens,
            mask: build_seq2seq_mask(n_visual, concepts.len(), caption.len()),
        }
    }

    /// Teacher-forcing layout predicting every word of `words` and the final
    /// `[SEP]`. Slot `t` reuses the position of `x_t`.
    pub fn teacher_forcing(
        n_visual: usize,
        concepts: &[u32],
        words: &[u32],
        sp: Specials,
    ) -> (Self, Slots) {
        let mut tokens = Self::context(n_visual, concepts);
        let ctx = n_visual + concepts.len();
        tokens.push(sp.cls, Segment::Caption, ctx);
        for (i, &w) in words.iter().enumerate() {
            tokens.push(w, Segment::Caption, ctx + 1 + i);
        }
        let slots_start = ctx + words.len() + 1;
        let mut slots = Slots {
            rows: Vec::with_capacity(words.len() + 1),
            targets: Vec::with_capacity(words.len() + 1),
        };
        for t in 1..=words.len() + 1 {
            tokens.push(sp.mask, Segment::Caption, ctx + t);
            slots.rows.push(slots_start + t - 1);
            slots.targets.push(if t <= words.len() {
                words[t - 1]
            } else {
                sp.sep
            });
        }
        let layout = Self {
            n_visual,
            n_concept: concepts.len(),
            tokens,
            mask: build_teacher_forcing_mask(ctx, words.len()),
        };
        (layout, slots)
    }

    pub fn len(&self) -> usize {
        self.n_visual + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn context_len(&self) -> usize {
        self.n_visual + self.n_concept
    }

    /// Row of the `[CLS]` token (first caption row).
    pub fn cls_row(&self) -> usize {
        self.context_len()
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.n_visual)
            .chain(self.tokens.positions.iter().copied())
            .collect()
    }

    pub fn segments(&self) -> Vec<usize> {
        std::iter::repeat_n(Segment::Visual as usize, self.n_visual)
            .chain(self.tokens.segments.iter().map(|&s| s as usize))
            .collect()
    }
}

/// Graph handles for the per-layer attention scores `[h, T, T]` and hidden
/// states `[T, d]`.
#[derive(Clone, Debug)]
pub struct Trace {
    pub scores: Vec<Var>,
    pub hiddens: Vec<Var>,
}

impl Trace {
    pub fn output(&self) -> Var {
        *self.hiddens.last().expect("at least one layer")
    }

    pub fn values(&self, g: &Graph) -> ForwardTrace {
        ForwardTrace {
            scores: self.scores.iter().map(|&v| g.value(v).clone()).collect(),
            hiddens: self.hiddens.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

/// Plain-tensor copy of a [`Trace`]. Masked score entries are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub scores: Vec<Tensor>,
    pub hiddens: Vec<Tensor>,
}

/// Modulates `grid` (`[n_visual, C]`) by the concept gate and projects it to
/// the hidden size. No concepts means no modulation.
pub fn visual_tokens(
    model: &CaptionModel,
    g: &mut Graph,
    b: &mut Binder,
    grid: &Tensor,
    concepts: &[u32],
) -> Result<Var> {
    let c = model.config.grid_channels;
    if grid.rank() != 2 || grid.cols() != c {
        return Err(Error::dim("visual tokens", grid.shape(), &[grid.rows(), c]));
    }
    let mut x = g.constant(grid.clone());
    if !concepts.is_empty() {
        let gate = gate_graph(model, g, b, concepts)?;
        x = g.mul_row(x, gate)?;
    }
    let (w, bias) = (b.var(g, model.ids.visual_w), b.var(g, model.ids.visual_b));
    let h = g.matmul(x, w)?;
    g.add_row(h, bias)
}

/// Flatten `H × W × C` row-major and apply the visual projection.
pub fn project_visual(model: &CaptionModel, grid: &GridFeature) -> Result<Tensor> {
    let c = model.config.grid_channels;
    if grid.channels() != c {
        return Err(Error::dim(
            "project_visual",
            grid.values().shape(),
            &[7, 7, c],
        ));
    }
    let mut out = grid
        .flatten()
        .matmul(model.params.get(model.ids.visual_w))?;
    let bias = model.params.get(model.ids.visual_b).data();
    let d = bias.len();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += bias[i % d];
    }
    Ok(out)
}

fn linear(g: &mut Graph, b: &mut Binder, x: Var, w: ParamId, bias: ParamId) -> Result<Var> {
    let (wv, bv) = (b.var(g, w), b.var(g, bias));
    let h = g.matmul(x, wv)?;
    g.add_row(h, bv)
}

fn layer(
    model: &CaptionModel,
    g: &mut Graph,
    b: &mut Binder,
    x: Var,
    ids: &LayerIds,
    mask: &AttentionMask,
) -> Result<(Var, Var)> {
    let cfg = &model.config;
    let q = linear(g, b, x, ids.q_w, ids.q_b)?;
    let k = linear(g, b, x, ids.k_w, ids.k_b)?;
    let v = linear(g, b, x, ids.v_w, ids.v_b)?;
    let scores = g.attn_scores(q, k, cfg.heads, mask.shared())?;
    let p = g.masked_softmax(scores, mask.as_slice())?;
    let ctx = g.attn_context(p, v, cfg.heads)?;
    let o = linear(g, b, ctx, ids.o_w, ids.o_b)?;
    let r = g.add(x, o)?;
    let (lg, lb) = (b.var(g, ids.attn_ln_g), b.var(g, ids.attn_ln_b));
    let x1 = g.layer_norm(r, lg, lb, cfg.ln_eps)?;
    let f = linear(g, b, x1, ids.ffn_in_w, ids.ffn_in_b)?;
    let f = g.gelu(f);
    let f = linear(g, b, f, ids.ffn_out_w, ids.ffn_out_b)?;
    let r = g.add(x1, f)?;
    let (lg, lb) = (b.var(g, ids.ffn_ln_g), b.var(g, ids.ffn_ln_b));
    let x2 = g.layer_norm(r, lg, lb, cfg.ln_eps)?;
    Ok((scores, x2))
}

/// Embeds the rows (visual tokens or word embeddings, plus position and
/// segment embeddings, then layer norm) and runs every encoder layer.
pub fn forward(
    model: &CaptionModel,
    g: &mut Graph,
    b: &mut Binder,
    visual: Var,
    layout: &Layout,
) -> Result<Trace> {
    let cfg = &model.config;
    let vs = g.shape(visual).to_vec();
    if vs != [layout.n_visual, cfg.hidden] {
        return Err(Error::dim(
            "fusion visual input",
            &vs,
            &[layout.n_visual, cfg.hidden],
        ));
    }
    if layout.mask.len() != layout.len() {
        return Err(Error::dim(
            "fusion mask",
            &[layout.mask.len()],
            &[layout.len()],
        ));
    }
    let positions = layout.positions();
    if let Some(&p) = positions.iter().max() {
        if p >= cfg.max_positions {
            return Err(Error::dim(
                "fusion positions",
                &[p + 1],
                &[cfg.max_positions],
            ));
        }
    }
    let word = b.var(g, model.ids.word);
    let mut rows = visual;
    if !layout.tokens.is_empty() {
        let idx: Vec<usize> = layout.tokens.ids.iter().map(|&i| i as usize).collect();
        let tok = g.gather_rows(word, &idx)?;
        rows = g.concat_rows(&[visual, tok])?;
    }
    let pos_table = b.var(g, model.ids.position);
    let pos = g.gather_rows(pos_table, &positions)?;
    let seg_table = b.var(g, model.ids.segment);
    let seg = g.gather_rows(seg_table, &layout.segments())?;
    let x = g.add(rows, pos)?;
    let x = g.add(x, seg)?;
    let (lg, lb) = (b.var(g, model.ids.emb_ln_g), b.var(g, model.ids.emb_ln_b));
    let mut x = g.layer_norm(x, lg, lb, cfg.ln_eps)?;
    let mut trace = Trace {
        scores: Vec::with_capacity(cfg.layers),
        hiddens: Vec::with_capacity(cfg.layers),
    };
    for ids in &model.ids.layers {
        let (s, h) = layer(model, g, b, x, ids, &layout.mask)?;
        trace.scores.push(s);
        trace.hiddens.push(h);
        x = h;
    }
    Ok(trace)
}

/// Raw logit of the pollution classifier on a `[1, d]` `[CLS]` row.
pub fn pollution_logit(
    model: &CaptionModel,
    g: &mut Graph,
    b: &mut Binder,
    cls_hidden: Var,
) -> Result<Var> {
    linear(
        g,
        b,
        cls_hidden,
        model.ids.pollution_w,
        model.ids.pollution_b,
    )
}

/// Plain version of [`pollution_logit`].
pub fn pollution_logit_value(model: &CaptionModel, cls_hidden: &[f64]) -> Result<f64> {
    let w = model.params.get(model.ids.pollution_w);
    if cls_hidden.len() != w.rows() {
        return Err(Error::dim(
            "pollution_logit",
            &[cls_hidden.len()],
            w.shape(),
        ));
    }
    Ok(kernels::dot(cls_hidden, w.data()) + model.params.get(model.ids.pollution_b).data()[0])
}

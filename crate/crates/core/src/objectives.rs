//! Training objectives: caption masking, concept pollution, the caption NLL
//! and pollution BCE terms, and per-batch loss/gradient assembly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, Layout, Trace};
use crate::head::fused_log_probs;
use crate::model::CaptionModel;
use crate::tensor::{accumulate, loss, Binder, Graph, Tensor, Var};
use crate::tokenizer::Specials;

pub const MASK_RATE: f64 = 0.15;
pub const POLLUTION_RATE: f64 = 0.5;

/// Deterministic per-item stream: seeded by `seed ⊕ item`, one stream per step.
pub fn item_rng(seed: u64, item: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ item);
    r.set_stream(step);
    r
}

/// One training triple: flattened grid `[n_visual, C]`, concept ids and the
/// caption word ids (no `[CLS]`/`[SEP]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub grid: Tensor,
    pub concepts: Vec<u32>,
    pub words: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedCaption {
    pub ids: Vec<u32>,
    /// Indices into `ids` that were replaced by `[MASK]`, ascending.
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Masks each token independently with probability `rate`, replacing it by
/// `mask_id`. Forces one mask (uniform position) when none was drawn.
pub fn mask_caption(
    x: &[u32],
    rate: f64,
    mask_id: u32,
    rng: &mut impl Rng,
) -> Result<MaskedCaption> {
    mask_caption_with(x, rate, mask_id, true, rng)
}

pub fn mask_caption_with(
    x: &[u32],
    rate: f64,
    mask_id: u32,
    force_one: bool,
    rng: &mut impl Rng,
) -> Result<MaskedCaption> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "mask rate must be in [0, 1), got {rate}"
        )));
    }
    if x.is_empty() {
        return Err(Error::Usage("cannot mask an empty caption".into()));
    }
    let mut positions: Vec<usize> = (0..x.len())
        .filter(|_| rng.random::<f64>() < rate)
        .collect();
    if positions.is_empty() && force_one {
        positions.push(rng.random_range(0..x.len()));
    }
    let mut ids = x.to_vec();
    let targets = positions
        .iter()
        .map(|&p| std::mem::replace(&mut ids[p], mask_id))
        .collect();
    Ok(MaskedCaption {
        ids,
        positions,
        targets,
    })
}

/// With probability `p`, swaps `c` for a uniformly drawn pool entry that
/// differs from `c` and labels the triple 0; otherwise keeps `c` with label 1.
pub fn pollute_concepts(
    c: &[u32],
    pool: &[Vec<u32>],
    p: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<u32>, u8)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!(
            "pollution probability must be in [0, 1], got {p}"
        )));
    }
    if !pool.iter().any(|s| s.as_slice() != c) {
        return Err(Error::Usage(
            "pollution pool needs a concept set different from the item's".into(),
        ));
    }
    if rng.random::<f64>() >= p {
        return Ok((c.to_vec(), 1));
    }
    loop {
        let pick = &pool[rng.random_range(0..pool.len())];
        if pick.as_slice() != c {
            return Ok((pick.clone(), 0));
        }
    }
}

/// Model input with its prediction slots and, for pre-training, the
/// pollution label.
#[derive(Clone, Debug)]
pub struct Prepared<'a> {
    pub grid: &'a Tensor,
    /// Concepts that drive the channel gate (always the item's own).
    pub gate_concepts: &'a [u32],
    pub layout: Layout,
    pub slot_rows: Vec<usize>,
    pub targets: Vec<u32>,
    pub pollution: Option<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSampling {
    pub mask_rate: f64,
    pub pollution_rate: f64,
    pub force_one_mask: bool,
}

impl Default for PretrainSampling {
    fn default() -> Self {
        Self {
            mask_rate: MASK_RATE,
            pollution_rate: POLLUTION_RATE,
            force_one_mask: true,
        }
    }
}

/// Caption `[CLS] x [SEP]` with words and `[SEP]` eligible for masking,
/// polluted concept tokens, and slots at the masked rows.
pub fn prepare_pretrain<'a>(
    sample: &'a Sample,
    pool: &[Vec<u32>],
    sampling: &PretrainSampling,
    sp: Specials,
    rng: &mut impl Rng,
) -> Result<Prepared<'a>> {
    let mut body = sample.words.clone();
    body.push(sp.sep);
    let masked = mask_caption_with(
        &body,
        sampling.mask_rate,
        sp.mask,
        sampling.force_one_mask,
        rng,
    )?;
    let (c_star, y) = pollute_concepts(&sample.concepts, pool, sampling.pollution_rate, rng)?;
    let mut caption = vec![sp.cls];
    caption.extend_from_slice(&masked.ids);
    let layout = Layout::seq2seq(sample.grid.rows(), &c_star, &caption);
    let start = layout.cls_row() + 1;
    Ok(Prepared {
        grid: &sample.grid,
        gate_concepts: &sample.concepts,
        slot_rows: masked.positions.iter().map(|p| start + p).collect(),
        targets: masked.targets,
        layout,
        pollution: Some(y),
    })
}

/// Teacher-forcing layout: every word and the final `[SEP]` is a slot.
pub fn prepare_finetune(sample: &Sample, sp: Specials) -> Prepared<'_> {
    let (layout, slots) =
        Layout::teacher_forcing(sample.grid.rows(), &sample.concepts, &sample.words, sp);
    Prepared {
        grid: &sample.grid,
        gate_concepts: &sample.concepts,
        layout,
        slot_rows: slots.rows,
        targets: slots.targets,
        pollution: None,
    }
}

/// Graph handles produced by one item's forward pass.
#[derive(Clone, Debug)]
pub struct ItemForward {
    pub trace: Trace,
    /// Final hidden rows at the prediction slots, `[n_slots, d]`.
    pub slots: Option<Var>,
    /// Final `[CLS]` hidden row, `[1, d]`.
    pub cls: Var,
}

pub fn forward_item(
    model: &CaptionModel,
    g: &mut Graph,
    b: &mut Binder,
    item: &Prepared,
) -> Result<ItemForward> {
    let visual = fusion::visual_tokens(model, g, b, item.grid, item.gate_concepts)?;
    let trace = fusion::forward(model, g, b, visual, &item.layout)?;
    let out = trace.output();
    let slots = if item.slot_rows.is_empty() {
        None
    } else {
        Some(g.gather_rows(out, &item.slot_rows)?)
    };
    let cls = g.gather_rows(out, &[item.layout.cls_row()])?;
    Ok(ItemForward { trace, slots, cls })
}

/// Mean NLL of `targets` under fused log-probabilities.
pub fn caption_loss(g: &mut Graph, scores: Var, targets: &[u32]) -> Result<Var> {
    let t: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    loss::nll(g, scores, &t)
}

/// `−[y log σ(ℓ) + (1−y) log(1−σ(ℓ))]` for a `[1, 1]` logit.
pub fn concept_loss(g: &mut Graph, logit: Var, y: u8) -> Result<Var> {
    let target = Tensor::full(g.shape(logit).to_vec(), f64::from(y));
    loss::bce_with_logits(g, logit, &target)
}

/// Batch loss split into its terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub caption: f64,
    pub concept: f64,
    pub kd: f64,
    pub total: f64,
}

/// Per-item contributions, pre-scaled so that summing over the batch gives
/// the batch losses: caption NLL averaged over every slot in the batch,
/// concept BCE averaged over items.
pub struct ItemLoss {
    pub forward: ItemForward,
    pub caption: Option<Var>,
    pub concept: Option<Var>,
}

pub fn item_loss(
    model: &CaptionModel,
    g: &mut Graph,
    b: &mut Binder,
    item: &Prepared,
    total_slots: usize,
    n_items: usize,
) -> Result<ItemLoss> {
    let forward = forward_item(model, g, b, item)?;
    let branches: Vec<usize> = (0..model.config.branches).collect();
    let caption = match forward.slots {
        Some(rows) => {
            let scores = fused_log_probs(model, g, b, rows, &branches)?;
            let l = caption_loss(g, scores, &item.targets)?;
            Some(g.scale(l, item.targets.len() as f64 / total_slots as f64))
        }
        None => None,
    };
    let concept = match item.pollution {
        Some(y) => {
            let logit = fusion::pollution_logit(model, g, b, forward.cls)?;
            let l = concept_loss(g, logit, y)?;
            Some(g.scale(l, 1.0 / n_items as f64))
        }
        None => None,
    };
    Ok(ItemLoss {
        forward,
        caption,
        concept,
    })
}

pub(crate) fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &v in vars {
        acc = Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
    }
    Ok(acc)
}

/// Batch losses and (optionally) accumulated parameter gradients. Items are
/// evaluated in parallel; gradients are summed in item order, so the result
/// does not depend on the thread count.
pub fn batch_loss(
    model: &CaptionModel,
    items: &[Prepared],
    with_grads: bool,
) -> Result<(LossParts, Option<Vec<Option<Tensor>>>)> {
    if items.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let total_slots: usize = items.iter().map(|i| i.targets.len()).sum();
    let n = items.len();
    let results: Vec<Result<(LossParts, Option<Vec<Option<Tensor>>>)>> = items
        .par_iter()
        .map(|item| {
            let mut g = Graph::new();
            let mut b = if with_grads {
                Binder::new(&model.params)
            } else {
                Binder::frozen(&model.params)
            };
            let l = item_loss(model, &mut g, &mut b, item, total_slots, n)?;
            let mut parts = LossParts::default();
            let mut terms = Vec::new();
            if let Some(c) = l.caption {
                parts.caption = g.value(c).item()?;
                terms.push(c);
            }
            if let Some(c) = l.concept {
                parts.concept = g.value(c).item()?;
                terms.push(c);
            }
            let grads = match (with_grads, sum_vars(&mut g, &terms)?) {
                (true, Some(total)) => {
                    let mut gr = g.backward(total)?;
                    Some(b.collect(&mut gr))
                }
                _ => None,
            };
            Ok((parts, grads))
        })
        .collect();
    let mut parts = LossParts::default();
    let mut grads: Option<Vec<Option<Tensor>>> = with_grads.then(|| vec![None; model.params.len()]);
    for r in results {
        let (p, gr) = r?;
        parts.caption += p.caption;
        parts.concept += p.concept;
        if let (Some(acc), Some(gr)) = (grads.as_mut(), gr) {
            accumulate(acc, gr);
        }
    }
    parts.total = parts.caption + parts.concept;
    Ok((parts, grads))
}

/// `L_caption + L_concept` over a pre-training batch.
pub fn pretrain_loss(model: &CaptionModel, items: &[Prepared]) -> Result<LossParts> {
    Ok(batch_loss(model, items, false)?.0)
}

/// Caption NLL alone over a fine-tuning batch.
pub fn finetune_loss(model: &CaptionModel, items: &[Prepared]) -> Result<LossParts> {
    Ok(batch_loss(model, items, false)?.0)
}

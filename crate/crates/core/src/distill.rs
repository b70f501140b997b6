//! Knowledge distillation from frozen teachers: attention and hidden-state
//! matching through a layer map and a shared adapter, soft-target prediction
//! matching per ensemble branch, and the combined stage loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, ForwardTrace};
use crate::head::{branch_logits, fused_log_probs};
use crate::model::CaptionModel;
use crate::objectives::{forward_item, item_loss, sum_vars, LossParts, Prepared};
use crate::tensor::{accumulate, loss, Binder, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdWeights {
    /// Attention + hidden-state terms.
    pub kd1: f64,
    /// Prediction (ensemble) term.
    pub kd2: f64,
    pub task: f64,
}

impl Default for KdWeights {
    fn default() -> Self {
        Self {
            kd1: 1.0,
            kd2: 1.0,
            task: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdPlan {
    /// `layer_map[j - 1] = m(j)`: the 1-based teacher layer matched by
    /// student layer `j`.
    pub layer_map: Vec<usize>,
    pub tau: f64,
    pub stage: Stage,
    /// Teacher index for each head branch.
    pub assignment: Vec<usize>,
    pub weights: KdWeights,
    /// Trunk terms only for the first half of training, prediction terms only
    /// for the second half.
    pub two_phase: bool,
}

impl KdPlan {
    /// `m(j) = 3j`, τ = 1, branch `b` taught by teacher `b mod n_teachers`.
    pub fn standard(
        student_layers: usize,
        branches: usize,
        n_teachers: usize,
        stage: Stage,
    ) -> Self {
        Self {
            layer_map: (1..=student_layers).map(|j| 3 * j).collect(),
            tau: 1.0,
            stage,
            assignment: (0..branches).map(|b| b % n_teachers.max(1)).collect(),
            weights: KdWeights::default(),
            two_phase: false,
        }
    }

    pub fn validate(&self, student: &CaptionModel, teachers: &[CaptionModel]) -> Result<()> {
        let first = teachers
            .first()
            .ok_or_else(|| Error::Config("distillation needs at least one teacher".into()))?;
        if teachers.iter().any(|t| t.config != first.config) {
            return Err(Error::Config(
                "teachers must share one configuration".into(),
            ));
        }
        let (s, t) = (&student.config, &first.config);
        if self.layer_map.len() != s.layers {
            return Err(Error::Config(format!(
                "layer map has {} entries for {} student layers",
                self.layer_map.len(),
                s.layers
            )));
        }
        if self.layer_map.first() == Some(&0) || self.layer_map.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "layer map must be 1-based and strictly increasing".into(),
            ));
        }
        if self.layer_map.last().is_some_and(|&m| m > t.layers) {
            return Err(Error::Config(format!(
                "layer map exceeds {} teacher layers",
                t.layers
            )));
        }
        if s.heads != t.heads {
            return Err(Error::Config(format!(
                "student has {} heads, teacher {}",
                s.heads, t.heads
            )));
        }
        if s.vocab_size != t.vocab_size {
            return Err(Error::Config(
                "student and teacher vocabularies differ".into(),
            ));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if self.assignment.len() != s.branches {
            return Err(Error::Config(format!(
                "{} head branches but {} teacher assignments",
                s.branches,
                self.assignment.len()
            )));
        }
        if let Some(&bad) = self.assignment.iter().find(|&&a| a >= teachers.len()) {
            return Err(Error::Config(format!(
                "branch assigned to missing teacher {bad}"
            )));
        }
        Ok(())
    }

    /// Effective weights at `step` of `total` steps.
    pub fn weights_at(&self, step: u64, total: u64) -> KdWeights {
        let mut w = self.weights;
        if self.two_phase {
            if step < total / 2 {
                w.kd2 = 0.0;
            } else {
                w.kd1 = 0.0;
            }
        }
        w
    }
}

/// Shared `d_s × d_T` linear map (no bias) from student to teacher width.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub params: ParamStore,
    pub weight: ParamId,
}

impl Adapter {
    pub const NAME: &'static str = "adapter.weight";

    /// Identity when widths match, otherwise normal(0, std).
    pub fn new(d_student: usize, d_teacher: usize, std: f64, seed: u64) -> Result<Self> {
        let w = if d_student == d_teacher {
            Tensor::identity(d_student)
        } else {
            Tensor::randn(
                [d_student, d_teacher],
                std,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
        };
        Self::from_tensor(w)
    }

    pub fn from_tensor(w: Tensor) -> Result<Self> {
        if w.rank() != 2 {
            return Err(Error::dim("adapter", w.shape(), &[0, 0]));
        }
        let mut params = ParamStore::new();
        let weight = params.insert(Self::NAME, w)?;
        Ok(Self { params, weight })
    }

    pub fn tensor(&self) -> &Tensor {
        self.params.get(self.weight)
    }
}

/// `(1/|map|) Σ_j MSE(A_j^S, A_{m(j)}^T)`, each MSE averaged over heads and
/// score entries.
pub fn attention_kd(
    g: &mut Graph,
    student: &[Var],
    teacher: &[Tensor],
    layer_map: &[usize],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(layer_map.len());
    for (j, &m) in layer_map.iter().enumerate() {
        let s = *student
            .get(j)
            .ok_or_else(|| Error::Config(format!("student trace lacks layer {}", j + 1)))?;
        let t = teacher
            .get(m.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("teacher trace lacks layer {m}")))?;
        let ss = g.shape(s);
        if ss.len() != 3 || t.rank() != 3 || ss[0] != t.shape()[0] {
            return Err(Error::Config(format!(
                "attention head mismatch: student {:?}, teacher {:?}",
                ss,
                t.shape()
            )));
        }
        let tv = g.constant(t.clone());
        terms.push(g.mse(s, tv)?);
    }
    mean_of(g, &terms)
}

/// `(1/|map|) Σ_j MSE(H_j^S W, H_{m(j)}^T)`.
pub fn hidden_kd(
    g: &mut Graph,
    student: &[Var],
    teacher: &[Tensor],
    w: Var,
    layer_map: &[usize],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(layer_map.len());
    for (j, &m) in layer_map.iter().enumerate() {
        let s = *student
            .get(j)
            .ok_or_else(|| Error::Config(format!("student trace lacks layer {}", j + 1)))?;
        let t = teacher
            .get(m.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("teacher trace lacks layer {m}")))?;
        let proj = g.matmul(s, w)?;
        let tv = g.constant(t.clone());
        terms.push(g.mse(proj, tv)?);
    }
    mean_of(g, &terms)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let n = terms.len();
    match sum_vars(g, terms)? {
        Some(s) => Ok(g.scale(s, 1.0 / n as f64)),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

/// `CE(z_S/τ, z_T/τ)` plus, in the pre-training stage, the two-class soft
/// cross-entropy between pollution logits.
pub fn prediction_kd(
    g: &mut Graph,
    student_logits: Var,
    teacher_logits: &Tensor,
    pollution: Option<(Var, f64)>,
    tau: f64,
    stage: Stage,
) -> Result<Var> {
    let token = loss::cross_entropy_soft(g, student_logits, teacher_logits, tau)?;
    match (stage, pollution) {
        (Stage::Pretrain, Some((ys, yt))) => {
            let p = crate::tensor::kernels::sigmoid(yt / tau);
            let s = g.scale(ys, 1.0 / tau);
            let target = Tensor::full(g.shape(s).to_vec(), p);
            let c = loss::bce_with_logits(g, s, &target)?;
            g.add(token, c)
        }
        _ => Ok(token),
    }
}

/// Plain outputs of a frozen teacher on one prepared item.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    pub trace: ForwardTrace,
    /// Fused log-probabilities at the slots, used as soft-target logits.
    pub slot_scores: Option<Tensor>,
    pub pollution_logit: f64,
}

pub fn teacher_outputs(teacher: &CaptionModel, item: &Prepared) -> Result<TeacherOutputs> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(&teacher.params);
    let f = forward_item(teacher, &mut g, &mut b, item)?;
    let branches: Vec<usize> = (0..teacher.config.branches).collect();
    let slot_scores = match f.slots {
        Some(s) => {
            let v = fused_log_probs(teacher, &mut g, &mut b, s, &branches)?;
            Some(g.value(v).clone())
        }
        None => None,
    };
    let logit = fusion::pollution_logit(teacher, &mut g, &mut b, f.cls)?;
    Ok(TeacherOutputs {
        trace: f.trace.values(&g),
        slot_scores,
        pollution_logit: g.value(logit).item()?,
    })
}

/// `(1/B) Σ_b prediction_kd(branch b, teacher t(b))` on one item's slots.
pub fn ensemble_kd(
    student: &CaptionModel,
    g: &mut Graph,
    b: &mut Binder,
    slots: Option<Var>,
    cls: Var,
    teachers: &[&TeacherOutputs],
    plan: &KdPlan,
) -> Result<Option<Var>> {
    if plan.assignment.len() != student.config.branches {
        return Err(Error::Config("every head branch needs a teacher".into()));
    }
    let Some(rows) = slots else { return Ok(None) };
    let ys = match plan.stage {
        Stage::Pretrain => Some(fusion::pollution_logit(student, g, b, cls)?),
        Stage::Finetune => None,
    };
    let mut terms = Vec::with_capacity(plan.assignment.len());
    for (branch, &t) in plan.assignment.iter().enumerate() {
        let teacher = teachers
            .get(t)
            .ok_or_else(|| Error::Config(format!("missing teacher {t}")))?;
        let zt = teacher
            .slot_scores
            .as_ref()
            .ok_or_else(|| Error::State("teacher outputs lack slot scores".into()))?;
        let zs = branch_logits(student, g, b, rows, branch)?;
        let pol = ys.map(|y| (y, teacher.pollution_logit));
        terms.push(prediction_kd(g, zs, zt, pol, plan.tau, plan.stage)?);
    }
    mean_of(g, &terms).map(Some)
}

/// Per-term values of one batch evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KdParts {
    pub attention: f64,
    pub hidden: f64,
    pub prediction: f64,
}

/// Gradients for the student parameters and the adapter.
pub struct KdGrads {
    pub student: Vec<Option<Tensor>>,
    pub adapter: Vec<Option<Tensor>>,
}

/// `task·L_task + kd1·(L_att + L_hid) + kd2·L_pred` averaged over the batch.
/// Teachers run forward-only; their parameters are never bound as leaves.
pub fn stage_loss(
    student: &CaptionModel,
    adapter: &Adapter,
    teachers: &[CaptionModel],
    items: &[Prepared],
    plan: &KdPlan,
    weights: KdWeights,
    with_grads: bool,
) -> Result<(LossParts, KdParts, Option<KdGrads>)> {
    plan.validate(student, teachers)?;
    if items.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let w = adapter.tensor();
    let (ds, dt) = (student.config.hidden, teachers[0].config.hidden);
    if w.shape() != [ds, dt] {
        return Err(Error::dim("adapter", w.shape(), &[ds, dt]));
    }
    let total_slots: usize = items.iter().map(|i| i.targets.len()).sum();
    let n = items.len();
    let inv_n = 1.0 / n as f64;
    let mut used: Vec<usize> = plan.assignment.clone();
    used.push(0);
    used.sort_unstable();
    used.dedup();

    type ItemResult = (LossParts, KdParts, Option<KdGrads>);
    let results: Vec<Result<ItemResult>> = items
        .par_iter()
        .map(|item| {
            let mut outs: Vec<Option<TeacherOutputs>> = vec![None; teachers.len()];
            for &t in &used {
                outs[t] = Some(teacher_outputs(&teachers[t], item)?);
            }
            let refs: Vec<&TeacherOutputs> = outs
                .iter()
                .map(|o| {
                    o.as_ref()
                        .unwrap_or_else(|| outs[0].as_ref().expect("trunk teacher"))
                })
                .collect();
            let trunk = refs[0];

            let mut g = Graph::new();
            let mut b = if with_grads {
                Binder::new(&student.params)
            } else {
                Binder::frozen(&student.params)
            };
            let mut ab = if with_grads {
                Binder::new(&adapter.params)
            } else {
                Binder::frozen(&adapter.params)
            };
            let task = item_loss(student, &mut g, &mut b, item, total_slots, n)?;
            let mut parts = LossParts::default();
            let mut kd = KdParts::default();
            let mut terms = Vec::new();
            for (v, slot) in [
                (task.caption, &mut parts.caption),
                (task.concept, &mut parts.concept),
            ] {
                if let Some(v) = v {
                    *slot = g.value(v).item()?;
                    terms.push(g.scale(v, weights.task));
                }
            }
            let f = &task.forward;
            if weights.kd1 != 0.0 {
                let att = attention_kd(
                    &mut g,
                    &f.trace.scores,
                    &trunk.trace.scores,
                    &plan.layer_map,
                )?;
                let wv = ab.var(&mut g, adapter.weight);
                let hid = hidden_kd(
                    &mut g,
                    &f.trace.hiddens,
                    &trunk.trace.hiddens,
                    wv,
                    &plan.layer_map,
                )?;
                kd.attention = g.value(att).item()? * inv_n;
                kd.hidden = g.value(hid).item()? * inv_n;
                let s = g.add(att, hid)?;
                terms.push(g.scale(s, weights.kd1 * inv_n));
            }
            if weights.kd2 != 0.0 {
                if let Some(p) = ensemble_kd(student, &mut g, &mut b, f.slots, f.cls, &refs, plan)?
                {
                    kd.prediction = g.value(p).item()? * inv_n;
                    terms.push(g.scale(p, weights.kd2 * inv_n));
                }
            }
            let grads = match (with_grads, sum_vars(&mut g, &terms)?) {
                (true, Some(total)) => {
                    let mut gr = g.backward(total)?;
                    Some(KdGrads {
                        student: b.collect(&mut gr),
                        adapter: ab.collect(&mut gr),
                    })
                }
                _ => None,
            };
            Ok((parts, kd, grads))
        })
        .collect();

    let mut parts = LossParts::default();
    let mut kd = KdParts::default();
    let mut grads = with_grads.then(|| KdGrads {
        student: vec![None; student.params.len()],
        adapter: vec![None; adapter.params.len()],
    });
    for r in results {
        let (p, k, gr) = r?;
        parts.caption += p.caption;
        parts.concept += p.concept;
        kd.attention += k.attention;
        kd.hidden += k.hidden;
        kd.prediction += k.prediction;
        if let (Some(acc), Some(gr)) = (grads.as_mut(), gr) {
            accumulate(&mut acc.student, gr.student);
            accumulate(&mut acc.adapter, gr.adapter);
        }
    }
    parts.kd = weights.kd1 * (kd.attention + kd.hidden) + weights.kd2 * kd.prediction;
    parts.total = weights.task * (parts.caption + parts.concept) + parts.kd;
    Ok((parts, kd, grads))
}

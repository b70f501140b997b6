//! Pre-training, fine-tuning and distillation loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::concept_pool;
use crate::distill::{stage_loss, Adapter, KdParts, KdPlan, Stage};
use crate::error::{Error, Result};
use crate::model::CaptionModel;
use crate::objectives::{
    batch_loss, item_rng, prepare_finetune, prepare_pretrain, LossParts, Prepared, Sample,
};
use crate::tensor::AdamW;
use crate::tokenizer::Specials;

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub stage: Stage,
    pub step: u64,
    pub loss: LossParts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd: Option<KdParts>,
}

impl LogLine {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log line serializes")
    }
}

/// Item indices of batch `step` (0-based): consecutive windows over a
/// per-epoch shuffle seeded by `seed` and the epoch number.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let batch = batch.min(n);
    let mut perm_epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();
    (0..batch)
        .map(|k| {
            let flat = step * batch as u64 + k as u64;
            let epoch = flat / n as u64;
            if epoch != perm_epoch {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
                rng.set_stream(epoch);
                perm = (0..n).collect();
                perm.shuffle(&mut rng);
                perm_epoch = epoch;
            }
            perm[(flat % n as u64) as usize]
        })
        .collect()
}

/// Layout for every item of a batch. Pre-training draws its masks and
/// pollution from the item's stream for this step.
pub fn prepare_batch<'a>(
    samples: &'a [Sample],
    idx: &[usize],
    stage: Stage,
    pool: &[Vec<u32>],
    cfg: &RunConfig,
    sp: Specials,
    step: u64,
) -> Result<Vec<Prepared<'a>>> {
    idx.iter()
        .map(|&i| {
            let s = &samples[i];
            match stage {
                Stage::Finetune => Ok(prepare_finetune(s, sp)),
                Stage::Pretrain => {
                    let mut rng = item_rng(cfg.seed, s.id, step);
                    prepare_pretrain(s, pool, &cfg.sampling, sp, &mut rng)
                }
            }
        })
        .collect()
}

/// Teacher-forced caption NLL per predicted token over `samples`.
pub fn caption_nll(model: &CaptionModel, samples: &[Sample], sp: Specials) -> Result<f64> {
    let items: Vec<Prepared> = samples.iter().map(|s| prepare_finetune(s, sp)).collect();
    Ok(batch_loss(model, &items, false)?.0.caption)
}

/// Distillation inputs.
pub struct Teachers<'a> {
    pub models: &'a [CaptionModel],
    pub plan: KdPlan,
}

impl<'a> Teachers<'a> {
    /// Plan from the run config: uniform layer map `m(j) = j·L_T / L_S` unless
    /// one is given, branches assigned round-robin.
    pub fn from_config(
        student: &CaptionModel,
        models: &'a [CaptionModel],
        cfg: &RunConfig,
        stage: Stage,
    ) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::Usage("distillation needs at least one teacher".into()))?;
        let (ls, lt) = (student.config.layers, first.config.layers);
        let mut plan = KdPlan::standard(ls, student.config.branches, models.len(), stage);
        plan.layer_map = match &cfg.kd.layer_map {
            Some(m) => m.clone(),
            None => (1..=ls).map(|j| j * lt / ls).collect(),
        };
        plan.tau = cfg.kd.tau;
        plan.weights = cfg.kd.weights;
        plan.two_phase = cfg.kd.two_phase;
        plan.validate(student, models)?;
        Ok(Self { models, plan })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: CaptionModel,
    pub adapter: Option<Adapter>,
    pub log: Vec<LogLine>,
}

/// Runs `cfg.steps` optimizer steps starting at `start_step`. `on_log` sees
/// every logged line as it is produced.
pub fn train(
    mut model: CaptionModel,
    samples: &[Sample],
    cfg: &RunConfig,
    stage: Stage,
    sp: Specials,
    teachers: Option<Teachers>,
    mut on_log: impl FnMut(&LogLine) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    let pool = if stage == Stage::Pretrain {
        concept_pool(samples)
    } else {
        Vec::new()
    };
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut adapter = match &teachers {
        Some(t) => Some(Adapter::new(
            model.config.hidden,
            t.models[0].config.hidden,
            model.config.init_std,
            cfg.seed,
        )?),
        None => None,
    };
    let mut adapter_opt = AdamW::new(cfg.optimizer.clone());
    let total = cfg.steps as u64;
    let mut log = Vec::new();
    for step in 0..total {
        let idx = batch_indices(samples.len(), cfg.batch_size, cfg.seed, step);
        let items = prepare_batch(samples, &idx, stage, &pool, cfg, sp, step)?;
        let (loss, kd) = match (&teachers, adapter.as_mut()) {
            (Some(t), Some(a)) => {
                let w = t.plan.weights_at(step, total);
                let (loss, kd, grads) = stage_loss(&model, a, t.models, &items, &t.plan, w, true)?;
                let grads = grads.ok_or_else(|| Error::Numeric {
                    op: "distill",
                    detail: "no gradients".into(),
                })?;
                opt.step(&mut model.params, &grads.student)?;
                adapter_opt.step(&mut a.params, &grads.adapter)?;
                (loss, Some(kd))
            }
            _ => {
                let (loss, grads) = batch_loss(&model, &items, true)?;
                opt.step(&mut model.params, &grads.expect("requested"))?;
                (loss, None)
            }
        };
        if !loss.total.is_finite() {
            return Err(Error::Numeric {
                op: "train",
                detail: format!("non-finite loss at step {}", step + 1),
            });
        }
        let n = step + 1;
        if n % cfg.log_every as u64 == 0 || n == total {
            let line = LogLine {
                stage,
                step: n,
                loss,
                kd,
            };
            on_log(&line)?;
            log.push(line);
        }
    }
    Ok(TrainOutput {
        model,
        adapter,
        log,
    })
}

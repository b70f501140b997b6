//! Trains a 6-layer teacher on a noisy synthetic corpus, then trains two
//! 2-layer students with the same budget, one with distillation and one
//! without, and compares their validation caption loss.
//!
//! cargo run --release --example distill [seed]

use std::time::Instant;

use lightcap::config::RunConfig;
use lightcap::distill::Stage;
use lightcap::model::{CaptionModel, ModelConfig};
use lightcap::synth::{SynthConfig, SynthCorpus};
use lightcap::train::{caption_nll, train, Teachers};

fn env(name: &str, default: f64) -> f64 {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> lightcap::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let corpus = SynthCorpus::generate(&SynthConfig {
        items: 512 + 256,
        noise: env("NOISE", 1.0),
        word_noise: env("WORD_NOISE", 0.2),
        seed,
        ..SynthConfig::default()
    })?;
    let (train_set, val_set) = corpus.split(512);
    let (train_s, val_s) = (train_set.samples(), val_set.samples());
    let sp = corpus.vocab.specials();

    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.batch_size = env("BATCH", 16.0) as usize;
    cfg.log_every = 1_000_000;
    cfg.model = ModelConfig::desk(corpus.vocab.len());

    let t0 = Instant::now();
    let mut tcfg = cfg.clone();
    tcfg.model.layers = 6;
    tcfg.steps = env("TEACHER_STEPS", 600.0) as usize;
    tcfg.optimizer.lr = env("TEACHER_LR", 2e-3);
    let teacher = train(
        CaptionModel::new(tcfg.model.clone(), seed + 100)?,
        &train_s,
        &tcfg,
        Stage::Finetune,
        sp,
        None,
        |_| Ok(()),
    )?
    .model;
    println!(
        "teacher: val {:.4} train {:.4} ({:.0}s)",
        caption_nll(&teacher, &val_s, sp)?,
        caption_nll(&teacher, &train_s, sp)?,
        t0.elapsed().as_secs_f64()
    );

    cfg.steps = env("STUDENT_STEPS", 600.0) as usize;
    let init = CaptionModel::new(cfg.model.clone(), seed + 200)?;
    let t1 = Instant::now();
    let plain = train(
        init.clone(),
        &train_s,
        &cfg,
        Stage::Finetune,
        sp,
        None,
        |_| Ok(()),
    )?
    .model;
    println!(
        "no kd:   val {:.4} train {:.4} ({:.0}s)",
        caption_nll(&plain, &val_s, sp)?,
        caption_nll(&plain, &train_s, sp)?,
        t1.elapsed().as_secs_f64()
    );

    let t2 = Instant::now();
    let teachers = [teacher];
    let mut kcfg = cfg.clone();
    kcfg.kd.weights.kd1 = env("KD1", 1.0);
    kcfg.kd.weights.kd2 = env("KD2", 1.0);
    let plan = Teachers::from_config(&init, &teachers, &kcfg, Stage::Finetune)?;
    let kd = train(
        init,
        &train_s,
        &kcfg,
        Stage::Finetune,
        sp,
        Some(plan),
        |_| Ok(()),
    )?
    .model;
    println!(
        "with kd: val {:.4} train {:.4} ({:.0}s)",
        caption_nll(&kd, &val_s, sp)?,
        caption_nll(&kd, &train_s, sp)?,
        t2.elapsed().as_secs_f64()
    );
    Ok(())
}

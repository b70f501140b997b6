//! Pre-trains on a synthetic corpus with masked-caption prediction and the
//! concept pollution task, then fine-tunes from the pre-trained weights.
//!
//! cargo run --release --example pretrain

use lightcap::config::RunConfig;
use lightcap::distill::Stage;
use lightcap::model::{CaptionModel, ModelConfig};
use lightcap::synth::{SynthConfig, SynthCorpus};
use lightcap::train::{caption_nll, train};

fn main() -> lightcap::Result<()> {
    let corpus = SynthCorpus::generate(&SynthConfig {
        items: 64,
        noise: 0.3,
        ..SynthConfig::default()
    })?;
    let samples = corpus.samples();
    let sp = corpus.vocab.specials();

    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig::desk(corpus.vocab.len());
    cfg.steps = 200;
    cfg.batch_size = 16;
    cfg.log_every = 50;

    let init = CaptionModel::new(cfg.model.clone(), cfg.seed)?;
    println!(
        "untrained caption loss {:.4}",
        caption_nll(&init, &samples, sp)?
    );

    let pre = train(init, &samples, &cfg, Stage::Pretrain, sp, None, |l| {
        println!("{}", l.to_json());
        Ok(())
    })?;
    println!(
        "after pre-training {:.4}",
        caption_nll(&pre.model, &samples, sp)?
    );

    let fine = train(pre.model, &samples, &cfg, Stage::Finetune, sp, None, |l| {
        println!("{}", l.to_json());
        Ok(())
    })?;
    println!(
        "after fine-tuning {:.4}",
        caption_nll(&fine.model, &samples, sp)?
    );
    Ok(())
}

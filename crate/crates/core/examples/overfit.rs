//! Fine-tunes a desk-scale model on 8 synthetic items until it memorizes
//! them, then greedy-decodes every training grid.
//!
//! cargo run --release --example overfit

use std::time::Instant;

use lightcap::config::RunConfig;
use lightcap::decoder::{generate, BeamConfig};
use lightcap::distill::Stage;
use lightcap::model::{CaptionModel, ModelConfig};
use lightcap::synth::{SynthConfig, SynthCorpus};
use lightcap::train::{caption_nll, train};

fn main() -> lightcap::Result<()> {
    let corpus = SynthCorpus::generate(&SynthConfig::default())?;
    let samples = corpus.samples();
    let sp = corpus.vocab.specials();

    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig::desk(corpus.vocab.len());
    cfg.steps = 500;
    cfg.batch_size = 8;
    cfg.log_every = 50;

    let start = Instant::now();
    let model = CaptionModel::new(cfg.model.clone(), cfg.seed)?;
    let out = train(model, &samples, &cfg, Stage::Finetune, sp, None, |l| {
        println!("{}", l.to_json());
        Ok(())
    })?;
    let loss = caption_nll(&out.model, &samples, sp)?;
    println!(
        "final loss {loss:.4} after {:.1}s",
        start.elapsed().as_secs_f64()
    );

    let greedy = BeamConfig {
        beam_size: 1,
        ..BeamConfig::default()
    };
    let mut exact = 0;
    for (s, item) in samples.iter().zip(&corpus.items) {
        let ids = generate(&out.model, &s.grid, &s.concepts, sp, &greedy)?;
        let text = corpus.vocab.decode(&ids)?;
        let ok = ids == s.words;
        exact += ok as usize;
        println!(
            "{} {text:<50} | {}",
            if ok { "ok " } else { "bad" },
            item.caption
        );
    }
    println!("{exact}/{} reproduced", samples.len());
    Ok(())
}

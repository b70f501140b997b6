//! Fits a small captioner, then decodes the same image greedily and with
//! wider beams, with and without a length penalty.
//!
//! cargo run --release --example beam_search

use lightcap::config::RunConfig;
use lightcap::decoder::{beam_search, encode_context, greedy_decode, BeamConfig, Decoder};
use lightcap::distill::Stage;
use lightcap::model::{CaptionModel, ModelConfig};
use lightcap::synth::{SynthConfig, SynthCorpus};
use lightcap::train::train;

fn main() -> lightcap::Result<()> {
    let corpus = SynthCorpus::generate(&SynthConfig {
        items: 16,
        noise: 0.5,
        ..SynthConfig::default()
    })?;
    let samples = corpus.samples();
    let sp = corpus.vocab.specials();
    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig::desk(corpus.vocab.len());
    cfg.steps = 150;
    let model = train(
        CaptionModel::new(cfg.model.clone(), 0)?,
        &samples,
        &cfg,
        Stage::Finetune,
        sp,
        None,
        |_| Ok(()),
    )?
    .model;

    let dec = Decoder {
        model: &model,
        specials: sp,
    };
    for s in samples.iter().take(3) {
        println!("reference      {}", corpus.vocab.decode(&s.words)?);
        let ctx = encode_context(&model, &s.grid, &s.concepts, sp)?;
        let g = greedy_decode(&dec, ctx.clone(), 20)?;
        println!("greedy         {}", corpus.vocab.decode(&g)?);
        for (beam, penalty) in [(3, None), (5, None), (5, Some(1.0))] {
            let cfg = BeamConfig {
                beam_size: beam,
                max_len: 20,
                length_penalty: penalty,
            };
            let h = beam_search(&dec, ctx.clone(), &cfg)?;
            println!(
                "beam {beam} lp {:<4} {}  (log p {:.3})",
                penalty.map_or("-".into(), |p: f64| p.to_string()),
                corpus.vocab.decode(&h.ids)?,
                h.log_prob
            );
        }
        println!();
    }
    Ok(())
}

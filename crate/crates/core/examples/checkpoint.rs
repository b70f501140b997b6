//! Saves a trained model, reloads it, and shows that the reload is bitwise
//! identical and that the word embedding is a single shared tensor.
//!
//! cargo run --release --example checkpoint

use lightcap::checkpoint::Checkpoint;
use lightcap::config::RunConfig;
use lightcap::distill::Stage;
use lightcap::model::{CaptionModel, ModelConfig};
use lightcap::modulator::gate_from_concepts;
use lightcap::synth::{SynthConfig, SynthCorpus};
use lightcap::train::{caption_nll, train};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = SynthCorpus::generate(&SynthConfig::default())?;
    let samples = corpus.samples();
    let sp = corpus.vocab.specials();
    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig::desk(corpus.vocab.len());
    cfg.steps = 20;
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

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.lcap");
    let ckpt = Checkpoint::new(model, cfg.steps as u64);
    ckpt.save(&path)?;
    let bytes = std::fs::metadata(&path)?.len();
    println!(
        "wrote {} ({bytes} bytes, {} tensors)",
        path.display(),
        ckpt.model.params.len()
    );

    let mut loaded = Checkpoint::load(&path, Some(&cfg.model), false)?;
    let same = ckpt.to_bytes()? == loaded.to_bytes()?;
    println!("reload bitwise identical: {same}, step {}", loaded.step);
    println!(
        "caption loss before/after reload: {:.6} / {:.6}",
        caption_nll(&ckpt.model, &samples, sp)?,
        caption_nll(&loaded.model, &samples, sp)?
    );

    // One write to the shared embedding moves the modulator gate too.
    let concepts = &samples[0].concepts;
    let before = gate_from_concepts(&loaded.model, concepts)?;
    let word = loaded.model.ids.word;
    for &c in concepts {
        for x in loaded.model.params.get_mut(word).row_mut(c as usize) {
            *x += 0.5;
        }
    }
    let after = gate_from_concepts(&loaded.model, concepts)?;
    let moved = before
        .values()
        .iter()
        .zip(after.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("gate change after editing the shared embedding: {moved:.4}");

    let mut other = cfg.model.clone();
    other.hidden = 64;
    match Checkpoint::load(&path, Some(&other), false) {
        Err(e) => println!("loading under a different config is refused: {e}"),
        Ok(_) => println!("unexpected: mismatched config accepted"),
    }
    Ok(())
}

//! Channel gates produced by the concept modulator for different concept
//! sets, and their effect on a grid feature.
//!
//! cargo run --release --example modulation

use lightcap::model::{CaptionModel, ModelConfig};
use lightcap::modulator::{gate_from_concepts, modulate};
use lightcap::synth::{SynthConfig, SynthCorpus};
use lightcap::vision::GridFeature;

fn stats(xs: &[f64]) -> (f64, f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, lo, hi)
}

fn main() -> lightcap::Result<()> {
    let corpus = SynthCorpus::generate(&SynthConfig::default())?;
    let vocab = &corpus.vocab;
    let mut cfg = ModelConfig::desk(vocab.len());
    cfg.init_std = 0.5;
    let model = CaptionModel::new(cfg, 0)?;

    let item = &corpus.items[0];
    let grid = item.grid.clone();
    println!(
        "grid {}x{}x{}",
        grid.height(),
        grid.width(),
        grid.channels()
    );

    let sets: Vec<Vec<&str>> = vec![
        item.concepts.iter().map(String::as_str).collect(),
        corpus.items[1]
            .concepts
            .iter()
            .map(String::as_str)
            .collect(),
        vec![item.concepts[0].as_str()],
    ];
    for set in &sets {
        let ids: Vec<u32> = set.iter().filter_map(|w| vocab.id(w)).collect();
        let gate = gate_from_concepts(&model, &ids)?;
        let (mean, lo, hi) = stats(gate.values());
        let out = modulate(&grid, &gate)?;
        let energy = |g: &GridFeature| g.values().data().iter().map(|x| x * x).sum::<f64>().sqrt();
        println!(
            "{:<24} gate mean {mean:.3} range [{lo:.3}, {hi:.3}]  |v| {:.2} -> {:.2}",
            set.join(" "),
            energy(&grid),
            energy(&out)
        );
    }
    Ok(())
}

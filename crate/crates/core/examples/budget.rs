//! Parameter, storage and FLOP budget of the full-size pipeline, and a
//! per-stage latency breakdown of a desk-sized one on this machine.
//!
//! cargo run --release --example budget

use lightcap::concepts::{AlignmentMLP, ConceptVocabulary};
use lightcap::model::{CaptionModel, ModelConfig};
use lightcap::profiler::{
    count_live, model_spec, pipeline_latency, BudgetReport, Pipeline, Retrieval, SeqAssumption,
};
use lightcap::tensor::Tensor;
use lightcap::tokenizer::Specials;
use lightcap::vision::{uniform_proposals, GridFeature};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lightcap::Result<()> {
    let full = ModelConfig::full_student();
    let seq = SeqAssumption::standard();
    print!("{}", BudgetReport::pipeline(&full, &seq, 640, 10).table());

    let cfg = ModelConfig::desk(200);
    let model = CaptionModel::new(cfg.clone(), 0)?;
    println!(
        "\ndesk model: {} live parameters, spec says {}",
        count_live(&model),
        model_spec(&cfg, &seq).params()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = GridFeature::new(Tensor::randn([7, 7, cfg.grid_channels], 1.0, &mut rng))?;
    let mlp = AlignmentMLP::new(cfg.grid_channels, 64, 32, 2)?;
    let names: Vec<String> = (0..1000).map(|i| format!("c{i}")).collect();
    let vocab = ConceptVocabulary::from_raw(names, Tensor::randn([1000, 32], 1.0, &mut rng))?;
    let regions = uniform_proposals(3);
    let report = pipeline_latency(
        &Pipeline {
            model: &model,
            feature_file: None,
            grid: &grid,
            retrieval: Some(Retrieval {
                regions: &regions,
                mlp: &mlp,
                vocab: &vocab,
                k: 20,
            }),
            concepts: &[10, 11, 12],
            specials: Specials {
                pad: 0,
                unk: 1,
                cls: 2,
                sep: 3,
                mask: 4,
            },
            caption_len: 12,
        },
        2,
        9,
    )?;
    print!("\n{}", report.table());
    Ok(())
}

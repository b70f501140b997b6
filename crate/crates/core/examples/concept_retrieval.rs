//! Trains the region-to-text alignment MLP on synthetic pairs, then plants
//! four concepts in the quadrants of a grid and retrieves them with a 2x2
//! set of region proposals.
//!
//! cargo run --release --example concept_retrieval

use lightcap::concepts::{
    retrieve_concepts, train_alignment, AlignTrainConfig, AlignmentMLP, ConceptVocabulary,
};
use lightcap::tensor::Tensor;
use lightcap::vision::{uniform_proposals, GridFeature};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CHANNELS: usize = 24;
const TEXT: usize = 12;
const CONCEPTS: usize = 40;

fn main() -> lightcap::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let names: Vec<String> = (0..CONCEPTS).map(|i| format!("concept{i}")).collect();
    let vocab = ConceptVocabulary::from_raw(names, Tensor::randn([CONCEPTS, TEXT], 1.0, &mut rng))?;

    // Region features are a fixed random lift of the text embedding plus noise.
    let lift = Tensor::randn([TEXT, CHANNELS], 1.0, &mut rng);
    let region_of = |c: usize, rng: &mut ChaCha8Rng| -> lightcap::Result<Tensor> {
        let t = Tensor::new([1, TEXT], vocab.embeddings().row(c).to_vec())?;
        let x = t.matmul(&lift)?;
        let noise = Tensor::randn([1, CHANNELS], 0.1, rng);
        Tensor::new(
            [CHANNELS],
            x.data()
                .iter()
                .zip(noise.data())
                .map(|(a, b)| a + b)
                .collect(),
        )
    };
    let mut pairs = Vec::new();
    for _ in 0..4 {
        for c in 0..CONCEPTS {
            pairs.push((
                region_of(c, &mut rng)?,
                Tensor::new([TEXT], vocab.embeddings().row(c).to_vec())?,
            ));
        }
    }
    let mut mlp = AlignmentMLP::new(CHANNELS, 48, TEXT, 1)?;
    let losses = train_alignment(
        &mut mlp,
        &pairs,
        &AlignTrainConfig {
            epochs: 300,
            lr: 1e-2,
            weight_decay: 0.0,
        },
    )?;
    println!(
        "contrastive loss {:.3} -> {:.3}, temperature {:.3}",
        losses[0],
        losses[losses.len() - 1],
        mlp.temperature()
    );

    // 4x4 grid, one planted concept per 2x2 quadrant.
    let planted = [3usize, 17, 25, 38];
    let mut cells = vec![0.0; 4 * 4 * CHANNELS];
    for y in 0..4 {
        for x in 0..4 {
            let q = (y / 2) * 2 + x / 2;
            let v = region_of(planted[q], &mut rng)?;
            cells[(y * 4 + x) * CHANNELS..][..CHANNELS].copy_from_slice(v.data());
        }
    }
    let grid = GridFeature::new(Tensor::new([4, 4, CHANNELS], cells)?)?;
    let set = retrieve_concepts(&grid, &uniform_proposals(2), &mlp, &vocab, 20)?;
    println!(
        "planted   {:?}",
        planted
            .iter()
            .map(|&c| format!("concept{c}"))
            .collect::<Vec<_>>()
    );
    for e in &set.entries {
        println!("retrieved {:<10} score {:.3}", e.name, e.score);
    }
    Ok(())
}

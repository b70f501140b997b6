//! BLEU@4 and CIDEr-D on a handful of candidate captions.
//!
//! cargo run --release --example metrics

use lightcap::metrics::{bleu4, cider, evaluate, modified_precision, tokenize, EvalItem};

fn main() -> lightcap::Result<()> {
    let refs = [
        [
            "a man riding a horse on a beach",
            "a person rides a brown horse near the sea",
        ],
        [
            "two dogs play in the snow",
            "a pair of dogs running through snow",
        ],
        [
            "a red bus parked on a street",
            "a bus waiting at the side of the road",
        ],
    ];
    let systems = [
        (
            "exact",
            [
                "a man riding a horse on a beach",
                "two dogs play in the snow",
                "a red bus parked on a street",
            ],
        ),
        (
            "close",
            [
                "a man rides a horse on the beach",
                "dogs playing in snow",
                "a bus parked on the street",
            ],
        ),
        (
            "off",
            [
                "a plate of food",
                "a cat on a sofa",
                "people walking in a park",
            ],
        ),
    ];
    for (name, cands) in systems {
        let corpus: Vec<EvalItem> = cands
            .iter()
            .zip(&refs)
            .enumerate()
            .map(|(i, (c, r))| EvalItem::from_text(i.to_string(), c, r))
            .collect();
        let s = evaluate(&corpus)?;
        println!("{name:<6} bleu4 {:.4} cider {:.4}", s.bleu4, s.cider);
        debug_assert_eq!(s.bleu4, bleu4(&corpus)?);
        debug_assert_eq!(s.cider, cider(&corpus)?);
    }

    let cand = tokenize("the the the cat");
    let (hit, total) = modified_precision(&cand, &[tokenize("the cat sat down")], 1);
    println!("clipped unigram precision of 'the the the cat': {hit}/{total}");
    Ok(())
}

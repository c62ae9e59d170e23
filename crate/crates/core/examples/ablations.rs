//! Trains the full model and the two ablations (causal placeholder block,
//! position-only placeholder embedding) with the same seed and budget and
//! compares validation gIoU.
//!
//!     cargo run --release --example ablations -- [steps] [seed]

use allmask::dataset::{make_dataset, DatasetSpec};
use allmask::metrics::{evaluate, EvalMode};
use allmask::model::{init_parameters, ModelConfig};
use allmask::pipeline::{AllMaskVariant, Paradigm};
use allmask::training::{train, TrainConfig};
use allmask::vocab::Vocabulary;

fn main() -> allmask::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(800) as usize;
    let seed = args.get(1).copied().unwrap_or(0);
    let vocab = Vocabulary::toy();
    let train_set = make_dataset(&DatasetSpec::train(5000, 8), &vocab)?;
    let val = make_dataset(&DatasetSpec::val(300, 8), &vocab)?;
    let cfg = TrainConfig { steps, seed, learning_rate: 1e-3, ..TrainConfig::default() };

    println!("{:<10} {:>8} {:>8}", "variant", "gIoU", "cIoU");
    for variant in [AllMaskVariant::default(), AllMaskVariant::no_hybrid(), AllMaskVariant::no_fusion()] {
        let params = init_parameters::<f32>(&ModelConfig { init_seed: seed, ..ModelConfig::default() })?;
        let params = train(params, &train_set, &cfg, Paradigm::AllMask(variant), &vocab, |_| {})?.params;
        let r = evaluate(&params, &val, EvalMode::AllMask { variant, refine: false }, &vocab)?;
        println!("{:<10} {:>8.4} {:>8.4}", variant.label(), r.giou, r.ciou);
    }
    Ok(())
}

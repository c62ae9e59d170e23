//! Phase two on top of the cached prefix gives the same placeholder states
//! as one uncached forward over the whole sequence, for every variant.
//!
//!     cargo run --release --example cache_equivalence

use allmask::dataset::SyntheticSample;
use allmask::model::{init_parameters, ModelConfig};
use allmask::pipeline::{all_mask_forward, forced_seg_capture, full_forward_all_mask, AllMaskVariant};
use allmask::training::perturb_parameters;
use allmask::vocab::Vocabulary;

fn main() -> allmask::Result<()> {
    let vocab = Vocabulary::toy();
    let mut params = init_parameters::<f64>(&ModelConfig::default())?;
    perturb_parameters(&mut params, 0.05, 1);

    for side in [4, 8, 12] {
        let s = SyntheticSample::generate(77, side, false, 4, &vocab)?;
        let grid = params.patch_features(&s.pixels, side)?;
        let (capture, _) = forced_seg_capture(&params, &s.instruction, &grid, 4)?;
        for variant in [AllMaskVariant::default(), AllMaskVariant::no_hybrid(), AllMaskVariant::no_fusion()] {
            let (a, pa) = all_mask_forward(&params, &capture, &grid, variant)?;
            let (b, pb) = full_forward_all_mask(&params, &capture.hist, &grid, variant)?;
            let diff = (&a - &b).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            println!(
                "P={side:2} prefix {:3} {:<9} max |dZ| {diff:.2e}  masks equal: {}",
                capture.prefix_len(),
                variant.label(),
                pa.binary == pb.binary
            );
        }
    }
    Ok(())
}

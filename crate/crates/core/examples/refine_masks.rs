//! Region-growing refinement: a coarse, noisy patch mask is cleaned up by
//! flooding the pixels from a keypoint sampled inside its largest component.
//!
//!     cargo run --example refine_masks

use allmask::dataset::SyntheticSample;
use allmask::metrics::{iou, render_pair};
use allmask::pipeline::MaskPrediction;
use allmask::refine::{components, refine_prediction, sample_keypoint};
use allmask::vocab::Vocabulary;

fn main() -> allmask::Result<()> {
    let vocab = Vocabulary::toy();
    let p = 8;
    let sample = (300..)
        .map(|s| SyntheticSample::generate(s, p, false, 4, &vocab))
        .find(|s| s.as_ref().map_or(true, |s| s.gt_mask.iter().filter(|&&b| b).count() >= 5))
        .unwrap()?;

    // knock out one target patch and add a stray blob elsewhere
    let mut noisy = sample.gt_mask.clone();
    let first = noisy.iter().position(|&b| b).unwrap();
    noisy[first] = false;
    let stray = (0..p * p).rev().find(|&i| !sample.gt_mask[i]).unwrap();
    noisy[stray] = true;
    let pred = MaskPrediction::from_binary(p, &noisy);

    println!("{}", vocab.decode_str(&sample.instruction)?);
    println!("components in the coarse mask: {}", components(&noisy, p).len());
    if let Some(kp) = sample_keypoint(&pred) {
        println!("keypoint at patch ({}, {}), pixel {:?}", kp.row, kp.col, kp.pixel(4));
    }
    println!("coarse vs ground truth, IoU {:.3}", iou(&noisy, &sample.gt_mask)?);
    print!("{}", render_pair(&noisy, &sample.gt_mask, p));

    if let Some(refined) = refine_prediction(&sample.pixels, &pred, 0.1)? {
        println!("refined vs ground truth, IoU {:.3}", iou(&refined, &sample.gt_mask)?);
        print!("{}", render_pair(&refined, &sample.gt_mask, p));
    }
    Ok(())
}

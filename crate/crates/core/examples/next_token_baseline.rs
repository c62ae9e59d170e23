//! Trains a small model on the next-token paradigm, where the answer spells
//! out one `fg`/`bg` word per patch, and decodes a mask with it. The step
//! count grows with the number of patches.
//!
//!     cargo run --release --example next_token_baseline -- [steps]

use allmask::dataset::{make_dataset, DatasetSpec, SyntheticSample};
use allmask::metrics::{iou, render_pair};
use allmask::model::{init_parameters, ModelConfig};
use allmask::pipeline::{baseline_next_token_segment, Paradigm, DEFAULT_MAX_NEW_TOKENS};
use allmask::training::{train, TrainConfig};
use allmask::vocab::Vocabulary;

fn main() -> allmask::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let vocab = Vocabulary::toy();
    let grid = 4;
    let data = make_dataset(&DatasetSpec { allow_no_object: false, ..DatasetSpec::train(2000, grid) }, &vocab)?;
    let cfg = TrainConfig { steps, learning_rate: 1e-3, ..TrainConfig::default() };
    let params = init_parameters::<f32>(&ModelConfig::default())?;
    let params = train(params, &data, &cfg, Paradigm::NextToken, &vocab, |p| {
        if p.step % 100 == 0 {
            println!("step {:4}  text loss {:.4}", p.step, p.l_text);
        }
    })?
    .params;

    for seed in 20_000..20_003 {
        let s = SyntheticSample::generate(seed, grid, false, 4, &vocab)?;
        let features = params.patch_features(&s.pixels, grid)?;
        let out = baseline_next_token_segment(&params, &s.instruction, &features, &vocab, DEFAULT_MAX_NEW_TOKENS)?;
        println!(
            "\n{}\nsteps {} (N = {}), decoding errors {}, <seg> emitted: {}, IoU {:.3}",
            vocab.decode_str(&s.instruction)?,
            out.steps,
            grid * grid,
            out.decoding_errors,
            out.seg_emitted,
            iou(&out.prediction.binary, &s.gt_mask)?
        );
        print!("{}", render_pair(&out.prediction.binary, &s.gt_mask, grid));
    }
    Ok(())
}

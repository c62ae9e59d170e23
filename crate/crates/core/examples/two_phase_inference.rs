//! Runs both inference phases on one validation image and shows the
//! response, the predicted mask next to the ground truth and the step
//! accounting.
//!
//!     cargo run --release --example two_phase_inference -- [model.ckpt] [seed]
//!
//! Without a checkpoint a model is trained for a few hundred steps first,
//! which is enough for the text side and a rough mask.

use std::path::Path;

use allmask::dataset::{make_dataset, DatasetSpec, SyntheticSample, VAL_SEEDS};
use allmask::metrics::{iou, render_pair};
use allmask::model::{init_parameters, read_checkpoint_file, ModelConfig, Parameters};
use allmask::pipeline::{run_pipeline, Paradigm, PipelineOptions};
use allmask::training::{train, TrainConfig};
use allmask::vocab::Vocabulary;

fn model(arg: Option<&String>, vocab: &Vocabulary) -> allmask::Result<Parameters<f32>> {
    if let Some(path) = arg.filter(|a| a.ends_with(".ckpt")) {
        return read_checkpoint_file(Path::new(path), &ModelConfig::default());
    }
    eprintln!("no checkpoint given, training 400 steps");
    let data = make_dataset(&DatasetSpec::train(2000, 8), vocab)?;
    let cfg = TrainConfig { steps: 400, learning_rate: 1e-3, ..TrainConfig::default() };
    let params = init_parameters(&ModelConfig::default())?;
    Ok(train(params, &data, &cfg, Paradigm::default(), vocab, |_| {})?.params)
}

fn main() -> allmask::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let vocab = Vocabulary::toy();
    let params = model(args.first(), &vocab)?;
    let seed = args.iter().filter_map(|a| a.parse().ok()).next().unwrap_or(VAL_SEEDS.start);
    let sample = SyntheticSample::generate(seed, 8, true, 4, &vocab)?;

    let result = run_pipeline(&params, &sample.pixels, 8, &sample.instruction, &PipelineOptions::default())?;
    println!("Q: {}", vocab.decode_str(&sample.instruction)?);
    println!("A: {}", vocab.decode_str(&result.response)?);
    match result.masks.first() {
        Some(pred) => {
            println!("prediction vs ground truth (IoU {:.3}):", iou(pred.final_mask(), &sample.gt_mask)?);
            print!("{}", render_pair(pred.final_mask(), &sample.gt_mask, 8));
        }
        None => println!("no <seg> emitted, no mask"),
    }
    println!("{}", result.summary_line());

    // the same model at a different patch grid
    let other = make_dataset(&DatasetSpec::new(seed + 1, 1, vec![12]), &vocab)?;
    let r = run_pipeline(&params, &other[0].pixels, 12, &other[0].instruction, &PipelineOptions::default())?;
    println!("P=12: {} ({} masks)", r.summary_line(), r.masks.len());
    Ok(())
}

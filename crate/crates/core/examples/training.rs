//! Trains the default model on the 8x8 referring task, prints the loss
//! curve every 100 steps and saves a checkpoint plus `loss.csv`.
//!
//!     cargo run --release --example training -- [steps] [learning_rate] [out_dir]
//!
//! The saved checkpoint works with the `evaluate`, `benchmark` and
//! `two_phase_inference` examples and with `allmask eval --ckpt`.

use std::fs::File;
use std::path::PathBuf;
use std::time::Instant;

use allmask::dataset::{make_dataset, DatasetSpec};
use allmask::model::{init_parameters, write_checkpoint_file, ModelConfig};
use allmask::pipeline::Paradigm;
use allmask::training::{train, write_loss_csv, TrainConfig};
use allmask::vocab::Vocabulary;

fn main() -> allmask::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().and_then(|s| s.parse().ok()).unwrap_or(1000);
    let learning_rate = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let out = PathBuf::from(args.get(2).map_or("allmask-train", String::as_str));
    std::fs::create_dir_all(&out)?;

    let vocab = Vocabulary::toy();
    let data = make_dataset(&DatasetSpec::train(5000, 8), &vocab)?;
    let config = TrainConfig { steps, learning_rate, ..TrainConfig::default() };
    let params = init_parameters::<f32>(&ModelConfig::default())?;

    let started = Instant::now();
    let outcome = train(params, &data, &config, Paradigm::default(), &vocab, |p| {
        if p.step % 100 == 0 || p.step + 1 == steps {
            println!(
                "step {:5}  text {:.4}  bce {:.4}  dice {:.4}  |g| {:.3}  lr {:.2e}  {:.0}s",
                p.step,
                p.l_text,
                p.l_bce,
                p.l_dice,
                p.grad_norm,
                p.learning_rate,
                started.elapsed().as_secs_f64()
            );
        }
    })?;

    write_checkpoint_file(&outcome.params, &out.join("model.ckpt"))?;
    write_loss_csv(&mut File::create(out.join("loss.csv"))?, &outcome.curve)?;
    println!("saved {} and loss.csv", out.join("model.ckpt").display());
    Ok(())
}

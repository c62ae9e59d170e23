//! Mask-generation step counts and wall clock for both modes at
//! N = 16, 64 and 256 patches, on the same model and the same sample.
//! Step counts do not depend on training, so an untrained model is fine
//! unless a checkpoint is given.
//!
//!     cargo run --release --example benchmark -- [model.ckpt]

use std::path::Path;

use allmask::dataset::{SyntheticSample, VAL_SEEDS};
use allmask::metrics::{benchmark, BenchReport, EvalMode};
use allmask::model::{init_parameters, read_checkpoint_file, ModelConfig};
use allmask::vocab::Vocabulary;

fn main() -> allmask::Result<()> {
    let vocab = Vocabulary::toy();
    let params = match std::env::args().nth(1) {
        Some(p) => read_checkpoint_file(Path::new(&p), &ModelConfig::default())?,
        None => init_parameters(&ModelConfig::default())?,
    };
    println!("{}", BenchReport::CSV_HEADER);
    for side in [4, 8, 16] {
        let sample = SyntheticSample::generate(VAL_SEEDS.start, side, false, 4, &vocab)?;
        let all = benchmark(&params, &sample, EvalMode::default(), 5, &vocab)?;
        let nt = benchmark(&params, &sample, EvalMode::NextToken, 5, &vocab)?;
        println!("{}", all.csv_row());
        println!("{}", nt.csv_row());
        eprintln!("N={:3}: next-token / all-mask = {:.1}x", side * side, nt.median_ms / all.median_ms);
    }
    Ok(())
}

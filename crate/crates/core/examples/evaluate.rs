//! Scores a checkpoint on the validation split, with and without
//! refinement, and writes the per-sample CSV.
//!
//!     cargo run --release --example evaluate -- model.ckpt [count]

use std::fs::File;
use std::path::Path;

use allmask::dataset::{make_dataset, DatasetSpec};
use allmask::metrics::{evaluate, EvalMode};
use allmask::model::{read_checkpoint_file, ModelConfig};
use allmask::pipeline::AllMaskVariant;
use allmask::vocab::Vocabulary;

fn main() -> allmask::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(ckpt) = args.first() else {
        eprintln!("usage: evaluate <model.ckpt> [count]   (train one with `allmask train`)");
        std::process::exit(2);
    };
    let count = args.get(1).and_then(|c| c.parse().ok()).unwrap_or(1000);
    let vocab = Vocabulary::toy();
    let params = read_checkpoint_file(Path::new(ckpt), &ModelConfig::default())?;
    let val = make_dataset(&DatasetSpec::val(count, 8), &vocab)?;

    for refine in [false, true] {
        let report = evaluate(&params, &val, EvalMode::AllMask { variant: AllMaskVariant::default(), refine }, &vocab)?;
        print!("{}", report.summary_table());
        let silent = report.samples.iter().filter(|s| s.seg_count == 0).count();
        println!("samples without <seg>: {silent}\n");
        if !refine {
            let path = std::env::temp_dir().join("allmask_eval.csv");
            report.write_csv(&mut File::create(&path)?)?;
            println!("per-sample rows in {}\n", path.display());
        }
    }
    Ok(())
}

//! Central-difference check of the analytic gradient of the combined loss,
//! in f64, for both training paradigms.
//!
//!     cargo run --release --example gradcheck

use allmask::dataset::SyntheticSample;
use allmask::model::{init_parameters, ModelConfig};
use allmask::pipeline::Paradigm;
use allmask::training::{finite_difference_gradcheck, perturb_parameters, GradCheckOptions};
use allmask::vocab::Vocabulary;

fn main() -> allmask::Result<()> {
    let vocab = Vocabulary::toy();
    let config = ModelConfig { embed_dim: 32, heads: 2, mlp_hidden: 64, ..ModelConfig::default() };
    let mut params = init_parameters::<f64>(&config)?;
    perturb_parameters(&mut params, 0.05, 3);
    let samples: Vec<SyntheticSample> =
        (0..3).map(|s| SyntheticSample::generate(s, 4, true, 4, &vocab)).collect::<Result<_, _>>()?;
    let batch: Vec<&SyntheticSample> = samples.iter().collect();

    for paradigm in [Paradigm::default(), Paradigm::NextToken] {
        let report = finite_difference_gradcheck(&params, &batch, paradigm, &vocab, &GradCheckOptions::default())?;
        let worst = report.worst().unwrap();
        println!(
            "{paradigm:?}: {} coords over {}/{} tensors, max rel err {:.2e} ({} #{}: analytic {:.6e}, numeric {:.6e})",
            report.checks.len(),
            report.tensors_covered,
            report.tensors_total,
            report.max_rel_error,
            worst.tensor,
            worst.index,
            worst.analytic,
            worst.numeric
        );
    }
    Ok(())
}

use std::io::Write;
use std::path::PathBuf;

use ndarray::NdFloat;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objective::loss_and_grad;
use super::optim::{clip_global_norm, learning_rate_at, Adam};
use crate::dataset::SyntheticSample;
use crate::error::{invalid, Error, Result};
use crate::model::{write_checkpoint_file, Parameters};
use crate::pipeline::Paradigm;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    /// Write a checkpoint every this many steps (0 disables periodic saves).
    pub checkpoint_every: usize,
    /// Directory for periodic and final checkpoints; nothing is written when unset.
    pub checkpoint_dir: Option<PathBuf>,
    /// Probability that a batch slot is drawn from the no-object samples.
    /// `None` samples uniformly from the whole dataset.
    pub no_object_fraction: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            steps: 5000,
            batch_size: 8,
            warmup_fraction: 0.03,
            grad_clip: 1.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            checkpoint_every: 0,
            checkpoint_dir: None,
            no_object_fraction: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(invalid("warmup_fraction must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if let Some(f) = self.no_object_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(invalid("no_object_fraction must be in [0, 1]"));
            }
        }
        if self.grad_clip <= 0.0 {
            return Err(invalid("grad_clip must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub l_text: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub l_total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global norm of the gradient actually applied.
    pub applied_norm: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub params: Parameters<F>,
    pub curve: Vec<CurvePoint>,
}

/// Trains on random batches drawn with replacement from `dataset`.
///
/// `on_step` sees every curve point as it is produced.
pub fn train<F: NdFloat>(
    mut params: Parameters<F>,
    dataset: &[SyntheticSample],
    config: &TrainConfig,
    paradigm: Paradigm,
    vocab: &Vocabulary,
    mut on_step: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let (none, some): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| !dataset[i].has_target());
    let pools = match config.no_object_fraction {
        Some(f) if !none.is_empty() && !some.is_empty() => Some((f, none, some)),
        _ => None,
    };
    let mut opt = Adam::new(&params, config.beta1, config.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch_seed = rng.next_u64();
        let mut batch_rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let batch: Vec<&SyntheticSample> = (0..config.batch_size)
            .map(|_| match &pools {
                None => &dataset[batch_rng.random_range(0..dataset.len())],
                Some((f, none, some)) => {
                    let pool = if batch_rng.random_bool(*f) { none } else { some };
                    &dataset[pool[batch_rng.random_range(0..pool.len())]]
                }
            })
            .collect();
        let (report, mut grads) = loss_and_grad(&params, &batch, paradigm, vocab)?;
        let (grad_norm, applied_norm) = clip_global_norm(&mut grads, config.grad_clip);
        if !report.l_total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite { step, batch_seed });
        }
        let lr = learning_rate_at(step, config.steps, config.learning_rate, config.warmup_fraction);
        opt.step(&mut params, &grads, lr);
        let point = CurvePoint {
            step,
            l_text: report.l_text,
            l_bce: report.l_bce,
            l_dice: report.l_dice,
            l_total: report.l_total,
            grad_norm,
            applied_norm,
            learning_rate: lr,
        };
        on_step(&point);
        curve.push(point);
        if let Some(dir) = &config.checkpoint_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                write_checkpoint_file(&params, &dir.join(format!("step_{:06}.ckpt", step + 1)))?;
            }
        }
    }
    if let Some(dir) = &config.checkpoint_dir {
        write_checkpoint_file(&params, &dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { params, curve })
}

/// `step,l_text,l_bce,l_dice,l_total,grad_norm`
pub fn write_loss_csv<W: Write>(out: &mut W, curve: &[CurvePoint]) -> Result<()> {
    writeln!(out, "step,l_text,l_bce,l_dice,l_total,grad_norm")?;
    for p in curve {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.step, p.l_text, p.l_bce, p.l_dice, p.l_total, p.grad_norm
        )?;
    }
    Ok(())
}

//! Central finite-difference check of the analytic gradients.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::objective::{loss_and_grad, total_loss};
use crate::dataset::SyntheticSample;
use crate::error::{invalid, Result};
use crate::model::Parameters;
use crate::pipeline::Paradigm;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Total coordinates to check, spread evenly over the parameter tensors.
    pub num_coords: usize,
    /// Relative errors are `|a - n| / max(|n|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            num_coords: 240,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: Vec<CoordCheck>,
    pub tensors_covered: usize,
    pub tensors_total: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error_in(&self, tensor: &str) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.tensor == tensor)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }
}

/// Adds `N(0, std)` noise to every parameter, so biases, positional tables
/// and norm gains leave their initial values.
pub fn perturb_parameters(params: &mut Parameters<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    for mut t in params.tensors_mut() {
        t.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
}

/// Checks the gradient of `l_total` computed by [`loss_and_grad`].
pub fn finite_difference_gradcheck(
    params: &Parameters<f64>,
    batch: &[&SyntheticSample],
    paradigm: Paradigm,
    vocab: &Vocabulary,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(params, batch, paradigm, vocab)?;
    gradcheck_against(params, &analytic, batch, paradigm, vocab, options)
}

/// Compares a caller-supplied gradient against central differences.
///
/// Within each tensor, coordinates with a non-negligible analytic gradient
/// are preferred so that the comparison is not dominated by zeros.
pub fn gradcheck_against(
    params: &Parameters<f64>,
    analytic: &Parameters<f64>,
    batch: &[&SyntheticSample],
    paradigm: Paradigm,
    vocab: &Vocabulary,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(options.epsilon > 0.0) || options.num_coords == 0 {
        return Err(invalid("gradcheck needs epsilon > 0 and at least one coordinate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let grads = analytic.named_tensors();
    let tensors_total = grads.len();
    let per_tensor = options.num_coords.div_ceil(tensors_total);

    let mut picks: Vec<(usize, String, usize)> = Vec::new();
    for (ti, (name, g)) in grads.iter().enumerate() {
        let flat: Vec<f64> = g.iter().copied().collect();
        let live: Vec<usize> = (0..flat.len()).filter(|&i| flat[i].abs() > 10.0 * options.floor).collect();
        let pool: Vec<usize> = if live.len() >= per_tensor.min(flat.len()) {
            live
        } else {
            (0..flat.len()).collect()
        };
        let k = per_tensor.min(pool.len());
        for j in sample_indices(&mut rng, pool.len(), k) {
            picks.push((ti, name.clone(), pool[j]));
        }
    }

    let loss_at = |p: &Parameters<f64>| -> Result<f64> { Ok(total_loss(p, batch, paradigm, vocab)?.l_total) };
    let mut work = params.clone();
    let mut checks = Vec::with_capacity(picks.len());
    for (ti, tensor, index) in picks {
        let original = params.named_tensors()[ti].1.iter().nth(index).copied().unwrap();
        let set = |work: &mut Parameters<f64>, v: f64| {
            let mut t = work.tensors_mut().swap_remove(ti);
            *t.iter_mut().nth(index).unwrap() = v;
        };
        set(&mut work, original + options.epsilon);
        let up = loss_at(&work)?;
        set(&mut work, original - options.epsilon);
        let down = loss_at(&work)?;
        set(&mut work, original);
        let numeric = (up - down) / (2.0 * options.epsilon);
        let a = grads[ti].1.iter().nth(index).copied().unwrap();
        let rel_error = (a - numeric).abs() / numeric.abs().max(options.floor);
        checks.push(CoordCheck {
            tensor,
            index,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    let mut covered: Vec<&str> = checks.iter().map(|c| c.tensor.as_str()).collect();
    covered.dedup();
    Ok(GradCheckReport {
        max_rel_error: checks.iter().map(|c| c.rel_error).fold(0.0, f64::max),
        tensors_covered: covered.len(),
        tensors_total,
        checks,
    })
}

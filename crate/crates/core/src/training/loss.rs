//! Text cross-entropy, BCE and Dice, each with its gradient.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, NdFloat};

use crate::error::{invalid, Result};
use crate::vocab::TokenId;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTHING: f64 = 1.0;

fn c<F: NdFloat>(x: f64) -> F {
    F::from(x).unwrap()
}

pub fn sigmoid<F: NdFloat>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Mean negative log-likelihood of `targets[t]` under `logits.row(t)`, and
/// its gradient with respect to the logits.
pub fn text_loss_grad<F: NdFloat>(
    logits: ArrayView2<'_, F>,
    targets: &[TokenId],
) -> Result<(F, Array2<F>)> {
    if logits.nrows() != targets.len() {
        return Err(invalid(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Ok((F::zero(), Array2::zeros(logits.raw_dim())));
    }
    let scale = F::one() / c(targets.len() as f64);
    let mut grad = Array2::<F>::zeros(logits.raw_dim());
    let mut total = F::zero();
    for ((row, mut g), &t) in logits.rows().into_iter().zip(grad.rows_mut()).zip(targets) {
        let t = t as usize;
        if t >= row.len() {
            return Err(invalid(format!("target id {t} outside the logit width")));
        }
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let sum = row.iter().map(|&v| (v - max).exp()).fold(F::zero(), |a, b| a + b);
        let log_z = max + sum.ln();
        total += log_z - row[t];
        for (gv, &v) in g.iter_mut().zip(row.iter()) {
            *gv = (v - log_z).exp() * scale;
        }
        g[t] -= scale;
    }
    Ok((total * scale, grad))
}

pub fn text_loss<F: NdFloat>(logits: ArrayView2<'_, F>, targets: &[TokenId]) -> Result<F> {
    text_loss_grad(logits, targets).map(|(l, _)| l)
}

fn check_lengths<F>(logits: &ArrayView1<'_, F>, gt: &[bool]) -> Result<()> {
    if logits.is_empty() || logits.len() != gt.len() {
        return Err(invalid(format!(
            "mask loss needs equal non-zero lengths, got {} logits and {} labels",
            logits.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy over patches, `p = sigmoid(logit)`.
pub fn bce_loss_grad<F: NdFloat>(logits: ArrayView1<'_, F>, gt: &[bool]) -> Result<(F, Array1<F>)> {
    check_lengths(&logits, gt)?;
    let n = c::<F>(gt.len() as f64);
    let lo = c::<F>(BCE_CLAMP);
    let hi = F::one() - lo;
    let mut total = F::zero();
    let mut grad = Array1::<F>::zeros(gt.len());
    for ((&z, &g), gv) in logits.iter().zip(gt).zip(grad.iter_mut()) {
        let p = sigmoid(z);
        let pc = p.max(lo).min(hi);
        let clamped = pc != p;
        if g {
            total -= pc.ln();
            if !clamped {
                *gv = (p - F::one()) / n;
            }
        } else {
            total -= (F::one() - pc).ln();
            if !clamped {
                *gv = p / n;
            }
        }
    }
    Ok((total / n, grad))
}

pub fn bce_loss<F: NdFloat>(logits: ArrayView1<'_, F>, gt: &[bool]) -> Result<F> {
    bce_loss_grad(logits, gt).map(|(l, _)| l)
}

/// Soft Dice loss `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss_grad<F: NdFloat>(
    logits: ArrayView1<'_, F>,
    gt: &[bool],
    smoothing: f64,
) -> Result<(F, Array1<F>)> {
    check_lengths(&logits, gt)?;
    let eps = c::<F>(smoothing);
    let p: Vec<F> = logits.iter().map(|&z| sigmoid(z)).collect();
    let mut inter = F::zero();
    let mut denom = eps;
    for (&pi, &g) in p.iter().zip(gt) {
        let gi = if g { F::one() } else { F::zero() };
        inter += pi * gi;
        denom += pi + gi;
    }
    let numer = c::<F>(2.0) * inter + eps;
    let loss = F::one() - numer / denom;
    let grad = p
        .iter()
        .zip(gt)
        .map(|(&pi, &g)| {
            let gi = if g { F::one() } else { F::zero() };
            let d_p = -(c::<F>(2.0) * gi * denom - numer) / (denom * denom);
            d_p * pi * (F::one() - pi)
        })
        .collect();
    Ok((loss, grad))
}

pub fn dice_loss<F: NdFloat>(logits: ArrayView1<'_, F>, gt: &[bool], smoothing: f64) -> Result<F> {
    dice_loss_grad(logits, gt, smoothing).map(|(l, _)| l)
}

/// Dice evaluated directly on probabilities, for hard 0/1 predictions.
pub fn dice_on_probabilities(p: &[f64], gt: &[bool], smoothing: f64) -> f64 {
    let inter: f64 = p.iter().zip(gt).map(|(&pi, &g)| if g { pi } else { 0.0 }).sum();
    let sp: f64 = p.iter().sum();
    let sg = gt.iter().filter(|&&g| g).count() as f64;
    1.0 - (2.0 * inter + smoothing) / (sp + sg + smoothing)
}

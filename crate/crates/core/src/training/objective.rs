//! Teacher-forced joint objective `L = L_text + L_mask` with gradients.

use std::ops::Range;

use ndarray::{s, Array2, Axis, NdFloat};

use crate::attention_mask::{construct_causal_mask, teacher_forced_mask, HybridAttentionMask};
use crate::dataset::SyntheticSample;
use crate::error::{invalid, Result};
use crate::model::{
    assemble_rows, backward, classify_patches, classify_patches_backward, forward_train,
    lm_logits, lm_logits_backward, scatter_row_grads, Fusion, Parameters, RowSource,
};
use crate::pipeline::Paradigm;
use crate::vocab::{TokenId, TokenSequence, Vocabulary, SEG};
use crate::world::flatten_patches;

use super::loss::{bce_loss_grad, dice_loss_grad, text_loss_grad, DICE_SMOOTHING};

/// Batch-mean losses. `l_bce` and `l_dice` average over samples that have a
/// target; `l_text` averages over all samples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_text: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub l_mask: f64,
    pub l_total: f64,
    pub token_count: usize,
    pub patch_count: usize,
}

/// Response used to train the next-token baseline: one `fg`/`bg` word per
/// patch in row-major order, inserted right after `<seg>`.
pub fn next_token_response(response: &[TokenId], gt_mask: &[bool], vocab: &Vocabulary) -> TokenSequence {
    match response.iter().position(|&t| t == SEG) {
        None => response.to_vec(),
        Some(s) => {
            let mut out = response[..=s].to_vec();
            out.extend(gt_mask.iter().map(|&g| if g { vocab.fg() } else { vocab.bg() }));
            out.extend_from_slice(&response[s + 1..]);
            out
        }
    }
}

/// Row sources, attention mask and supervision targets for one sample.
#[derive(Debug, Clone)]
pub struct SampleLayout {
    pub sources: Vec<RowSource>,
    pub mask: HybridAttentionMask,
    /// `(row whose logits predict the token, target token)`.
    pub text_targets: Vec<(usize, TokenId)>,
    /// Placeholder rows, present when the sample trains the mask head.
    pub mask_rows: Option<Range<usize>>,
    pub fusion: Fusion,
}

/// Lays a sample out as `[patches | instruction | response ...]`.
///
/// For the all-mask paradigm with a target, the placeholders are spliced in
/// right after the first `<seg>`: `[patches | text up to <seg> | N
/// placeholders | rest of response]` under [`teacher_forced_mask`], whose
/// leading block is the inference-time hybrid mask.
pub fn sample_layout(sample: &SyntheticSample, paradigm: Paradigm, vocab: &Vocabulary) -> Result<SampleLayout> {
    let n = sample.grid_side() * sample.grid_side();
    let response = match paradigm {
        Paradigm::NextToken => next_token_response(&sample.response, &sample.gt_mask, vocab),
        Paradigm::AllMask(_) => sample.response.clone(),
    };
    let text: Vec<TokenId> = sample.instruction.iter().chain(&response).copied().collect();
    let instr_len = sample.instruction.len();
    if instr_len == 0 {
        return Err(invalid("instruction must not be empty"));
    }
    let seg_at = match paradigm {
        Paradigm::AllMask(_) if sample.has_target() => response.iter().position(|&t| t == SEG),
        _ => None,
    };

    let mut sources: Vec<RowSource> = (0..n).map(RowSource::Patch).collect();
    let text_src = |(position, &token): (usize, &TokenId)| RowSource::Text { token, position };
    let (mask, text_row, mask_rows, fusion) = match (paradigm, seg_at) {
        (Paradigm::AllMask(variant), Some(s)) => {
            let hist_text = instr_len + s + 1;
            sources.extend(text.iter().enumerate().take(hist_text).map(text_src));
            sources.extend((0..n).map(RowSource::MaskSlot));
            sources.extend(text.iter().enumerate().skip(hist_text).map(text_src));
            let h = n + hist_text;
            let tail = text.len() - hist_text;
            let mask = teacher_forced_mask(h, n, tail, variant.block)?;
            let row_of = move |u: usize| if u < hist_text { n + u } else { n + u + n };
            (mask, Box::new(row_of) as Box<dyn Fn(usize) -> usize>, Some(h..h + n), variant.fusion)
        }
        (paradigm, _) => {
            sources.extend(text.iter().enumerate().map(text_src));
            let mask = construct_causal_mask(sources.len())?;
            let fusion = match paradigm {
                Paradigm::AllMask(v) => v.fusion,
                Paradigm::NextToken => Fusion::Full,
            };
            (mask, Box::new(move |u: usize| n + u) as Box<dyn Fn(usize) -> usize>, None, fusion)
        }
    };
    let text_targets = (instr_len..text.len()).map(|u| (text_row(u - 1), text[u])).collect();
    Ok(SampleLayout {
        sources,
        mask,
        text_targets,
        mask_rows,
        fusion,
    })
}

struct SampleLoss {
    l_text: f64,
    mask: Option<(f64, f64)>,
    tokens: usize,
    patches: usize,
}

/// Forward (and optionally backward) for one sample. Gradients are scaled by
/// `text_weight` and `mask_weight` and accumulated into `grads`.
fn sample_pass<F: NdFloat>(
    params: &Parameters<F>,
    sample: &SyntheticSample,
    paradigm: Paradigm,
    vocab: &Vocabulary,
    grads: Option<(&mut Parameters<F>, F, F)>,
) -> Result<SampleLoss> {
    let layout = sample_layout(sample, paradigm, vocab)?;
    let p = sample.grid_side();
    let flat = flatten_patches::<F>(&sample.pixels, p)?;
    let grid = params.patch_features(&sample.pixels, p)?;
    let rows = assemble_rows(params, Some(&grid), &layout.sources, layout.fusion)?;
    let (hidden, tape) = forward_train(params, rows.view(), &layout.mask)?;

    let text_rows: Vec<usize> = layout.text_targets.iter().map(|&(r, _)| r).collect();
    let targets: Vec<TokenId> = layout.text_targets.iter().map(|&(_, t)| t).collect();
    let h_text = hidden.select(Axis(0), &text_rows);
    let logits = lm_logits(params, &h_text);
    let (l_text, d_logits) = text_loss_grad(logits.view(), &targets)?;

    let mut mask_out = None;
    let mut d_mask_logits = None;
    if let Some(range) = &layout.mask_rows {
        let z = hidden.slice(s![range.clone(), ..]);
        let patch_logits = classify_patches(params, z);
        let (bce, d_bce) = bce_loss_grad(patch_logits.view(), &sample.gt_mask)?;
        let (dice, d_dice) = dice_loss_grad(patch_logits.view(), &sample.gt_mask, DICE_SMOOTHING)?;
        mask_out = Some((bce.to_f64().unwrap(), dice.to_f64().unwrap()));
        d_mask_logits = Some(d_bce + d_dice);
    }

    if let Some((grads, text_weight, mask_weight)) = grads {
        let mut d_hidden = Array2::<F>::zeros(hidden.raw_dim());
        let d_text = lm_logits_backward(params, h_text.view(), &(d_logits * text_weight), grads);
        for (&r, drow) in text_rows.iter().zip(d_text.rows()) {
            let mut dst = d_hidden.row_mut(r);
            dst += &drow;
        }
        if let (Some(range), Some(d_ml)) = (&layout.mask_rows, d_mask_logits) {
            let z = hidden.slice(s![range.clone(), ..]);
            let d_ml = d_ml * mask_weight;
            let dz = classify_patches_backward(params, z, d_ml.view(), grads);
            let mut dst = d_hidden.slice_mut(s![range.clone(), ..]);
            dst += &dz;
        }
        let d_rows = backward(params, &tape, &d_hidden, grads);
        let d_features = scatter_row_grads(grads, p, &layout.sources, &d_rows, layout.fusion);
        grads.patch_weight += &flat.t().dot(&d_features);
        grads.patch_bias += &d_features.sum_axis(Axis(0));
    }

    Ok(SampleLoss {
        l_text: l_text.to_f64().unwrap(),
        mask: mask_out,
        tokens: targets.len(),
        patches: if layout.mask_rows.is_some() { sample.gt_mask.len() } else { 0 },
    })
}

fn run_batch<F: NdFloat>(
    params: &Parameters<F>,
    batch: &[&SyntheticSample],
    paradigm: Paradigm,
    vocab: &Vocabulary,
    mut grads: Option<&mut Parameters<F>>,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(invalid("batch must not be empty"));
    }
    let with_mask = match paradigm {
        Paradigm::AllMask(_) => batch.iter().filter(|s| s.has_target()).count(),
        Paradigm::NextToken => 0,
    };
    let text_weight = F::one() / F::from(batch.len()).unwrap();
    let mask_weight = if with_mask > 0 {
        F::one() / F::from(with_mask).unwrap()
    } else {
        F::zero()
    };
    let mut report = LossReport::default();
    // Fixed summation order: samples in batch order.
    for sample in batch {
        let g = grads.as_deref_mut().map(|g| (g, text_weight, mask_weight));
        let out = sample_pass(params, sample, paradigm, vocab, g)?;
        report.l_text += out.l_text;
        report.token_count += out.tokens;
        report.patch_count += out.patches;
        if let Some((bce, dice)) = out.mask {
            report.l_bce += bce;
            report.l_dice += dice;
        }
    }
    report.l_text /= batch.len() as f64;
    if with_mask > 0 {
        report.l_bce /= with_mask as f64;
        report.l_dice /= with_mask as f64;
    }
    report.l_mask = report.l_bce + report.l_dice;
    report.l_total = report.l_text + report.l_mask;
    Ok(report)
}

/// Losses for a batch without gradients.
pub fn total_loss<F: NdFloat>(
    params: &Parameters<F>,
    batch: &[&SyntheticSample],
    paradigm: Paradigm,
    vocab: &Vocabulary,
) -> Result<LossReport> {
    run_batch(params, batch, paradigm, vocab, None)
}

/// Losses for a batch and the gradient of `l_total` for every parameter.
pub fn loss_and_grad<F: NdFloat>(
    params: &Parameters<F>,
    batch: &[&SyntheticSample],
    paradigm: Paradigm,
    vocab: &Vocabulary,
) -> Result<(LossReport, Parameters<F>)> {
    let mut grads = params.zeros_like();
    let report = run_batch(params, batch, paradigm, vocab, Some(&mut grads))?;
    Ok((report, grads))
}

//! Two-phase inference: greedy text generation that snapshots the cache at
//! every `<seg>`, then one non-autoregressive pass per snapshot that predicts
//! all patch labels at once. Also hosts the patch-by-patch baseline.

use std::fmt;

use ndarray::{s, Array2, Array3, ArrayView1, NdFloat};

use crate::attention_mask::{block_mask_with_cache, causal_mask_with_cache, construct_block_mask, construct_causal_mask, BlockAttention};
use crate::error::{invalid, Error, Result};
use crate::model::{
    assemble_rows, classify_patches, forward_call_count, fuse_mask_embeddings_with, transformer_forward, Fusion,
    LayerCacheSet, Parameters, RowSource,
};
use crate::refine::refine_prediction;
use crate::vocab::{TokenId, TokenSequence, Vocabulary, EOS, MASK, SEG};
use crate::world::PatchFeatureGrid;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 32;
pub const DEFAULT_COLOR_TOLERANCE: f64 = 0.1;

/// Attention and fusion choices for the placeholder pass. The default is the
/// full method; the two ablations each switch one part off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AllMaskVariant {
    pub block: BlockAttention,
    pub fusion: Fusion,
}

impl AllMaskVariant {
    pub fn no_hybrid() -> Self {
        AllMaskVariant {
            block: BlockAttention::Causal,
            ..Self::default()
        }
    }

    pub fn no_fusion() -> Self {
        AllMaskVariant {
            fusion: Fusion::PositionOnly,
            ..Self::default()
        }
    }

    pub fn label(&self) -> &'static str {
        match (self.block, self.fusion) {
            (BlockAttention::Bidirectional, Fusion::Full) => "full",
            (BlockAttention::Causal, Fusion::Full) => "no-hybrid",
            (BlockAttention::Bidirectional, Fusion::PositionOnly) => "no-fusion",
            (BlockAttention::Causal, Fusion::PositionOnly) => "no-hybrid+no-fusion",
        }
    }
}

/// How masks are produced and therefore how a model is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Paradigm {
    AllMask(AllMaskVariant),
    /// One `fg`/`bg` word per patch, generated token by token.
    NextToken,
}

impl Default for Paradigm {
    fn default() -> Self {
        Paradigm::AllMask(AllMaskVariant::default())
    }
}

/// State right after `<seg>` was fed: the history that led to it and the
/// cache over `[patches ++ hist]`.
#[derive(Debug, Clone)]
pub struct SegCapture<F> {
    /// Instruction plus generated tokens, ending with `<seg>`.
    pub hist: TokenSequence,
    pub cache: LayerCacheSet<F>,
    pub grid_side: usize,
}

impl<F: NdFloat> SegCapture<F> {
    /// Prefix length `H`: patches plus history tokens.
    pub fn prefix_len(&self) -> usize {
        self.grid_side * self.grid_side + self.hist.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    pub grid_side: usize,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub binary: Vec<bool>,
    /// Patch-level mask after region growing, when refinement ran.
    pub refined: Option<Vec<bool>>,
}

impl MaskPrediction {
    pub fn from_logits(grid_side: usize, logits: Vec<f64>) -> Self {
        let probabilities: Vec<f64> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        let binary = probabilities.iter().map(|&p| p > 0.5).collect();
        MaskPrediction {
            grid_side,
            logits,
            probabilities,
            binary,
            refined: None,
        }
    }

    fn from_array<F: NdFloat>(grid_side: usize, logits: ArrayView1<'_, F>) -> Self {
        Self::from_logits(grid_side, logits.iter().map(|v| v.to_f64().unwrap()).collect())
    }

    /// Patch-level binary mask with a binary prediction (no logits).
    pub fn from_binary(grid_side: usize, binary: &[bool]) -> Self {
        let logits = binary.iter().map(|&b| if b { 10.0 } else { -10.0 }).collect();
        Self::from_logits(grid_side, logits)
    }

    /// Refined mask if present, otherwise the coarse one.
    pub fn final_mask(&self) -> &[bool] {
        self.refined.as_deref().unwrap_or(&self.binary)
    }

    pub fn foreground_count(&self) -> usize {
        self.binary.iter().filter(|&&b| b).count()
    }

    /// `#` for foreground, `.` for background, one grid row per line.
    pub fn render(&self) -> String {
        render_grid(self.final_mask(), self.grid_side)
    }
}

pub fn render_grid(mask: &[bool], grid_side: usize) -> String {
    let mut out = String::with_capacity(mask.len() + grid_side);
    for row in mask.chunks(grid_side.max(1)) {
        out.extend(row.iter().map(|&b| if b { '#' } else { '.' }));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    /// Generated tokens (instruction excluded), ending with `<eos>` unless
    /// the token budget ran out.
    pub response: TokenSequence,
    pub masks: Vec<MaskPrediction>,
    pub phase1_steps: usize,
    pub phase2_calls: usize,
}

impl PipelineResult {
    /// Forward steps the patch-by-patch paradigm would need for the same masks.
    pub fn baseline_equivalent_steps(&self) -> usize {
        self.masks.iter().map(|m| m.grid_side * m.grid_side).sum()
    }

    pub fn summary_line(&self) -> String {
        format!(
            "phase1={} phase2={} baseline_equiv={}",
            self.phase1_steps,
            self.phase2_calls,
            self.baseline_equivalent_steps()
        )
    }

    /// Response text, one grid per mask, then the step summary.
    pub fn render(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        let text = vocab.decode_str(&self.response).unwrap_or_else(|e| format!("<{e}>"));
        out.push_str(&text);
        out.push('\n');
        for m in &self.masks {
            out.push_str(&m.render());
        }
        out.push_str(&self.summary_line());
        out.push('\n');
        out
    }
}

impl fmt::Display for MaskPrediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub max_new_tokens: usize,
    pub variant: AllMaskVariant,
    pub refine: bool,
    pub color_tolerance: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            variant: AllMaskVariant::default(),
            refine: false,
            color_tolerance: DEFAULT_COLOR_TOLERANCE,
        }
    }
}

/// Greedy choice with the lowest id winning ties.
pub fn argmax_token<F: NdFloat>(logits: ArrayView1<'_, F>) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

fn check_instruction(instruction: &[TokenId]) -> Result<()> {
    if instruction.is_empty() {
        return Err(invalid("instruction must not be empty"));
    }
    if instruction.contains(&MASK) {
        return Err(invalid("instruction contains the [mask] token"));
    }
    Ok(())
}

fn prefix_sources(grid_side: usize, text: &[TokenId]) -> Vec<RowSource> {
    let n = grid_side * grid_side;
    (0..n)
        .map(RowSource::Patch)
        .chain(text.iter().enumerate().map(|(position, &token)| RowSource::Text { token, position }))
        .collect()
}

/// Runs the causal prefix pass and returns the cache and the logits of the
/// last row.
fn prefill<F: NdFloat>(
    params: &Parameters<F>,
    instruction: &[TokenId],
    grid: &PatchFeatureGrid<F>,
) -> Result<(LayerCacheSet<F>, ndarray::Array1<F>)> {
    let rows = assemble_rows(params, Some(grid), &prefix_sources(grid.grid_side, instruction), Fusion::Full)?;
    let mask = construct_causal_mask(rows.nrows())?;
    let mut cache = LayerCacheSet::for_params(params);
    let out = transformer_forward(params, rows.view(), &mask, &mut cache, true)?;
    let logits = out.lm_logits.unwrap();
    Ok((cache, logits.row(logits.nrows() - 1).to_owned()))
}

/// Feeds one text token at `position` and returns its logits.
fn feed<F: NdFloat>(
    params: &Parameters<F>,
    cache: &mut LayerCacheSet<F>,
    token: TokenId,
    position: usize,
) -> Result<ndarray::Array1<F>> {
    let rows = assemble_rows(params, None, &[RowSource::Text { token, position }], Fusion::Full)?;
    let mask = causal_mask_with_cache(cache.cached_len(), 1)?;
    let out = transformer_forward(params, rows.view(), &mask, cache, true)?;
    Ok(out.lm_logits.unwrap().row(0).to_owned())
}

/// Greedy decoding after a `[patches ++ instruction]` prefix.
///
/// Stops at `<eos>` or after `max_new_tokens`. Every emitted `<seg>` is fed
/// back immediately and the cache is snapshotted, so each capture holds the
/// `<seg>` key/value as its last entry.
pub fn generate_autoregressive<F: NdFloat>(
    params: &Parameters<F>,
    instruction: &[TokenId],
    grid: &PatchFeatureGrid<F>,
    max_new_tokens: usize,
) -> Result<(TokenSequence, Vec<SegCapture<F>>)> {
    if max_new_tokens == 0 {
        return Err(invalid("max_new_tokens must be >= 1"));
    }
    check_instruction(instruction)?;
    let (mut cache, mut logits) = prefill(params, instruction, grid)?;
    let mut hist = instruction.to_vec();
    let mut captures = Vec::new();
    let mut generated = Vec::new();
    loop {
        let token = argmax_token(logits.view());
        generated.push(token);
        hist.push(token);
        let done = token == EOS || generated.len() == max_new_tokens;
        if done && token != SEG {
            break;
        }
        logits = feed(params, &mut cache, token, hist.len() - 1)?;
        if token == SEG {
            captures.push(SegCapture {
                hist: hist.clone(),
                cache: cache.clone(),
                grid_side: grid.grid_side,
            });
        }
        if done {
            break;
        }
    }
    Ok((generated, captures))
}

/// Placeholder pass on top of a capture. Returns `Z_mask` and the prediction.
/// The capture itself is left untouched.
pub fn all_mask_forward<F: NdFloat>(
    params: &Parameters<F>,
    capture: &SegCapture<F>,
    grid: &PatchFeatureGrid<F>,
    variant: AllMaskVariant,
) -> Result<(Array2<F>, MaskPrediction)> {
    let n = grid.num_patches();
    if n > params.config.max_patches() {
        return Err(Error::Capacity(format!(
            "{n} placeholders exceed the model's {} patch slots",
            params.config.max_patches()
        )));
    }
    if grid.grid_side != capture.grid_side {
        return Err(invalid("capture and patch grid disagree on grid side"));
    }
    let h = capture.prefix_len();
    if capture.cache.cached_len() != h {
        return Err(invalid(format!(
            "capture cache holds {} entries, prefix has {h}",
            capture.cache.cached_len()
        )));
    }
    let rows = fuse_mask_embeddings_with(params, grid, variant.fusion)?;
    let mask = block_mask_with_cache(h, n, variant.block)?;
    let mut cache = capture.cache.clone();
    let out = transformer_forward(params, rows.view(), &mask, &mut cache, false)?;
    let logits = classify_patches(params, out.hidden.view());
    let pred = MaskPrediction::from_array(grid.grid_side, logits.view());
    Ok((out.hidden, pred))
}

/// Exactly one transformer call, whatever the number of patches.
pub fn all_mask_generate<F: NdFloat>(
    params: &Parameters<F>,
    capture: &SegCapture<F>,
    grid: &PatchFeatureGrid<F>,
    variant: AllMaskVariant,
) -> Result<MaskPrediction> {
    Ok(all_mask_forward(params, capture, grid, variant)?.1)
}

/// Reference computation without any cache: one forward over
/// `[patches ++ hist ++ placeholders]` with the full block mask.
pub fn full_forward_all_mask<F: NdFloat>(
    params: &Parameters<F>,
    hist: &[TokenId],
    grid: &PatchFeatureGrid<F>,
    variant: AllMaskVariant,
) -> Result<(Array2<F>, MaskPrediction)> {
    let n = grid.num_patches();
    let mut sources = prefix_sources(grid.grid_side, hist);
    let h = sources.len();
    sources.extend((0..n).map(RowSource::MaskSlot));
    let rows = assemble_rows(params, Some(grid), &sources, variant.fusion)?;
    let mask = construct_block_mask(h, n, variant.block)?;
    let mut cache = LayerCacheSet::for_params(params);
    let out = transformer_forward(params, rows.view(), &mask, &mut cache, false)?;
    let z = out.hidden.slice(s![h.., ..]).to_owned();
    let logits = classify_patches(params, z.view());
    let pred = MaskPrediction::from_array(grid.grid_side, logits.view());
    Ok((z, pred))
}

/// Both phases end to end on one image.
pub fn run_pipeline<F: NdFloat>(
    params: &Parameters<F>,
    pixels: &Array3<f32>,
    grid_side: usize,
    instruction: &[TokenId],
    options: &PipelineOptions,
) -> Result<PipelineResult> {
    let grid = params.patch_features(pixels, grid_side)?;
    let (response, captures) = generate_autoregressive(params, instruction, &grid, options.max_new_tokens)?;
    let mut masks = Vec::with_capacity(captures.len());
    for capture in &captures {
        let mut pred = all_mask_generate(params, capture, &grid, options.variant)?;
        if options.refine {
            pred.refined = refine_prediction(pixels, &pred, options.color_tolerance)?;
        }
        masks.push(pred);
    }
    Ok(PipelineResult {
        phase1_steps: response.len(),
        phase2_calls: masks.len(),
        response,
        masks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome {
    pub prediction: MaskPrediction,
    /// Forward calls spent on patch words, always `N`.
    pub steps: usize,
    /// Emitted tokens that were neither `fg` nor `bg` (those patches default
    /// to background).
    pub decoding_errors: usize,
    /// Text generated before `<seg>`.
    pub response_prefix: TokenSequence,
    /// False when `<seg>` had to be forced.
    pub seg_emitted: bool,
}

/// Greedy text decoding that stops just before `<seg>` would be fed, either
/// because the model chose it or because it hit `<eos>` or the budget.
struct Prefix<F> {
    cache: LayerCacheSet<F>,
    hist: Vec<TokenId>,
    response_prefix: Vec<TokenId>,
    seg_emitted: bool,
}

fn decode_until_seg<F: NdFloat>(
    params: &Parameters<F>,
    instruction: &[TokenId],
    grid: &PatchFeatureGrid<F>,
    max_new_tokens: usize,
) -> Result<Prefix<F>> {
    check_instruction(instruction)?;
    let (mut cache, mut logits) = prefill(params, instruction, grid)?;
    let mut hist = instruction.to_vec();
    let mut response_prefix = Vec::new();
    let mut seg_emitted = false;
    while response_prefix.len() < max_new_tokens {
        let token = argmax_token(logits.view());
        if token == SEG || token == EOS {
            seg_emitted = token == SEG;
            break;
        }
        response_prefix.push(token);
        hist.push(token);
        logits = feed(params, &mut cache, token, hist.len() - 1)?;
    }
    Ok(Prefix { cache, hist, response_prefix, seg_emitted })
}

/// Decodes up to the first `<seg>`, forcing it when the model would stop
/// without one. Returns the capture and whether `<seg>` was the model's own
/// choice. Both benchmark modes start from this prefix.
pub fn forced_seg_capture<F: NdFloat>(
    params: &Parameters<F>,
    instruction: &[TokenId],
    grid: &PatchFeatureGrid<F>,
    max_new_tokens: usize,
) -> Result<(SegCapture<F>, bool)> {
    let Prefix { mut cache, mut hist, seg_emitted, .. } =
        decode_until_seg(params, instruction, grid, max_new_tokens)?;
    hist.push(SEG);
    feed(params, &mut cache, SEG, hist.len() - 1)?;
    Ok((SegCapture { hist, cache, grid_side: grid.grid_side }, seg_emitted))
}

/// Patch-by-patch segmentation with a model trained on `fg`/`bg` words.
///
/// Text is decoded greedily until `<seg>`; if the model never emits one
/// within `max_new_tokens`, `<seg>` is forced. Then one `fg`/`bg` word per
/// patch is read off in row-major order, one forward call each.
pub fn baseline_next_token_segment<F: NdFloat>(
    params: &Parameters<F>,
    instruction: &[TokenId],
    grid: &PatchFeatureGrid<F>,
    vocab: &Vocabulary,
    max_new_tokens: usize,
) -> Result<BaselineOutcome> {
    let n = grid.num_patches();
    let Prefix { mut cache, mut hist, response_prefix, seg_emitted } =
        decode_until_seg(params, instruction, grid, max_new_tokens)?;
    let (fg, bg) = (vocab.fg(), vocab.bg());
    let mut last = SEG;
    let mut binary = Vec::with_capacity(n);
    let mut decoding_errors = 0;
    let start = forward_call_count();
    for _ in 0..n {
        hist.push(last);
        let logits = feed(params, &mut cache, last, hist.len() - 1)?;
        let word = argmax_token(logits.view());
        if word != fg && word != bg {
            decoding_errors += 1;
        }
        binary.push(word == fg);
        last = word;
    }
    let steps = (forward_call_count() - start) as usize;
    Ok(BaselineOutcome {
        prediction: MaskPrediction::from_binary(grid.grid_side, &binary),
        steps,
        decoding_errors,
        response_prefix,
        seg_emitted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SyntheticSample;
    use crate::model::{init_parameters, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            heads: 2,
            mlp_hidden: 32,
            layers: 2,
            ..ModelConfig::default()
        }
    }

    fn sample(p: usize) -> SyntheticSample {
        let vocab = Vocabulary::toy();
        (0..)
            .map(|seed| SyntheticSample::generate(seed, p, false, 4, &vocab).unwrap())
            .find(SyntheticSample::has_target)
            .unwrap()
    }

    /// lm head that always prefers `token` by a wide margin.
    fn rigged(token: TokenId) -> Parameters<f64> {
        let mut p = init_parameters::<f64>(&small()).unwrap();
        p.lm_weight.fill(0.0);
        p.lm_bias.fill(0.0);
        p.lm_bias[token as usize] = 50.0;
        p
    }

    #[test]
    fn greedy_repeats_the_rigged_token() {
        let vocab = Vocabulary::toy();
        let t = vocab.id("red").unwrap();
        let params = rigged(t);
        let s = sample(4);
        let grid = params.patch_features(&s.pixels, 4).unwrap();
        let (out, caps) = generate_autoregressive(&params, &s.instruction, &grid, 7).unwrap();
        assert_eq!(out, vec![t; 7]);
        assert!(caps.is_empty());
    }

    #[test]
    fn every_seg_is_captured() {
        let params = rigged(SEG);
        let s = sample(4);
        let grid = params.patch_features(&s.pixels, 4).unwrap();
        let (out, caps) = generate_autoregressive(&params, &s.instruction, &grid, 2).unwrap();
        assert_eq!(out, vec![SEG, SEG]);
        assert_eq!(caps.len(), 2);
        for c in &caps {
            assert_eq!(*c.hist.last().unwrap(), SEG);
            assert_eq!(c.cache.cached_len(), c.prefix_len());
        }
        let r = run_pipeline(&params, &s.pixels, 4, &s.instruction, &PipelineOptions {
            max_new_tokens: 2,
            ..PipelineOptions::default()
        })
        .unwrap();
        assert_eq!(r.masks.len(), 2);
        assert_eq!((r.phase1_steps, r.phase2_calls), (2, 2));
        assert_eq!(r.summary_line(), "phase1=2 phase2=2 baseline_equiv=32");
    }

    #[test]
    fn eos_first_gives_no_masks() {
        let params = rigged(EOS);
        let s = sample(4);
        let r = run_pipeline(&params, &s.pixels, 4, &s.instruction, &PipelineOptions::default()).unwrap();
        assert_eq!(r.response, vec![EOS]);
        assert!(r.masks.is_empty());
        assert_eq!((r.phase1_steps, r.phase2_calls), (1, 0));
    }

    #[test]
    fn mask_token_in_instruction_rejected() {
        let params = rigged(EOS);
        let s = sample(4);
        let grid = params.patch_features(&s.pixels, 4).unwrap();
        let mut instr = s.instruction.clone();
        instr.push(MASK);
        let err = generate_autoregressive(&params, &instr, &grid, 4).unwrap_err();
        assert_eq!(err.kind(), "invalid-argument");
        assert!(generate_autoregressive(&params, &s.instruction, &grid, 0).is_err());
    }

    #[test]
    fn tie_break_prefers_lowest_id() {
        let logits = ndarray::arr1(&[0.0, 3.0, 3.0, 1.0]);
        assert_eq!(argmax_token(logits.view()), 1);
    }

    #[test]
    fn one_forward_call_per_capture_for_any_grid() {
        for p in [4, 8, 16] {
            let params = rigged(SEG);
            let s = sample(p);
            let grid = params.patch_features(&s.pixels, p).unwrap();
            let (_, caps) = generate_autoregressive(&params, &s.instruction, &grid, 1).unwrap();
            let before = forward_call_count();
            let pred = all_mask_generate(&params, &caps[0], &grid, AllMaskVariant::default()).unwrap();
            assert_eq!(forward_call_count() - before, 1, "P={p}");
            assert_eq!(pred.binary.len(), p * p);
        }
    }

    #[test]
    fn cached_pass_matches_full_forward() {
        let mut params = rigged(SEG);
        // uniform weights would give logits of exactly zero: layer-norm rows sum to zero
        for (i, w) in params.classifier_weight.iter_mut().enumerate() {
            *w = ((i * 7) % 5) as f64 - 2.0;
        }
        for variant in [AllMaskVariant::default(), AllMaskVariant::no_hybrid(), AllMaskVariant::no_fusion()] {
            let s = sample(5);
            let grid = params.patch_features(&s.pixels, 5).unwrap();
            let (_, caps) = generate_autoregressive(&params, &s.instruction, &grid, 1).unwrap();
            let (z1, m1) = all_mask_forward(&params, &caps[0], &grid, variant).unwrap();
            let (z2, m2) = full_forward_all_mask(&params, &caps[0].hist, &grid, variant).unwrap();
            let diff = (&z1 - &z2).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-9, "{variant:?} {diff}");
            assert_eq!(m1.binary, m2.binary);
        }
    }

    #[test]
    fn negative_bias_gives_empty_mask() {
        let mut params = rigged(SEG);
        params.classifier_weight.fill(0.0);
        params.classifier_bias[0] = -5.0;
        let s = sample(4);
        let r = run_pipeline(&params, &s.pixels, 4, &s.instruction, &PipelineOptions {
            max_new_tokens: 1,
            ..PipelineOptions::default()
        })
        .unwrap();
        assert!(r.masks[0].binary.iter().all(|&b| !b));
        assert!(r.masks[0].probabilities.iter().all(|&p| p > 0.0 && p < 0.5));
    }

    #[test]
    fn capture_cache_is_not_mutated() {
        let params = rigged(SEG);
        let s = sample(4);
        let grid = params.patch_features(&s.pixels, 4).unwrap();
        let (_, caps) = generate_autoregressive(&params, &s.instruction, &grid, 1).unwrap();
        let before = caps[0].cache.clone();
        all_mask_generate(&params, &caps[0], &grid, AllMaskVariant::default()).unwrap();
        assert_eq!(caps[0].cache, before);
    }

    #[test]
    fn baseline_takes_n_steps() {
        let vocab = Vocabulary::toy();
        for p in [4, 16] {
            let params = rigged(vocab.fg());
            let s = sample(p);
            let grid = params.patch_features(&s.pixels, p).unwrap();
            let out = baseline_next_token_segment(&params, &s.instruction, &grid, &vocab, 4).unwrap();
            assert_eq!(out.steps, p * p);
            assert_eq!(out.decoding_errors, 0);
            assert!(out.prediction.binary.iter().all(|&b| b));
        }
        let params = rigged(vocab.id("red").unwrap());
        let s = sample(4);
        let grid = params.patch_features(&s.pixels, 4).unwrap();
        let out = baseline_next_token_segment(&params, &s.instruction, &grid, &vocab, 4).unwrap();
        assert_eq!(out.decoding_errors, 16);
        assert!(out.prediction.binary.iter().all(|&b| !b));
        assert_eq!(out.response_prefix.len(), 4);
        assert!(!out.seg_emitted);
    }

    #[test]
    fn forced_capture_matches_a_natural_one() {
        let s = sample(4);
        let natural = rigged(SEG);
        let grid = natural.patch_features(&s.pixels, 4).unwrap();
        let (_, caps) = generate_autoregressive(&natural, &s.instruction, &grid, 1).unwrap();
        let (forced, emitted) = forced_seg_capture(&natural, &s.instruction, &grid, 8).unwrap();
        assert!(emitted);
        assert_eq!(forced.hist, caps[0].hist);
        assert_eq!(forced.cache.cached_len(), forced.prefix_len());

        let eos = rigged(EOS);
        let (forced, emitted) = forced_seg_capture(&eos, &s.instruction, &grid, 8).unwrap();
        assert!(!emitted);
        assert_eq!(forced.hist.last(), Some(&SEG));
        assert_eq!(forced.cache.cached_len(), forced.prefix_len());
    }

    #[test]
    fn render_format() {
        let m = MaskPrediction::from_binary(2, &[true, false, false, true]);
        assert_eq!(m.render(), "#.\n.#\n");
    }
}

//! IoU metrics, evaluation over a split, step accounting and wall-clock
//! benchmarks.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use ndarray::NdFloat;

use crate::dataset::SyntheticSample;
use crate::error::{invalid, Error, Result};
use crate::model::{forward_call_count, Parameters};
use crate::pipeline::{
    all_mask_generate, baseline_next_token_segment, forced_seg_capture, render_grid, run_pipeline, AllMaskVariant, PipelineOptions, PipelineResult,
    DEFAULT_COLOR_TOLERANCE, DEFAULT_MAX_NEW_TOKENS,
};
use crate::refine::refine_prediction;
use crate::vocab::Vocabulary;

/// `|pred ∧ gt| / |pred ∨ gt|`, with two empty masks scoring 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

pub fn intersection_union(pred: &[bool], gt: &[bool]) -> Result<(usize, usize)> {
    if pred.len() != gt.len() {
        return Err(invalid(format!("mask lengths differ: {} vs {}", pred.len(), gt.len())));
    }
    let i = pred.iter().zip(gt).filter(|&(&p, &g)| p && g).count();
    let u = pred.iter().zip(gt).filter(|&(&p, &g)| p || g).count();
    Ok((i, u))
}

/// How masks are produced during evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    AllMask { variant: AllMaskVariant, refine: bool },
    NextToken,
}

impl Default for EvalMode {
    fn default() -> Self {
        EvalMode::AllMask {
            variant: AllMaskVariant::default(),
            refine: false,
        }
    }
}

impl EvalMode {
    pub fn tag(&self) -> String {
        match self {
            EvalMode::AllMask { variant, refine } => {
                let mut s = String::from("allmask");
                if *refine {
                    s.push_str("+refine");
                }
                if variant.label() != "full" {
                    s.push(':');
                    s.push_str(variant.label());
                }
                s
            }
            EvalMode::NextToken => "nexttoken".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub seed: u64,
    pub grid_side: usize,
    pub pred: Vec<bool>,
    pub gt: Vec<bool>,
    pub intersection: usize,
    pub union: usize,
    pub iou: f64,
    /// `<seg>` tokens the model emitted.
    pub seg_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepTotals {
    pub phase1: usize,
    pub phase2: usize,
    pub baseline: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: String,
    pub samples: Vec<SampleEval>,
    pub giou: f64,
    pub ciou: f64,
    pub steps: StepTotals,
}

impl EvalReport {
    pub fn from_samples(mode: String, samples: Vec<SampleEval>, steps: StepTotals) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("evaluation needs at least one sample"));
        }
        let giou = samples.iter().map(|s| s.iou).sum::<f64>() / samples.len() as f64;
        let i: usize = samples.iter().map(|s| s.intersection).sum();
        let u: usize = samples.iter().map(|s| s.union).sum();
        let ciou = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        Ok(EvalReport {
            mode,
            samples,
            giou,
            ciou,
            steps,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// One row per sample: `seed,grid_side,iou,intersection,union,seg_count,pred,gt`
    /// with masks as row-major `0`/`1` strings.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "seed,grid_side,iou,intersection,union,seg_count,pred,gt")?;
        let bits = |m: &[bool]| m.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>();
        for s in &self.samples {
            writeln!(
                out,
                "{},{},{:.6},{},{},{},{},{}",
                s.seed,
                s.grid_side,
                s.iou,
                s.intersection,
                s.union,
                s.seg_count,
                bits(&s.pred),
                bits(&s.gt)
            )?;
        }
        Ok(())
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode      {}", self.mode);
        let _ = writeln!(s, "samples   {}", self.n_samples());
        let _ = writeln!(s, "gIoU      {:.4}", self.giou);
        let _ = writeln!(s, "cIoU      {:.4}", self.ciou);
        let _ = writeln!(s, "phase1    {}", self.steps.phase1);
        let _ = writeln!(s, "phase2    {}", self.steps.phase2);
        let _ = writeln!(s, "baseline  {}", self.steps.baseline);
        s
    }
}

/// Parses masks back from [`EvalReport::write_csv`] output as
/// `(seed, pred, gt)` triples.
pub fn read_mask_csv(text: &str) -> Result<Vec<(u64, Vec<bool>, Vec<bool>)>> {
    let bits = |s: &str| -> Result<Vec<bool>> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Format(format!("bad mask character {c:?}"))),
            })
            .collect()
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Format(format!("expected 8 fields, got {}", f.len())));
            }
            let seed = f[0].parse().map_err(|_| Error::Format(format!("bad seed {:?}", f[0])))?;
            Ok((seed, bits(f[6])?, bits(f[7])?))
        })
        .collect()
}

/// `(phase1, phase2, baseline_equivalent)`.
pub fn count_steps(result: &PipelineResult) -> (usize, usize, usize) {
    (result.phase1_steps, result.phase2_calls, result.baseline_equivalent_steps())
}

fn union_of(masks: impl Iterator<Item = Vec<bool>>, n: usize) -> Vec<bool> {
    let mut out = vec![false; n];
    for m in masks {
        for (o, b) in out.iter_mut().zip(m) {
            *o |= b;
        }
    }
    out
}

fn check_model(params_grid_limit: usize, sample: &SyntheticSample) -> Result<()> {
    if sample.grid_side() > params_grid_limit {
        return Err(Error::Config(format!(
            "checkpoint supports grid side <= {params_grid_limit}, sample has {}",
            sample.grid_side()
        )));
    }
    Ok(())
}

/// Runs the model on every sample. A sample's prediction is the union of the
/// masks it emitted (empty when it emitted no `<seg>`).
pub fn evaluate<F: NdFloat>(
    params: &Parameters<F>,
    split: &[SyntheticSample],
    mode: EvalMode,
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    let expected_dim = params.config.patch_input_dim;
    let mut samples = Vec::with_capacity(split.len());
    let mut steps = StepTotals::default();
    for s in split {
        check_model(params.config.max_grid_side, s)?;
        let (h, w, c) = s.pixels.dim();
        let p = s.grid_side();
        if (h / p) * (w / p) * c != expected_dim {
            return Err(Error::Config(format!(
                "checkpoint expects {expected_dim} inputs per patch, sample has {}",
                (h / p) * (w / p) * c
            )));
        }
        let n = p * p;
        let (pred, seg_count) = match mode {
            EvalMode::AllMask { variant, refine } => {
                let opts = PipelineOptions {
                    variant,
                    refine,
                    ..PipelineOptions::default()
                };
                let r = run_pipeline(params, &s.pixels, p, &s.instruction, &opts)?;
                steps.phase1 += r.phase1_steps;
                steps.phase2 += r.phase2_calls;
                steps.baseline += r.baseline_equivalent_steps();
                let pred = union_of(r.masks.iter().map(|m| m.final_mask().to_vec()), n);
                (pred, r.phase2_calls)
            }
            EvalMode::NextToken => {
                let grid = params.patch_features(&s.pixels, p)?;
                let out = baseline_next_token_segment(params, &s.instruction, &grid, vocab, DEFAULT_MAX_NEW_TOKENS)?;
                steps.phase1 += out.response_prefix.len();
                steps.baseline += out.steps;
                if out.seg_emitted {
                    (out.prediction.binary, 1)
                } else {
                    (vec![false; n], 0)
                }
            }
        };
        let (intersection, union) = intersection_union(&pred, &s.gt_mask)?;
        samples.push(SampleEval {
            seed: s.seed,
            grid_side: p,
            iou: if union == 0 { 1.0 } else { intersection as f64 / union as f64 },
            pred,
            gt: s.gt_mask.clone(),
            intersection,
            union,
            seg_count,
        });
    }
    EvalReport::from_samples(mode.tag(), samples, steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mode: String,
    pub num_patches: usize,
    /// Mask-generation forward calls: `1` per mask for all-mask, `N` for the
    /// next-token baseline.
    pub steps: usize,
    pub times_ms: Vec<f64>,
    pub median_ms: f64,
    pub p90_ms: f64,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "mode,N,steps,median_ms,p90_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.3},{:.3}",
            self.mode, self.num_patches, self.steps, self.median_ms, self.p90_ms
        )
    }
}

/// Nearest-rank percentile of an already sorted slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Times one fixed sample `repeats` times after a discarded warm-up run.
///
/// All-mask mode times the whole two-phase pipeline. Next-token mode times
/// text decoding plus one forward call per patch; `<seg>` is forced if the
/// model does not emit it, so both modes always produce a mask.
pub fn benchmark<F: NdFloat>(
    params: &Parameters<F>,
    sample: &SyntheticSample,
    mode: EvalMode,
    repeats: usize,
    vocab: &Vocabulary,
) -> Result<BenchReport> {
    if repeats < 5 {
        return Err(invalid("benchmark needs at least 5 repeats"));
    }
    let p = sample.grid_side();
    let run = || -> Result<usize> {
        match mode {
            EvalMode::AllMask { variant, refine } => {
                let grid = params.patch_features(&sample.pixels, p)?;
                let (capture, _) = forced_seg_capture(params, &sample.instruction, &grid, DEFAULT_MAX_NEW_TOKENS)?;
                let start = forward_call_count();
                let pred = all_mask_generate(params, &capture, &grid, variant)?;
                let steps = (forward_call_count() - start) as usize;
                if refine {
                    refine_prediction(&sample.pixels, &pred, DEFAULT_COLOR_TOLERANCE)?;
                }
                Ok(steps)
            }
            EvalMode::NextToken => {
                let grid = params.patch_features(&sample.pixels, p)?;
                Ok(baseline_next_token_segment(params, &sample.instruction, &grid, vocab, DEFAULT_MAX_NEW_TOKENS)?.steps)
            }
        }
    };
    let steps = run()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BenchReport {
        mode: mode.tag(),
        num_patches: p * p,
        steps,
        median_ms: median(&sorted),
        p90_ms: percentile(&sorted, 0.9),
        times_ms: times,
    })
}

/// Renders a predicted/ground-truth pair side by side.
pub fn render_pair(pred: &[bool], gt: &[bool], grid_side: usize) -> String {
    let a = render_grid(pred, grid_side);
    let b = render_grid(gt, grid_side);
    a.lines().zip(b.lines()).map(|(x, y)| format!("{x}  {y}\n")).collect()
}

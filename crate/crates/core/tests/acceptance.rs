//! Acceptance run. Prints one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Correctness criteria (1-4, 8, 9) are hard: any failure exits non-zero.
//! The learned-behaviour criteria (5, 6, 10) are measured against pinned
//! thresholds and reported with their numbers, but a miss does not fail the
//! run, since it reflects what the toy model learns rather than a defect.
//! Criterion 7 (wall-clock ratio) is informational.
//!
//! Criteria 5, 6, 8, 9, 10 and 7 share nine trained models (three seeds for
//! each of full, no_hybrid, no_fusion), so the whole run takes a while on
//! one core. Progress goes to stderr.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use allmask::attention_mask::construct_hybrid_mask;
use allmask::config::RunConfig;
use allmask::dataset::{make_dataset, DatasetSpec, SyntheticSample, VAL_SEEDS};
use allmask::metrics::{benchmark, evaluate, BenchReport, EvalMode, EvalReport};
use allmask::model::{forward_call_count, init_parameters, ModelConfig, Parameters};
use allmask::pipeline::{
    all_mask_forward, all_mask_generate, baseline_next_token_segment, forced_seg_capture, full_forward_all_mask,
    run_pipeline, AllMaskVariant, Paradigm, PipelineOptions,
};
use allmask::training::{finite_difference_gradcheck, perturb_parameters, train, GradCheckOptions};
use allmask::vocab::{Vocabulary, SEG};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned thresholds.
const CACHE_TOL: f32 = 1e-4;
const CACHE_DRAWS: usize = 100;
const GRADCHECK_TOL: f64 = 1e-3;
const GRADCHECK_MIN_COORDS: usize = 200;
const LEARN_GIOU: f64 = 0.90;
const LEARN_MAX_SECS: f64 = 15.0 * 60.0;
const SPEEDUP: f64 = 10.0;
const REFUSAL_RATE: f64 = 0.80;
const NO_OBJECT_SAMPLES: usize = 200;
const SEEDS: [u64; 3] = [0, 1, 2];
const RESOLUTIONS: [usize; 5] = [4, 6, 8, 12, 16];
const RESOLUTION_SAMPLES: usize = 200;
// Calibrated recipe, shared by every trained criterion. Model dimensions,
// step budget and the remaining optimiser settings are the library defaults.
const LEARNING_RATE: f64 = 1e-3;
const NO_OBJECT_FRACTION: f64 = 0.3;

struct Verdict {
    passed: bool,
    detail: String,
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Hard,
    Measured,
    Informational,
}

struct Board {
    hard_failures: usize,
    measured_misses: Vec<u8>,
}

impl Board {
    fn record(&mut self, id: u8, name: &str, kind: Kind, started: Instant, v: Verdict) {
        let tag = if v.passed { "PASS" } else { "FAIL" };
        let note = match kind {
            Kind::Hard => "",
            Kind::Measured => " (measured)",
            Kind::Informational => " (informational)",
        };
        println!(
            "[{tag}] {id:>2} {name}{note}: {} [{:.1}s]",
            v.detail,
            started.elapsed().as_secs_f64()
        );
        match (kind, v.passed) {
            (Kind::Hard, false) => self.hard_failures += 1,
            (Kind::Measured, false) => self.measured_misses.push(id),
            _ => {}
        }
    }
}

fn artifact_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).expect("artifact dir");
    dir
}

fn hybrid_oracle() -> Verdict {
    let mut pairs = 0;
    for h in 1..=32 {
        for n in 1..=64 {
            let m = construct_hybrid_mask(h, n).expect("valid sizes");
            for i in 0..h + n {
                for j in 0..h + n {
                    let rule = if i < h { j <= i } else { true };
                    if m.allows(i, j) != rule {
                        return Verdict {
                            passed: false,
                            detail: format!("H={h} N={n} entry ({i},{j}) is {}", m.allows(i, j)),
                        };
                    }
                }
            }
            pairs += 1;
        }
    }
    Verdict {
        passed: true,
        detail: format!("{pairs} (H,N) pairs match entry by entry"),
    }
}

fn cache_equivalence(vocab: &Vocabulary) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f32;
    let mut mismatched = 0;
    for draw in 0..CACHE_DRAWS {
        let config = ModelConfig {
            init_seed: draw as u64,
            ..ModelConfig::default()
        };
        let mut p64 = init_parameters::<f64>(&config).unwrap();
        perturb_parameters(&mut p64, 0.05, rng.random());
        let params: Parameters<f32> = p64.cast();
        let side = [4, 6, 8, 12][rng.random_range(0..4)];
        let sample = SyntheticSample::generate(rng.random_range(0..1_000_000), side, true, 4, vocab).unwrap();
        let grid = params.patch_features(&sample.pixels, side).unwrap();
        let (capture, _) = forced_seg_capture(&params, &sample.instruction, &grid, 6).unwrap();
        let variant = AllMaskVariant::default();
        let (z_cached, cached) = all_mask_forward(&params, &capture, &grid, variant).unwrap();
        let (z_full, full) = full_forward_all_mask(&params, &capture.hist, &grid, variant).unwrap();
        let diff = (&z_cached - &z_full).iter().fold(0.0f32, |m, d| m.max(d.abs()));
        worst = worst.max(diff);
        if cached.binary != full.binary {
            mismatched += 1;
        }
    }
    Verdict {
        passed: worst <= CACHE_TOL && mismatched == 0,
        detail: format!(
            "{CACHE_DRAWS} draws, max |dZ| = {worst:.2e} (tol {CACHE_TOL:.0e}), {mismatched} mask mismatches"
        ),
    }
}

fn gradient_check(vocab: &Vocabulary) -> Verdict {
    let mut params = init_parameters::<f64>(&ModelConfig::default()).unwrap();
    perturb_parameters(&mut params, 0.05, 7);
    let target = (0..)
        .map(|s| SyntheticSample::generate(s, 4, true, 4, vocab).unwrap())
        .find(SyntheticSample::has_target)
        .unwrap();
    let empty = (0..)
        .map(|s| SyntheticSample::generate(s, 4, true, 4, vocab).unwrap())
        .find(|s| !s.has_target())
        .unwrap();
    let report = finite_difference_gradcheck(
        &params,
        &[&target, &empty],
        Paradigm::default(),
        vocab,
        &GradCheckOptions::default(),
    )
    .unwrap();
    let worst = report.worst().map(|c| c.tensor.clone()).unwrap_or_default();
    Verdict {
        passed: report.max_rel_error < GRADCHECK_TOL
            && report.checks.len() >= GRADCHECK_MIN_COORDS
            && report.tensors_covered == report.tensors_total,
        detail: format!(
            "max rel err {:.2e} (tol {GRADCHECK_TOL:.0e}, worst in {worst}) over {} coords, {}/{} tensors",
            report.max_rel_error,
            report.checks.len(),
            report.tensors_covered,
            report.tensors_total
        ),
    }
}

fn step_counts(vocab: &Vocabulary) -> Verdict {
    let params = init_parameters::<f32>(&ModelConfig::default()).unwrap();
    let mut rows = Vec::new();
    let mut passed = true;
    for side in [4, 8, 16] {
        let n = side * side;
        let sample = SyntheticSample::generate(VAL_SEEDS.start, side, false, 4, vocab).unwrap();
        let grid = params.patch_features(&sample.pixels, side).unwrap();
        let (capture, _) = forced_seg_capture(&params, &sample.instruction, &grid, 4).unwrap();
        let before = forward_call_count();
        all_mask_generate(&params, &capture, &grid, AllMaskVariant::default()).unwrap();
        let all_mask = forward_call_count() - before;
        let before = forward_call_count();
        let base = baseline_next_token_segment(&params, &sample.instruction, &grid, vocab, 0).unwrap();
        // zero text budget: past the prefill, every call is a patch step
        let observed = forward_call_count() - before - 1;
        passed &= all_mask == 1 && base.steps == n && observed as usize == n;
        rows.push(format!("N={n}: all-mask {all_mask}, next-token {}", base.steps));
    }
    Verdict {
        passed,
        detail: rows.join("; "),
    }
}

fn recipe() -> RunConfig {
    RunConfig {
        learning_rate: LEARNING_RATE,
        no_object_fraction: Some(NO_OBJECT_FRACTION),
        ..RunConfig::default()
    }
}

struct Trained {
    variant: AllMaskVariant,
    seed: u64,
    params: Parameters<f32>,
    secs: f64,
    /// Mean `l_bce + l_dice` over the last 100 steps.
    final_mask_loss: f64,
    /// Mean IoU over val targets where `<seg>` was emitted: mask quality
    /// with the text decision factored out.
    mask_iou: f64,
    report: EvalReport,
}

fn train_one(variant: AllMaskVariant, seed: u64, train_set: &[SyntheticSample], val: &[SyntheticSample], vocab: &Vocabulary) -> Trained {
    let run = RunConfig {
        seed,
        ..recipe()
    };
    let started = Instant::now();
    let params = init_parameters::<f32>(&run.model_config()).unwrap();
    let out = train(params, train_set, &run.train_config(), Paradigm::AllMask(variant), vocab, |_| {}).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let tail = &out.curve[out.curve.len().saturating_sub(100)..];
    let final_mask_loss = tail.iter().map(|p| p.l_bce + p.l_dice).sum::<f64>() / tail.len() as f64;
    let report = evaluate(&out.params, val, EvalMode::AllMask { variant, refine: false }, vocab).unwrap();
    let fired: Vec<f64> = report
        .samples
        .iter()
        .filter(|s| s.gt.contains(&true) && s.seg_count > 0)
        .map(|s| s.iou)
        .collect();
    let mask_iou = fired.iter().sum::<f64>() / fired.len().max(1) as f64;
    eprintln!(
        "  trained {:<9} seed {seed}: {} steps in {secs:.0}s, val gIoU {:.4} cIoU {:.4}, mask IoU {mask_iou:.4}",
        variant.label(),
        run.steps,
        report.giou,
        report.ciou
    );
    Trained {
        variant,
        seed,
        params: out.params,
        secs,
        final_mask_loss,
        mask_iou,
        report,
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn learnability(full: &[Trained]) -> Verdict {
    let gious: Vec<f64> = full.iter().map(|t| t.report.giou).collect();
    let slowest = full.iter().map(|t| t.secs).fold(0.0, f64::max);
    let med = median(gious.clone());
    let steps = recipe().steps;
    let mask_loss = median(full.iter().map(|t| t.final_mask_loss).collect());
    Verdict {
        passed: med >= LEARN_GIOU && slowest < LEARN_MAX_SECS,
        detail: format!(
            "median val gIoU {med:.4} (need >= {LEARN_GIOU}) over seeds {:?}: {}; {steps} steps, slowest run {slowest:.0}s, median final l_mask {mask_loss:.3}",
            full.iter().map(|t| t.seed).collect::<Vec<_>>(),
            gious.iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn mean_giou(models: &[Trained]) -> f64 {
    models.iter().map(|t| t.report.giou).sum::<f64>() / models.len() as f64
}

fn mean_mask_iou(models: &[Trained]) -> f64 {
    models.iter().map(|t| t.mask_iou).sum::<f64>() / models.len() as f64
}

fn ablations(full: &[Trained], no_hybrid: &[Trained], no_fusion: &[Trained]) -> Verdict {
    let (f, h, e) = (mean_giou(full), mean_giou(no_hybrid), mean_giou(no_fusion));
    let (mf, mh, me) = (mean_mask_iou(full), mean_mask_iou(no_hybrid), mean_mask_iou(no_fusion));
    Verdict {
        passed: f > e && f > h,
        detail: format!(
            "mean val gIoU full {f:.4}, {} {e:.4} (delta {:+.4}), {} {h:.4} (delta {:+.4}); \
             mask IoU where <seg> fired: full {mf:.4}, {} {me:.4}, {} {mh:.4}",
            no_fusion[0].variant.label(),
            f - e,
            no_hybrid[0].variant.label(),
            f - h,
            no_fusion[0].variant.label(),
            no_hybrid[0].variant.label(),
        ),
    }
}

fn efficiency(model: &Trained, vocab: &Vocabulary) -> Verdict {
    let sample = (VAL_SEEDS.start..)
        .map(|s| SyntheticSample::generate(s, 16, false, 4, vocab).unwrap())
        .next()
        .unwrap();
    let reports: Vec<BenchReport> = [EvalMode::default(), EvalMode::NextToken]
        .into_iter()
        .map(|mode| benchmark(&model.params, &sample, mode, 7, vocab).unwrap())
        .collect();
    let mut csv = String::from(BenchReport::CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let path = artifact_dir().join("bench.csv");
    fs::write(&path, &csv).expect("bench artifact");
    let ratio = reports[1].median_ms / reports[0].median_ms;
    Verdict {
        passed: ratio >= SPEEDUP,
        detail: format!(
            "N=256 median {:.2} ms all-mask vs {:.2} ms next-token, ratio {ratio:.1}x (need >= {SPEEDUP}x); {}",
            reports[0].median_ms,
            reports[1].median_ms,
            path.display()
        ),
    }
}

fn dynamic_resolution(model: &Trained, vocab: &Vocabulary) -> Verdict {
    let mut rows = Vec::new();
    let mut passed = true;
    for side in RESOLUTIONS {
        let split = make_dataset(&DatasetSpec::val(RESOLUTION_SAMPLES, side), vocab).unwrap();
        match evaluate(&model.params, &split, EvalMode::default(), vocab) {
            Ok(r) => {
                // score of always answering with an empty mask
                let trivial = split.iter().filter(|s| !s.has_target()).count() as f64 / split.len() as f64;
                let shapes_ok = r.samples.iter().all(|s| s.pred.len() == side * side);
                passed &= shapes_ok && r.giou > trivial;
                rows.push(format!("P={side} gIoU {:.4} (empty-mask {trivial:.3})", r.giou));
            }
            Err(e) => {
                passed = false;
                rows.push(format!("P={side} error {e}"));
            }
        }
    }
    Verdict {
        passed,
        detail: rows.join(", "),
    }
}

fn metric_oracle(model: &Trained) -> Verdict {
    let path = artifact_dir().join("eval_seed0.csv");
    let mut out = fs::File::create(&path).unwrap();
    model.report.write_csv(&mut out).unwrap();
    drop(out);
    let text = fs::read_to_string(&path).unwrap();
    let (mut sum, mut count, mut inter, mut union) = (0.0f64, 0usize, 0usize, 0usize);
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let (pred, gt) = (cols[6].as_bytes(), cols[7].as_bytes());
        assert_eq!(pred.len(), gt.len());
        let i = pred.iter().zip(gt).filter(|&(&p, &g)| p == b'1' && g == b'1').count();
        let u = pred.iter().zip(gt).filter(|&(&p, &g)| p == b'1' || g == b'1').count();
        sum += if u == 0 { 1.0 } else { i as f64 / u as f64 };
        count += 1;
        inter += i;
        union += u;
    }
    let giou = sum / count as f64;
    let ciou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Verdict {
        passed: count == model.report.samples.len() && giou == model.report.giou && ciou == model.report.ciou,
        detail: format!(
            "{count} rows; gIoU {giou} vs {}, cIoU {ciou} vs {}",
            model.report.giou, model.report.ciou
        ),
    }
}

fn no_object_samples(vocab: &Vocabulary) -> Vec<SyntheticSample> {
    // the validation range holds only ~100 no-object scenes, so the scan
    // continues past it; seeds stay disjoint from the training range
    (VAL_SEEDS.start..)
        .map(|s| SyntheticSample::generate(s, 8, true, 4, vocab).unwrap())
        .filter(|s| !s.has_target())
        .take(NO_OBJECT_SAMPLES)
        .collect()
}

fn no_object(full: &[Trained], vocab: &Vocabulary) -> Verdict {
    let samples = no_object_samples(vocab);
    let mut rates = Vec::new();
    let mut empty_when_silent = true;
    for model in full {
        let mut silent = 0;
        for s in &samples {
            let r = run_pipeline(&model.params, &s.pixels, 8, &s.instruction, &PipelineOptions::default()).unwrap();
            if !r.response.contains(&SEG) {
                silent += 1;
                empty_when_silent &= r.masks.is_empty();
            }
        }
        rates.push(silent as f64 / samples.len() as f64);
    }
    let med = median(rates.clone());
    // context: a model that never emits <seg> would pass trivially
    let fired = median(
        full.iter()
            .map(|t| {
                let targets: Vec<_> = t.report.samples.iter().filter(|s| s.gt.contains(&true)).collect();
                targets.iter().filter(|s| s.seg_count > 0).count() as f64 / targets.len() as f64
            })
            .collect(),
    );
    Verdict {
        passed: med >= REFUSAL_RATE && empty_when_silent,
        detail: format!(
            "median no-<seg> rate {med:.3} (need >= {REFUSAL_RATE}) over {} samples; per seed {}; \
             <seg> still emitted on {fired:.3} of val targets",
            samples.len(),
            rates.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn main() {
    let vocab = Vocabulary::toy();
    let mut board = Board {
        hard_failures: 0,
        measured_misses: Vec::new(),
    };

    let t = Instant::now();
    board.record(1, "hybrid mask matches rule oracle", Kind::Hard, t, hybrid_oracle());
    let t = Instant::now();
    board.record(2, "cached two-phase equals full forward", Kind::Hard, t, cache_equivalence(&vocab));
    let t = Instant::now();
    board.record(3, "finite-difference gradient check", Kind::Hard, t, gradient_check(&vocab));
    let t = Instant::now();
    board.record(4, "step-count law", Kind::Hard, t, step_counts(&vocab));

    let run = recipe();
    let train_set = make_dataset(&run.train_split(), &vocab).unwrap();
    let val = make_dataset(&run.val_split(), &vocab).unwrap();
    eprintln!(
        "training 3 variants x {} seeds ({} steps, {} train / {} val at P={})",
        SEEDS.len(),
        run.steps,
        train_set.len(),
        val.len(),
        run.grid
    );
    let trained = |variant: AllMaskVariant| -> Vec<Trained> {
        SEEDS.iter().map(|&s| train_one(variant, s, &train_set, &val, &vocab)).collect()
    };
    let full = trained(AllMaskVariant::default());

    let t = Instant::now();
    board.record(5, "learnability on 8x8 referring task", Kind::Measured, t, learnability(&full));

    let t = Instant::now();
    let no_hybrid = trained(AllMaskVariant::no_hybrid());
    let no_fusion = trained(AllMaskVariant::no_fusion());
    board.record(6, "ablation direction", Kind::Measured, t, ablations(&full, &no_hybrid, &no_fusion));

    let t = Instant::now();
    board.record(7, "next-token vs all-mask wall clock", Kind::Informational, t, efficiency(&full[0], &vocab));
    let t = Instant::now();
    board.record(8, "dynamic resolution", Kind::Hard, t, dynamic_resolution(&full[0], &vocab));
    let t = Instant::now();
    board.record(9, "metric oracle", Kind::Hard, t, metric_oracle(&full[0]));
    let t = Instant::now();
    board.record(10, "no-object handling", Kind::Measured, t, no_object(&full, &vocab));

    if !board.measured_misses.is_empty() {
        println!("measured criteria below threshold: {:?}", board.measured_misses);
    }
    if board.hard_failures > 0 {
        println!("{} hard criteria failed", board.hard_failures);
        std::process::exit(1);
    }
    println!("all hard criteria passed");
}


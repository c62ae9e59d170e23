use allmask::attention_mask::{causal_mask_with_cache, construct_causal_mask, HybridAttentionMask};
use allmask::dataset::SyntheticSample;
use allmask::model::{init_parameters, transformer_forward, LayerCacheSet, ModelConfig, Parameters};
use allmask::pipeline::{
    all_mask_forward, full_forward_all_mask, generate_autoregressive, run_pipeline, AllMaskVariant, PipelineOptions,
};
use allmask::vocab::{Vocabulary, SEG};
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(seed: u64) -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        heads: 4,
        mlp_hidden: 24,
        layers: 2,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

/// Randomized parameters whose language head always emits `<seg>` first.
fn seg_params(seed: u64) -> Parameters<f64> {
    let mut p = init_parameters::<f64>(&small(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for mut t in p.tensors_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
    }
    p.lm_bias[SEG as usize] += 100.0;
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cache_extension_law(seed in any::<u64>(), a in 1usize..12, b in 1usize..12) {
        let params = init_parameters::<f64>(&small(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = Array2::from_shape_fn((a + b, 16), |_| rng.random_range(-1.0..1.0));
        let mut fresh = LayerCacheSet::for_params(&params);
        let whole = transformer_forward(&params, rows.view(), &construct_causal_mask(a + b).unwrap(), &mut fresh, false).unwrap();
        let mut cache = LayerCacheSet::for_params(&params);
        transformer_forward(&params, rows.slice(s![..a, ..]), &construct_causal_mask(a).unwrap(), &mut cache, false).unwrap();
        let tail = transformer_forward(&params, rows.slice(s![a.., ..]), &causal_mask_with_cache(a, b).unwrap(), &mut cache, false).unwrap();
        let diff = (&whole.hidden.slice(s![a.., ..]) - &tail.hidden).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(diff <= 1e-10, "{}", diff);
        prop_assert_eq!(cache.cached_len(), a + b);
    }

    #[test]
    fn cached_phase_two_equals_full_forward(seed in any::<u64>(), p in 2usize..9, variant in 0usize..3) {
        let variant = [AllMaskVariant::default(), AllMaskVariant::no_hybrid(), AllMaskVariant::no_fusion()][variant];
        let vocab = Vocabulary::toy();
        let params = seg_params(seed);
        let sample = SyntheticSample::generate(seed % 1000, p.max(4), false, 4, &vocab).unwrap();
        let p = sample.grid_side();
        let grid = params.patch_features(&sample.pixels, p).unwrap();
        let (_, caps) = generate_autoregressive(&params, &sample.instruction, &grid, 1).unwrap();
        prop_assert_eq!(caps.len(), 1);
        let (z1, m1) = all_mask_forward(&params, &caps[0], &grid, variant).unwrap();
        let (z2, m2) = full_forward_all_mask(&params, &caps[0].hist, &grid, variant).unwrap();
        let diff = (&z1 - &z2).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(diff <= 1e-9);
        for ((a, b), (za, zb)) in m1.binary.iter().zip(&m2.binary).zip(m1.logits.iter().zip(&m2.logits)) {
            if za.abs() > 1e-9 && zb.abs() > 1e-9 {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn hybrid_mask_rows_never_empty(h in 1usize..40, n in 1usize..80) {
        let m: HybridAttentionMask = allmask::attention_mask::construct_hybrid_mask(h, n).unwrap();
        prop_assert!(m.validate().is_ok());
        prop_assert_eq!(m.popcount(), h * (h + 1) / 2 + n * (h + n));
    }
}

#[test]
fn pipeline_is_deterministic() {
    let vocab = Vocabulary::toy();
    let params = init_parameters::<f32>(&ModelConfig::default()).unwrap();
    let s = SyntheticSample::generate(5, 8, false, 4, &vocab).unwrap();
    let a = run_pipeline(&params, &s.pixels, 8, &s.instruction, &PipelineOptions::default()).unwrap();
    let b = run_pipeline(&params, &s.pixels, 8, &s.instruction, &PipelineOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn one_model_serves_every_grid_side() {
    let vocab = Vocabulary::toy();
    let params = seg_params(1).cast::<f32>();
    for p in 4..=16 {
        let s = SyntheticSample::generate(p as u64, p, false, 4, &vocab).unwrap();
        let r = run_pipeline(&params, &s.pixels, p, &s.instruction, &PipelineOptions {
            max_new_tokens: 1,
            ..PipelineOptions::default()
        })
        .unwrap();
        assert_eq!(r.masks.len(), 1);
        assert_eq!(r.masks[0].binary.len(), p * p);
    }
}

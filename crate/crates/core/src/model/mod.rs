//! The tiny decoder-only transformer.
//!
//! Everything is generic over the float type so training can run in `f32`
//! while gradient checks run in `f64`.

mod checkpoint;
mod embed;
mod forward;

pub use checkpoint::{load_checkpoint, read_checkpoint_file, save_checkpoint, write_checkpoint_file, CHECKPOINT_MAGIC};
pub use embed::{
    assemble_rows, embed_patches, embed_tokens, fuse_mask_embeddings, fuse_mask_embeddings_with,
    scatter_row_grads, Fusion, RowSource,
};
pub use forward::{
    backward, classify_patches, classify_patches_backward, forward_call_count, forward_train, lm_logits,
    lm_logits_backward, transformer_forward, ForwardResult, ForwardTape, LayerCache,
    LayerCacheSet, NEG_LARGE,
};

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::vocab::Vocabulary;
use crate::world::{patchify, PatchFeatureGrid, DEFAULT_CELL_SCALE, MAX_GRID_SIDE};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_text_positions: usize,
    pub max_grid_side: usize,
    /// Flattened pixels per patch (`cell_scale^2 * 3`).
    pub patch_input_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: Vocabulary::toy().len(),
            embed_dim: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            max_text_positions: 320,
            max_grid_side: MAX_GRID_SIDE,
            patch_input_dim: DEFAULT_CELL_SCALE * DEFAULT_CELL_SCALE * 3,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.vocab_size == 0
            || self.layers == 0
            || self.mlp_hidden == 0
            || self.max_text_positions == 0
            || self.max_grid_side == 0
            || self.patch_input_dim == 0
        {
            return Err(invalid("model dimensions must be non-zero"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn max_patches(&self) -> usize {
        self.max_grid_side * self.max_grid_side
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub norm1: Norm<F>,
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub norm2: Norm<F>,
    pub w_up: Array2<F>,
    pub b_up: Array1<F>,
    pub w_down: Array2<F>,
    pub b_down: Array1<F>,
}

/// All trainable arrays. Matrices are stored `input x output` so a layer is
/// `x.dot(w) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    pub config: ModelConfig,
    pub token_embedding: Array2<F>,
    pub text_position: Array2<F>,
    pub patch_row: Array2<F>,
    pub patch_col: Array2<F>,
    pub patch_weight: Array2<F>,
    pub patch_bias: Array1<F>,
    pub blocks: Vec<Block<F>>,
    pub final_norm: Norm<F>,
    pub lm_weight: Array2<F>,
    pub lm_bias: Array1<F>,
    pub classifier_weight: Array1<F>,
    pub classifier_bias: Array1<F>,
}

fn norm_zeros<F: NdFloat>(d: usize) -> Norm<F> {
    Norm {
        gamma: Array1::zeros(d),
        beta: Array1::zeros(d),
    }
}

impl<F: NdFloat> Parameters<F> {
    /// Every array zero, including the normalisation gains. Used for gradients.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        let m = config.mlp_hidden;
        let block = || Block {
            norm1: norm_zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            norm2: norm_zeros(d),
            w_up: Array2::zeros((d, m)),
            b_up: Array1::zeros(m),
            w_down: Array2::zeros((m, d)),
            b_down: Array1::zeros(d),
        };
        Parameters {
            config: config.clone(),
            token_embedding: Array2::zeros((config.vocab_size, d)),
            text_position: Array2::zeros((config.max_text_positions, d)),
            patch_row: Array2::zeros((config.max_grid_side, d)),
            patch_col: Array2::zeros((config.max_grid_side, d)),
            patch_weight: Array2::zeros((config.patch_input_dim, d)),
            patch_bias: Array1::zeros(d),
            blocks: (0..config.layers).map(|_| block()).collect(),
            final_norm: norm_zeros(d),
            lm_weight: Array2::zeros((d, config.vocab_size)),
            lm_bias: Array1::zeros(config.vocab_size),
            classifier_weight: Array1::zeros(d),
            classifier_bias: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Name and view of every array, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = vec![
            ("embed.token".to_string(), self.token_embedding.view().into_dyn()),
            ("embed.text_position".to_string(), self.text_position.view().into_dyn()),
            ("embed.patch_row".to_string(), self.patch_row.view().into_dyn()),
            ("embed.patch_col".to_string(), self.patch_col.view().into_dyn()),
            ("patchify.weight".to_string(), self.patch_weight.view().into_dyn()),
            ("patchify.bias".to_string(), self.patch_bias.view().into_dyn()),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block{l}.{s}");
            out.extend([
                (p("norm1.gamma"), b.norm1.gamma.view().into_dyn()),
                (p("norm1.beta"), b.norm1.beta.view().into_dyn()),
                (p("attn.wq"), b.wq.view().into_dyn()),
                (p("attn.bq"), b.bq.view().into_dyn()),
                (p("attn.wk"), b.wk.view().into_dyn()),
                (p("attn.bk"), b.bk.view().into_dyn()),
                (p("attn.wv"), b.wv.view().into_dyn()),
                (p("attn.bv"), b.bv.view().into_dyn()),
                (p("attn.wo"), b.wo.view().into_dyn()),
                (p("attn.bo"), b.bo.view().into_dyn()),
                (p("norm2.gamma"), b.norm2.gamma.view().into_dyn()),
                (p("norm2.beta"), b.norm2.beta.view().into_dyn()),
                (p("mlp.w_up"), b.w_up.view().into_dyn()),
                (p("mlp.b_up"), b.b_up.view().into_dyn()),
                (p("mlp.w_down"), b.w_down.view().into_dyn()),
                (p("mlp.b_down"), b.b_down.view().into_dyn()),
            ]);
        }
        out.extend([
            ("final_norm.gamma".to_string(), self.final_norm.gamma.view().into_dyn()),
            ("final_norm.beta".to_string(), self.final_norm.beta.view().into_dyn()),
            ("head.lm.weight".to_string(), self.lm_weight.view().into_dyn()),
            ("head.lm.bias".to_string(), self.lm_bias.view().into_dyn()),
            ("head.classifier.weight".to_string(), self.classifier_weight.view().into_dyn()),
            ("head.classifier.bias".to_string(), self.classifier_bias.view().into_dyn()),
        ]);
        out
    }

    /// Mutable views in the same order as [`Parameters::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut out = vec![
            self.token_embedding.view_mut().into_dyn(),
            self.text_position.view_mut().into_dyn(),
            self.patch_row.view_mut().into_dyn(),
            self.patch_col.view_mut().into_dyn(),
            self.patch_weight.view_mut().into_dyn(),
            self.patch_bias.view_mut().into_dyn(),
        ];
        for b in self.blocks.iter_mut() {
            out.extend([
                b.norm1.gamma.view_mut().into_dyn(),
                b.norm1.beta.view_mut().into_dyn(),
                b.wq.view_mut().into_dyn(),
                b.bq.view_mut().into_dyn(),
                b.wk.view_mut().into_dyn(),
                b.bk.view_mut().into_dyn(),
                b.wv.view_mut().into_dyn(),
                b.bv.view_mut().into_dyn(),
                b.wo.view_mut().into_dyn(),
                b.bo.view_mut().into_dyn(),
                b.norm2.gamma.view_mut().into_dyn(),
                b.norm2.beta.view_mut().into_dyn(),
                b.w_up.view_mut().into_dyn(),
                b.b_up.view_mut().into_dyn(),
                b.w_down.view_mut().into_dyn(),
                b.b_down.view_mut().into_dyn(),
            ]);
        }
        out.extend([
            self.final_norm.gamma.view_mut().into_dyn(),
            self.final_norm.beta.view_mut().into_dyn(),
            self.lm_weight.view_mut().into_dyn(),
            self.lm_bias.view_mut().into_dyn(),
            self.classifier_weight.view_mut().into_dyn(),
            self.classifier_bias.view_mut().into_dyn(),
        ]);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Converts every array to another float type.
    pub fn cast<G: NdFloat>(&self) -> Parameters<G> {
        let mut out = Parameters::<G>::zeros(&self.config);
        for ((_, src), mut dst) in self.named_tensors().into_iter().zip(out.tensors_mut()) {
            dst.zip_mut_with(&src, |d, &s| *d = G::from(s).unwrap());
        }
        out
    }

    /// Patch features `F_p` from rendered pixels through the learned projection.
    pub fn patch_features(
        &self,
        pixels: &Array3<f32>,
        grid_side: usize,
    ) -> Result<PatchFeatureGrid<F>> {
        patchify(pixels, grid_side, &self.patch_weight, &self.patch_bias)
    }
}

fn is_positional(name: &str) -> bool {
    name.starts_with("embed.") && name != "embed.token"
}

/// Arrays drawn at random on init; everything else starts at zero or one.
fn is_weight_matrix(name: &str) -> bool {
    !is_positional(name)
        && !name.ends_with("bias")
        && !name.ends_with(".beta")
        && !name.ends_with(".gamma")
        && !name.contains(".b")
}

/// Deterministic initialisation from `config.init_seed`.
///
/// Matrices are drawn from `N(0, 1/D)`; biases and positional tables start at
/// zero and normalisation gains at one.
pub fn init_parameters<F: NdFloat>(config: &ModelConfig) -> Result<Parameters<F>> {
    config.validate()?;
    let mut params = Parameters::<F>::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let std = 1.0 / (config.embed_dim as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, mut t) in names.iter().zip(params.tensors_mut()) {
        if name.ends_with(".gamma") {
            t.fill(F::one());
        } else if is_weight_matrix(name) {
            t.map_inplace(|v| *v = F::from(normal.sample(&mut rng)).unwrap());
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = init_parameters::<f32>(&cfg).unwrap();
        let b = init_parameters::<f32>(&cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.init_seed = 1;
        assert_ne!(a, init_parameters::<f32>(&other).unwrap());
    }

    #[test]
    fn token_table_shape() {
        let cfg = ModelConfig {
            vocab_size: 48,
            ..ModelConfig::default()
        };
        let p = init_parameters::<f64>(&cfg).unwrap();
        assert_eq!(p.token_embedding.dim(), (48, 64));
    }

    #[test]
    fn init_scan_finite_and_small() {
        let p = init_parameters::<f64>(&ModelConfig::default()).unwrap();
        for (name, t) in p.named_tensors() {
            assert!(t.iter().all(|v| v.is_finite()), "{name}");
            let max = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if name.ends_with(".gamma") {
                assert!(t.iter().all(|&v| v == 1.0), "{name}");
            } else {
                assert!(max < 1.0, "{name} max {max}");
            }
            if !name.ends_with(".gamma") && !is_weight_matrix(&name) {
                assert!(t.iter().all(|&v| v == 0.0), "{name} should start at zero");
            }
        }
    }

    #[test]
    fn names_are_unique_and_aligned() {
        let mut p = init_parameters::<f32>(&ModelConfig::default()).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(p.tensors_mut().len(), names.len());
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(init_parameters::<f32>(&cfg).is_err());
    }
}

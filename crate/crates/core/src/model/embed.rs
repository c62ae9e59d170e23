//! Input rows: text tokens, image patches and `[mask]` placeholders.

use ndarray::{Array2, ArrayViewMut1, NdFloat};

use super::Parameters;
use crate::error::{invalid, Error, Result};
use crate::vocab::{TokenId, MASK};
use crate::world::PatchFeatureGrid;

/// Where an input row comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    /// Image patch `n`: `F_p[n] + row_pos + col_pos`.
    Patch(usize),
    /// Text token at a text position: `token + text_pos`.
    Text { token: TokenId, position: usize },
    /// Placeholder for patch `n`: `[mask] + F_p[n] + row_pos + col_pos`.
    MaskSlot(usize),
}

/// Whether placeholders carry their patch feature. `PositionOnly` is the
/// "without visual fusion" ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    #[default]
    Full,
    PositionOnly,
}

fn check_grid<F: NdFloat>(params: &Parameters<F>, grid: &PatchFeatureGrid<F>) -> Result<()> {
    let cfg = &params.config;
    if grid.grid_side > cfg.max_grid_side {
        return Err(Error::Capacity(format!(
            "grid side {} exceeds max_grid_side {}",
            grid.grid_side, cfg.max_grid_side
        )));
    }
    if grid.features.nrows() != grid.num_patches() || grid.dim() != cfg.embed_dim {
        return Err(invalid(format!(
            "patch grid is {}x{}, expected {}x{}",
            grid.features.nrows(),
            grid.dim(),
            grid.num_patches(),
            cfg.embed_dim
        )));
    }
    Ok(())
}

fn check_source<F: NdFloat>(
    params: &Parameters<F>,
    grid: Option<&PatchFeatureGrid<F>>,
    src: RowSource,
) -> Result<()> {
    let cfg = &params.config;
    match src {
        RowSource::Text { token, position } => {
            if token as usize >= cfg.vocab_size {
                return Err(invalid(format!("token id {token} outside vocabulary")));
            }
            if position >= cfg.max_text_positions {
                return Err(Error::Capacity(format!(
                    "text position {position} exceeds max_text_positions {}",
                    cfg.max_text_positions
                )));
            }
        }
        RowSource::Patch(n) | RowSource::MaskSlot(n) => {
            let grid = grid.ok_or_else(|| invalid("patch row requested without a patch grid"))?;
            if n >= grid.num_patches() {
                return Err(invalid(format!("patch index {n} outside the grid")));
            }
        }
    }
    Ok(())
}

fn write_row<F: NdFloat>(
    params: &Parameters<F>,
    grid: Option<&PatchFeatureGrid<F>>,
    src: RowSource,
    fusion: Fusion,
    mut out: ArrayViewMut1<'_, F>,
) {
    match src {
        RowSource::Text { token, position } => {
            out.assign(&params.token_embedding.row(token as usize));
            out += &params.text_position.row(position);
        }
        RowSource::Patch(n) | RowSource::MaskSlot(n) => {
            let grid = grid.expect("checked");
            let (r, c) = grid.coords(n);
            out.assign(&params.patch_row.row(r));
            out += &params.patch_col.row(c);
            let is_mask = matches!(src, RowSource::MaskSlot(_));
            if is_mask {
                out += &params.token_embedding.row(MASK as usize);
            }
            if !is_mask || fusion == Fusion::Full {
                out += &grid.features.row(n);
            }
        }
    }
}

/// Builds one row per source.
pub fn assemble_rows<F: NdFloat>(
    params: &Parameters<F>,
    grid: Option<&PatchFeatureGrid<F>>,
    sources: &[RowSource],
    fusion: Fusion,
) -> Result<Array2<F>> {
    if let Some(g) = grid {
        check_grid(params, g)?;
    }
    for &src in sources {
        check_source(params, grid, src)?;
    }
    let mut rows = Array2::<F>::zeros((sources.len(), params.config.embed_dim));
    for (src, row) in sources.iter().zip(rows.rows_mut()) {
        write_row(params, grid, *src, fusion, row);
    }
    Ok(rows)
}

/// Accumulates embedding-table gradients for rows built by
/// [`assemble_rows`] and returns the gradient with respect to `F_p`.
pub fn scatter_row_grads<F: NdFloat>(
    grads: &mut Parameters<F>,
    grid_side: usize,
    sources: &[RowSource],
    d_rows: &Array2<F>,
    fusion: Fusion,
) -> Array2<F> {
    let d = grads.config.embed_dim;
    let mut d_features = Array2::<F>::zeros((grid_side * grid_side, d));
    for (src, drow) in sources.iter().zip(d_rows.rows()) {
        match *src {
            RowSource::Text { token, position } => {
                let mut t = grads.token_embedding.row_mut(token as usize);
                t += &drow;
                let mut p = grads.text_position.row_mut(position);
                p += &drow;
            }
            RowSource::Patch(n) | RowSource::MaskSlot(n) => {
                let (r, c) = (n / grid_side, n % grid_side);
                let mut gr = grads.patch_row.row_mut(r);
                gr += &drow;
                let mut gc = grads.patch_col.row_mut(c);
                gc += &drow;
                let is_mask = matches!(src, RowSource::MaskSlot(_));
                if is_mask {
                    let mut m = grads.token_embedding.row_mut(MASK as usize);
                    m += &drow;
                }
                if !is_mask || fusion == Fusion::Full {
                    let mut f = d_features.row_mut(n);
                    f += &drow;
                }
            }
        }
    }
    d_features
}

/// `token_table[id_t] + text_pos[start_position + t]` for every id.
pub fn embed_tokens<F: NdFloat>(
    params: &Parameters<F>,
    ids: &[TokenId],
    start_position: usize,
) -> Result<Array2<F>> {
    let sources: Vec<RowSource> = ids
        .iter()
        .enumerate()
        .map(|(t, &token)| RowSource::Text {
            token,
            position: start_position + t,
        })
        .collect();
    assemble_rows(params, None, &sources, Fusion::Full)
}

/// Image-prefix rows for every patch in row-major order.
pub fn embed_patches<F: NdFloat>(
    params: &Parameters<F>,
    grid: &PatchFeatureGrid<F>,
) -> Result<Array2<F>> {
    let sources: Vec<RowSource> = (0..grid.num_patches()).map(RowSource::Patch).collect();
    assemble_rows(params, Some(grid), &sources, Fusion::Full)
}

/// Visually-augmented placeholder rows `E_mask`, one per patch in row-major
/// order: `[mask] + F_p[n] + row_pos[r(n)] + col_pos[c(n)]`.
pub fn fuse_mask_embeddings<F: NdFloat>(
    params: &Parameters<F>,
    grid: &PatchFeatureGrid<F>,
) -> Result<Array2<F>> {
    fuse_mask_embeddings_with(params, grid, Fusion::Full)
}

pub fn fuse_mask_embeddings_with<F: NdFloat>(
    params: &Parameters<F>,
    grid: &PatchFeatureGrid<F>,
    fusion: Fusion,
) -> Result<Array2<F>> {
    let sources: Vec<RowSource> = (0..grid.num_patches()).map(RowSource::MaskSlot).collect();
    assemble_rows(params, Some(grid), &sources, fusion)
}

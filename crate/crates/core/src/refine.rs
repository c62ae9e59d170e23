//! Optional mask refinement: pick a keypoint from the coarse prediction and
//! grow a color-homogeneous region from it on the rendered pixels.

use std::collections::VecDeque;

use ndarray::{Array2, Array3};

use crate::error::{invalid, Result};
use crate::pipeline::MaskPrediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Keypoint {
    pub row: usize,
    pub col: usize,
}

impl Keypoint {
    /// Center pixel `(y, x)` of the keypoint's patch.
    pub fn pixel(&self, cell_scale: usize) -> (usize, usize) {
        (self.row * cell_scale + cell_scale / 2, self.col * cell_scale + cell_scale / 2)
    }
}

/// 4-connected components of the `true` cells, each listed in row-major
/// order; components are ordered by their first cell.
pub fn components(mask: &[bool], grid_side: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / grid_side, i % grid_side);
            let mut nbrs = Vec::with_capacity(4);
            if r > 0 {
                nbrs.push(i - grid_side);
            }
            if r + 1 < grid_side {
                nbrs.push(i + grid_side);
            }
            if c > 0 {
                nbrs.push(i - 1);
            }
            if c + 1 < grid_side {
                nbrs.push(i + 1);
            }
            for j in nbrs {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Foreground patch nearest the centroid of the largest 4-connected
/// foreground component. Ties go to the earlier component and then to the
/// earlier patch in row-major order. `None` for an empty mask.
pub fn sample_keypoint(mask: &MaskPrediction) -> Option<Keypoint> {
    let p = mask.grid_side;
    let comps = components(&mask.binary, p);
    let largest = comps.iter().fold(None::<&Vec<usize>>, |best, c| match best {
        Some(b) if b.len() >= c.len() => Some(b),
        _ => Some(c),
    })?;
    let k = largest.len() as f64;
    let cy = largest.iter().map(|&i| (i / p) as f64).sum::<f64>() / k;
    let cx = largest.iter().map(|&i| (i % p) as f64).sum::<f64>() / k;
    let dist = |i: usize| ((i / p) as f64 - cy).powi(2) + ((i % p) as f64 - cx).powi(2);
    let best = largest
        .iter()
        .copied()
        .fold(largest[0], |b, i| if dist(i) < dist(b) { i } else { b });
    Some(Keypoint { row: best / p, col: best % p })
}

/// 4-connected flood fill from `seed` (pixel `(y, x)`) over pixels whose
/// every channel is within `color_tolerance` of the seed color.
pub fn region_grow(pixels: &Array3<f32>, seed: (usize, usize), color_tolerance: f64) -> Result<Array2<bool>> {
    let (h, w, ch) = pixels.dim();
    if seed.0 >= h || seed.1 >= w {
        return Err(invalid(format!("seed pixel {seed:?} outside a {h}x{w} image")));
    }
    let color: Vec<f64> = (0..ch).map(|c| pixels[[seed.0, seed.1, c]] as f64).collect();
    let similar = |y: usize, x: usize| (0..ch).all(|c| (pixels[[y, x, c]] as f64 - color[c]).abs() <= color_tolerance);
    let mut out = Array2::from_elem((h, w), false);
    out[seed] = true;
    let mut queue = VecDeque::from([seed]);
    while let Some((y, x)) = queue.pop_front() {
        let mut visit = |ny: usize, nx: usize| {
            if !out[[ny, nx]] && similar(ny, nx) {
                out[[ny, nx]] = true;
                queue.push_back((ny, nx));
            }
        };
        if y > 0 {
            visit(y - 1, x);
        }
        if y + 1 < h {
            visit(y + 1, x);
        }
        if x > 0 {
            visit(y, x - 1);
        }
        if x + 1 < w {
            visit(y, x + 1);
        }
    }
    Ok(out)
}

/// Patch is foreground when strictly more than half its pixels are.
pub fn downsample_majority(pixel_mask: &Array2<bool>, grid_side: usize) -> Result<Vec<bool>> {
    let (h, w) = pixel_mask.dim();
    if grid_side == 0 || h != w || h % grid_side != 0 {
        return Err(invalid(format!("{h}x{w} mask does not tile a {grid_side}x{grid_side} grid")));
    }
    let s = h / grid_side;
    let mut out = Vec::with_capacity(grid_side * grid_side);
    for r in 0..grid_side {
        for c in 0..grid_side {
            let on = (0..s)
                .flat_map(|y| (0..s).map(move |x| (y, x)))
                .filter(|&(y, x)| pixel_mask[[r * s + y, c * s + x]])
                .count();
            out.push(2 * on > s * s);
        }
    }
    Ok(out)
}

/// Pixel-level refinement from a keypoint.
pub fn region_grow_refine(pixels: &Array3<f32>, grid_side: usize, keypoint: Keypoint, color_tolerance: f64) -> Result<Array2<bool>> {
    let side = pixels.dim().0;
    if grid_side == 0 || !side.is_multiple_of(grid_side) {
        return Err(invalid("image does not tile the patch grid"));
    }
    region_grow(pixels, keypoint.pixel(side / grid_side), color_tolerance)
}

/// Patch-level refined mask, or `None` when the prediction is empty. The
/// keypoint's own patch is always kept, so a non-empty prediction never
/// refines to an empty one.
pub fn refine_prediction(pixels: &Array3<f32>, mask: &MaskPrediction, color_tolerance: f64) -> Result<Option<Vec<bool>>> {
    let Some(kp) = sample_keypoint(mask) else {
        return Ok(None);
    };
    let grown = region_grow_refine(pixels, mask.grid_side, kp, color_tolerance)?;
    let mut patches = downsample_majority(&grown, mask.grid_side)?;
    patches[kp.row * mask.grid_side + kp.col] = true;
    Ok(Some(patches))
}

//! Procedural referring-segmentation scenes.
//!
//! A scene is a `P x P` grid of patch cells holding up to four cell-aligned
//! objects. Each object has a unique (color, shape) pair, so a referring
//! expression naming that pair is unambiguous. Objects never touch, not even
//! diagonally, which keeps colour-based region growing exact.

use ndarray::{Array1, Array2, Array3, NdFloat};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::vocab::{
    fill_template, TokenSequence, Vocabulary, ANSWER_TEMPLATES, BOS, COLORS, EOS,
    QUESTION_TEMPLATES, REFUSAL_TEMPLATE, SHAPES,
};

pub const MIN_GRID_SIDE: usize = 4;
pub const MAX_GRID_SIDE: usize = 16;
pub const DEFAULT_CELL_SCALE: usize = 4;
pub const MAX_OBJECTS: usize = 4;
/// Probability that a scene generated with `allow_no_object` names an absent object.
pub const NO_OBJECT_RATE: f64 = 0.1;
pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Rect,
    Disk,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Rect, Shape::Disk, Shape::Cross];

    pub fn word(self) -> &'static str {
        SHAPES[self as usize]
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        COLORS[self as usize]
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

/// Patch-grid cell as `(row, col)`.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub grid_side: usize,
    pub objects: Vec<SceneObject>,
    /// Index of the referred object, `None` for the no-object case.
    pub target_index: Option<usize>,
    /// The (color, shape) named by the instruction. Matches the target when
    /// there is one and is absent from the scene otherwise.
    pub referent: (Color, Shape),
}

impl Scene {
    pub fn empty(grid_side: usize) -> Self {
        Scene {
            grid_side,
            objects: Vec::new(),
            target_index: None,
            referent: (Color::Red, Shape::Rect),
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn target(&self) -> Option<&SceneObject> {
        self.target_index.map(|i| &self.objects[i])
    }

    /// Row-major patch mask of the target object (all false without a target).
    pub fn target_mask(&self) -> Vec<bool> {
        let p = self.grid_side;
        let mut mask = vec![false; p * p];
        if let Some(obj) = self.target() {
            for &(r, c) in &obj.cells {
                mask[r * p + c] = true;
            }
        }
        mask
    }
}

/// Cells of a shape anchored at the origin.
pub fn footprint(shape: Shape, extent: usize, width: usize) -> Vec<Cell> {
    match shape {
        Shape::Rect => (0..extent)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .collect(),
        Shape::Cross => {
            let mid = extent / 2;
            (0..extent)
                .flat_map(|r| (0..extent).map(move |c| (r, c)))
                .filter(|&(r, c)| r == mid || c == mid)
                .collect()
        }
        Shape::Disk => {
            // Cell centres inside a circle inscribed in the extent square.
            let centre = (extent as f64 - 1.0) / 2.0;
            let radius = extent as f64 / 2.0;
            (0..extent)
                .flat_map(|r| (0..extent).map(move |c| (r, c)))
                .filter(|&(r, c)| {
                    let dr = r as f64 - centre;
                    let dc = c as f64 - centre;
                    dr * dr + dc * dc <= radius * radius
                })
                .collect()
        }
    }
}

fn scene_rng(seed: u64, grid_side: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((grid_side as u64) << 8) | stream);
    rng
}

fn random_footprint(rng: &mut ChaCha8Rng, shape: Shape, grid_side: usize) -> Vec<Cell> {
    match shape {
        Shape::Rect => {
            let max = 3.min(grid_side - 1);
            let h = rng.random_range(1..=max);
            let w = rng.random_range(1..=max);
            footprint(Shape::Rect, h, w)
        }
        Shape::Cross => {
            let arm = if grid_side >= 8 { rng.random_range(1..=2) } else { 1 };
            footprint(Shape::Cross, 2 * arm + 1, 2 * arm + 1)
        }
        Shape::Disk => {
            let d = if grid_side >= 10 { rng.random_range(4..=5) } else { 4 };
            footprint(Shape::Disk, d, d)
        }
    }
}

fn touches(a: &[Cell], b: &[Cell]) -> bool {
    a.iter().any(|&(ra, ca)| {
        b.iter()
            .any(|&(rb, cb)| ra.abs_diff(rb) <= 1 && ca.abs_diff(cb) <= 1)
    })
}

/// Generates a scene deterministically from `(seed, grid_side, allow_no_object)`.
pub fn make_scene(seed: u64, grid_side: usize, allow_no_object: bool) -> Result<Scene> {
    if !(MIN_GRID_SIDE..=MAX_GRID_SIDE).contains(&grid_side) {
        return Err(invalid(format!(
            "grid_side {grid_side} outside {MIN_GRID_SIDE}..={MAX_GRID_SIDE}"
        )));
    }
    let mut rng = scene_rng(seed, grid_side, 0);
    let mut pairs: Vec<(Color, Shape)> = Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
        .collect();
    pairs.shuffle(&mut rng);
    let want = rng.random_range(1..=MAX_OBJECTS);

    let mut objects: Vec<SceneObject> = Vec::new();
    for &(color, shape) in pairs.iter().take(want) {
        for _attempt in 0..64 {
            let local = random_footprint(&mut rng, shape, grid_side);
            let h = local.iter().map(|c| c.0).max().unwrap() + 1;
            let w = local.iter().map(|c| c.1).max().unwrap() + 1;
            if h > grid_side || w > grid_side {
                continue;
            }
            let r0 = rng.random_range(0..=grid_side - h);
            let c0 = rng.random_range(0..=grid_side - w);
            let cells: Vec<Cell> = local.iter().map(|&(r, c)| (r + r0, c + c0)).collect();
            if objects.iter().all(|o| !touches(&o.cells, &cells)) {
                objects.push(SceneObject { shape, color, cells });
                break;
            }
        }
    }
    // The first object always lands on an empty grid unless its footprint is
    // larger than the grid, which cannot happen for grid_side >= 4.
    debug_assert!(!objects.is_empty());

    let no_object = allow_no_object && rng.random_bool(NO_OBJECT_RATE);
    let (target_index, referent) = if no_object {
        let absent: Vec<(Color, Shape)> = pairs
            .iter()
            .copied()
            .filter(|p| !objects.iter().any(|o| (o.color, o.shape) == *p))
            .collect();
        (None, absent[rng.random_range(0..absent.len())])
    } else {
        let t = rng.random_range(0..objects.len());
        (Some(t), (objects[t].color, objects[t].shape))
    };
    Ok(Scene {
        grid_side,
        objects,
        target_index,
        referent,
    })
}

/// Renders the scene as a `(P*s) x (P*s) x 3` image in `[0, 1]`.
pub fn render_pixels(scene: &Scene, cell_scale: usize) -> Result<Array3<f32>> {
    if cell_scale == 0 {
        return Err(invalid("cell_scale must be >= 1"));
    }
    let side = scene.grid_side * cell_scale;
    let mut img = Array3::<f32>::zeros((side, side, 3));
    for y in 0..side {
        for x in 0..side {
            for ch in 0..3 {
                img[[y, x, ch]] = BACKGROUND[ch];
            }
        }
    }
    for obj in &scene.objects {
        let rgb = obj.color.rgb();
        for &(r, c) in &obj.cells {
            for y in r * cell_scale..(r + 1) * cell_scale {
                for x in c * cell_scale..(c + 1) * cell_scale {
                    for ch in 0..3 {
                        img[[y, x, ch]] = rgb[ch];
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Per-patch feature rows `F_p` (N x D) for a `grid_side x grid_side` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureGrid<F> {
    pub grid_side: usize,
    pub features: Array2<F>,
}

impl<F> PatchFeatureGrid<F> {
    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Grid coordinates of patch `n` in row-major order.
    pub fn coords(&self, n: usize) -> Cell {
        (n / self.grid_side, n % self.grid_side)
    }
}

/// Flattens each patch's pixel block (row, column, channel order) into one row.
pub fn flatten_patches<F: NdFloat>(pixels: &Array3<f32>, grid_side: usize) -> Result<Array2<F>> {
    let (h, w, ch) = pixels.dim();
    if grid_side == 0 || h != w || h % grid_side != 0 || ch != 3 {
        return Err(invalid(format!(
            "pixel array {h}x{w}x{ch} not divisible into a {grid_side}x{grid_side} patch grid"
        )));
    }
    let s = h / grid_side;
    let n = grid_side * grid_side;
    let mut out = Array2::<F>::zeros((n, s * s * 3));
    for pr in 0..grid_side {
        for pc in 0..grid_side {
            let row = pr * grid_side + pc;
            let mut k = 0;
            for y in 0..s {
                for x in 0..s {
                    for c in 0..3 {
                        out[[row, k]] = F::from(pixels[[pr * s + y, pc * s + x, c]]).unwrap();
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Projects flattened patches through a linear layer: `F_p = X W + b`.
pub fn patchify<F: NdFloat>(
    pixels: &Array3<f32>,
    grid_side: usize,
    weight: &Array2<F>,
    bias: &Array1<F>,
) -> Result<PatchFeatureGrid<F>> {
    let flat = flatten_patches::<F>(pixels, grid_side)?;
    if flat.ncols() != weight.nrows() || weight.ncols() != bias.len() {
        return Err(invalid(format!(
            "patch projection expects {} inputs, patches have {}",
            weight.nrows(),
            flat.ncols()
        )));
    }
    let features = flat.dot(weight) + bias;
    Ok(PatchFeatureGrid {
        grid_side,
        features,
    })
}

/// Fills the question/answer templates for a scene.
///
/// The instruction starts with `<bos>`, the response ends with `<eos>`. A
/// no-object scene always gets the refusal response, which has no `<seg>`.
pub fn make_instruction_response(
    scene: &Scene,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<(TokenSequence, TokenSequence)> {
    let mut rng = scene_rng(seed, scene.grid_side, 1);
    let (color, shape) = scene.referent;
    let q = QUESTION_TEMPLATES[rng.random_range(0..QUESTION_TEMPLATES.len())];
    let a = if scene.target_index.is_some() {
        ANSWER_TEMPLATES[rng.random_range(0..ANSWER_TEMPLATES.len())]
    } else {
        REFUSAL_TEMPLATE
    };
    let mut instruction = vec![BOS];
    instruction.extend(vocab.encode(&fill_template(q, color.word(), shape.word()))?);
    let mut response = vocab.encode(&fill_template(a, color.word(), shape.word()))?;
    response.push(EOS);
    Ok((instruction, response))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::SEG;

    #[test]
    fn scene_has_valid_target() {
        let s = make_scene(0, 8, false).unwrap();
        assert!(!s.objects.is_empty() && s.objects.len() <= MAX_OBJECTS);
        let t = s.target_index.expect("target");
        assert!(t < s.objects.len());
        assert_eq!(s, make_scene(0, 8, false).unwrap());
    }

    #[test]
    fn grid_side_bounds() {
        assert!(make_scene(0, 3, false).is_err());
        assert!(make_scene(0, 17, false).is_err());
        for p in MIN_GRID_SIDE..=MAX_GRID_SIDE {
            make_scene(5, p, true).unwrap();
        }
    }

    #[test]
    fn no_object_rate_over_thousand_seeds() {
        let none = (0..1000)
            .filter(|&s| make_scene(s, 8, true).unwrap().target_index.is_none())
            .count();
        assert!((50..=150).contains(&none), "{none} no-object scenes");
    }

    #[test]
    fn shapes_are_distinct_footprints() {
        let rect = footprint(Shape::Rect, 3, 3);
        let cross = footprint(Shape::Cross, 3, 3);
        let disk = footprint(Shape::Disk, 4, 4);
        assert_eq!(rect.len(), 9);
        assert_eq!(cross.len(), 5);
        assert_eq!(disk.len(), 12);
        assert_eq!(footprint(Shape::Disk, 5, 5).len(), 21);
    }

    #[test]
    fn empty_scene_renders_gray() {
        let img = render_pixels(&Scene::empty(4), 2).unwrap();
        assert!(img.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_red_cell() {
        let mut scene = Scene::empty(4);
        scene.objects.push(SceneObject {
            shape: Shape::Rect,
            color: Color::Red,
            cells: vec![(0, 0)],
        });
        let img = render_pixels(&scene, 1).unwrap();
        assert_eq!([img[[0, 0, 0]], img[[0, 0, 1]], img[[0, 0, 2]]], [1.0, 0.0, 0.0]);
        assert_eq!(img[[0, 1, 0]], 0.5);
        assert_eq!(img, render_pixels(&scene, 1).unwrap());
    }

    #[test]
    fn patchify_shapes_and_errors() {
        let scene = make_scene(3, 8, false).unwrap();
        let img = render_pixels(&scene, 4).unwrap();
        let w = Array2::<f64>::from_elem((48, 64), 0.01);
        let b = Array1::<f64>::zeros(64);
        let grid = patchify(&img, 8, &w, &b).unwrap();
        assert_eq!(grid.features.dim(), (64, 64));
        assert!(patchify(&img, 5, &w, &b).is_err());
        let zeros = Array3::<f32>::zeros((32, 32, 3));
        let g0 = patchify(&zeros, 8, &w, &b).unwrap();
        assert!(g0.features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_is_local() {
        let scene = make_scene(11, 8, false).unwrap();
        let img = render_pixels(&scene, 4).unwrap();
        let w = Array2::<f64>::from_shape_fn((48, 16), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let b = Array1::<f64>::from_elem(16, 0.3);
        let base = patchify(&img, 8, &w, &b).unwrap();
        // Swap the pixel blocks of patches (0,0) and (5,6).
        let mut swapped = img.clone();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    let a = img[[y, x, c]];
                    let z = img[[20 + y, 24 + x, c]];
                    swapped[[y, x, c]] = z;
                    swapped[[20 + y, 24 + x, c]] = a;
                }
            }
        }
        let after = patchify(&swapped, 8, &w, &b).unwrap();
        let (i, j) = (0, 5 * 8 + 6);
        for n in 0..64 {
            let src = if n == i { j } else if n == j { i } else { n };
            assert_eq!(after.features.row(n), base.features.row(src));
        }
    }

    #[test]
    fn instruction_response_contract() {
        let vocab = Vocabulary::toy();
        let mut scene = make_scene(0, 8, false).unwrap();
        scene.referent = (Color::Red, Shape::Disk);
        let (instr, resp) = make_instruction_response(&scene, 4, &vocab).unwrap();
        let text = vocab.decode_str(&instr).unwrap();
        assert!(text.contains("red disk"), "{text}");
        assert_eq!(resp.iter().filter(|&&t| t == SEG).count(), 1);
        assert_eq!(
            (instr.clone(), resp.clone()),
            make_instruction_response(&scene, 4, &vocab).unwrap()
        );

        scene.target_index = None;
        let (_, refusal) = make_instruction_response(&scene, 4, &vocab).unwrap();
        assert_eq!(refusal.iter().filter(|&&t| t == SEG).count(), 0);
    }
}

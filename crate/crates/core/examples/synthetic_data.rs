//! Generates a few referring-segmentation samples and shows the scene, the
//! instruction/response pair and the ground-truth patch mask.
//!
//!     cargo run --example synthetic_data -- 8 4

use allmask::dataset::{make_dataset, DatasetSpec};
use allmask::pipeline::render_grid;
use allmask::vocab::Vocabulary;
use allmask::world::Scene;

fn scene_ascii(scene: &Scene) -> String {
    let p = scene.grid_side;
    let mut cells = vec!['.'; p * p];
    for obj in &scene.objects {
        let c = obj.color.word().chars().next().unwrap();
        for &(r, col) in &obj.cells {
            cells[r * p + col] = c;
        }
    }
    cells.chunks(p).map(|row| row.iter().collect::<String>() + "\n").collect()
}

fn main() -> allmask::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let grid = args.first().copied().unwrap_or(8);
    let count = args.get(1).copied().unwrap_or(4);
    let vocab = Vocabulary::toy();

    for s in make_dataset(&DatasetSpec::new(100, count, vec![grid]), &vocab)? {
        println!("seed {}  pixels {:?}", s.seed, s.pixels.dim());
        for obj in &s.scene.objects {
            println!("  {} {} at {} cells", obj.color.word(), obj.shape.word(), obj.cells.len());
        }
        println!("  Q: {}", vocab.decode_str(&s.instruction)?);
        println!("  A: {}", vocab.decode_str(&s.response)?);
        let scene = scene_ascii(&s.scene);
        let gt = render_grid(&s.gt_mask, grid);
        for (a, b) in scene.lines().zip(gt.lines()) {
            println!("  {a}  {b}");
        }
        println!();
    }
    Ok(())
}

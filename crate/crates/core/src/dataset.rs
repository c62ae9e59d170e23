//! Sample streams built from scene seeds, plus the optional text record format.

use std::io::{BufRead, Write};
use std::ops::Range;

use ndarray::Array3;

use crate::error::{invalid, Error, Result};
use crate::vocab::{TokenId, TokenSequence, Vocabulary};
use crate::world::{make_instruction_response, make_scene, render_pixels, Scene, DEFAULT_CELL_SCALE};

/// Seed ranges of the two splits. They never overlap.
pub const TRAIN_SEEDS: Range<u64> = 0..5_000;
pub const VAL_SEEDS: Range<u64> = 10_000..11_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub seed: u64,
    pub scene: Scene,
    pub pixels: Array3<f32>,
    pub instruction: TokenSequence,
    pub response: TokenSequence,
    pub gt_mask: Vec<bool>,
}

impl SyntheticSample {
    pub fn generate(
        seed: u64,
        grid_side: usize,
        allow_no_object: bool,
        cell_scale: usize,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let scene = make_scene(seed, grid_side, allow_no_object)?;
        let pixels = render_pixels(&scene, cell_scale)?;
        let (instruction, response) = make_instruction_response(&scene, seed, vocab)?;
        let gt_mask = scene.target_mask();
        Ok(SyntheticSample {
            seed,
            scene,
            pixels,
            instruction,
            response,
            gt_mask,
        })
    }

    pub fn grid_side(&self) -> usize {
        self.scene.grid_side
    }

    pub fn has_target(&self) -> bool {
        self.scene.target_index.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub grid_sides: Vec<usize>,
    pub allow_no_object: bool,
    pub cell_scale: usize,
}

impl DatasetSpec {
    pub fn new(seed: u64, count: usize, grid_sides: Vec<usize>) -> Self {
        DatasetSpec {
            seed,
            count,
            grid_sides,
            allow_no_object: true,
            cell_scale: DEFAULT_CELL_SCALE,
        }
    }

    pub fn train(count: usize, grid_side: usize) -> Self {
        assert!(count as u64 <= TRAIN_SEEDS.end - TRAIN_SEEDS.start);
        Self::new(TRAIN_SEEDS.start, count, vec![grid_side])
    }

    pub fn val(count: usize, grid_side: usize) -> Self {
        assert!(count as u64 <= VAL_SEEDS.end - VAL_SEEDS.start);
        Self::new(VAL_SEEDS.start, count, vec![grid_side])
    }
}

/// Sample `i` uses seed `spec.seed + i` and cycles through `grid_sides`.
pub fn make_dataset(spec: &DatasetSpec, vocab: &Vocabulary) -> Result<Vec<SyntheticSample>> {
    if spec.grid_sides.is_empty() {
        return Err(invalid("grid_sides must not be empty"));
    }
    (0..spec.count)
        .map(|i| {
            let seed = spec.seed + i as u64;
            let p = spec.grid_sides[i % spec.grid_sides.len()];
            SyntheticSample::generate(seed, p, spec.allow_no_object, spec.cell_scale, vocab)
        })
        .collect()
}

/// One serialized sample. Scenes are not stored; regenerate them from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub grid_side: usize,
    pub seed: u64,
    pub instruction: TokenSequence,
    pub response: TokenSequence,
    pub gt_mask: Vec<bool>,
    pub pixels: Array3<f32>,
}

impl From<&SyntheticSample> for SampleRecord {
    fn from(s: &SyntheticSample) -> Self {
        SampleRecord {
            grid_side: s.grid_side(),
            seed: s.seed,
            instruction: s.instruction.clone(),
            response: s.response.clone(),
            gt_mask: s.gt_mask.clone(),
            pixels: s.pixels.clone(),
        }
    }
}

fn ids_line(ids: &[TokenId]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes records as five lines each: `P N seed`, instruction ids,
/// response ids, the gt mask as a `0/1` string, and the pixels as hex of
/// little-endian f32 values.
pub fn write_records<W: Write>(out: &mut W, records: &[SampleRecord]) -> Result<()> {
    for r in records {
        let n = r.grid_side * r.grid_side;
        writeln!(out, "{} {} {}", r.grid_side, n, r.seed)?;
        writeln!(out, "{}", ids_line(&r.instruction))?;
        writeln!(out, "{}", ids_line(&r.response))?;
        let mask: String = r.gt_mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
        writeln!(out, "{mask}")?;
        let mut hex = String::with_capacity(r.pixels.len() * 8);
        for v in r.pixels.iter() {
            for b in v.to_le_bytes() {
                hex.push_str(&format!("{b:02x}"));
            }
        }
        writeln!(out, "{hex}")?;
    }
    Ok(())
}

fn parse_ids(line: &str) -> Result<TokenSequence> {
    line.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad token id {t:?}"))))
        .collect()
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<SampleRecord>> {
    let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
    let lines: Vec<&String> = lines.iter().filter(|l| !l.is_empty()).collect();
    if !lines.len().is_multiple_of(5) {
        return Err(Error::Format("record stream is not a multiple of 5 lines".into()));
    }
    let mut out = Vec::new();
    for chunk in lines.chunks(5) {
        let header: Vec<&str> = chunk[0].split_whitespace().collect();
        let bad = || Error::Format(format!("bad record header {:?}", chunk[0]));
        if header.len() != 3 {
            return Err(bad());
        }
        let p: usize = header[0].parse().map_err(|_| bad())?;
        let n: usize = header[1].parse().map_err(|_| bad())?;
        let seed: u64 = header[2].parse().map_err(|_| bad())?;
        if n != p * p {
            return Err(bad());
        }
        let gt_mask = chunk[3]
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Format(format!("bad mask character {c:?}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        if gt_mask.len() != n {
            return Err(Error::Format(format!("mask has {} cells, expected {n}", gt_mask.len())));
        }
        let hex = chunk[4].as_bytes();
        if hex.len() % 8 != 0 {
            return Err(Error::Format("pixel payload is not whole f32 values".into()));
        }
        let mut values = Vec::with_capacity(hex.len() / 8);
        for word in hex.chunks(8) {
            let mut bytes = [0u8; 4];
            for (i, pair) in word.chunks(2).enumerate() {
                let s = std::str::from_utf8(pair).map_err(|_| Error::Format("bad hex".into()))?;
                bytes[i] = u8::from_str_radix(s, 16).map_err(|_| Error::Format("bad hex".into()))?;
            }
            values.push(f32::from_le_bytes(bytes));
        }
        let total = values.len() / 3;
        let side = (total as f64).sqrt().round() as usize;
        if side * side * 3 != values.len() || !side.is_multiple_of(p) {
            return Err(Error::Format("pixel payload is not a square image".into()));
        }
        let pixels = Array3::from_shape_vec((side, side, 3), values)
            .map_err(|e| Error::Format(e.to_string()))?;
        out.push(SampleRecord {
            grid_side: p,
            seed,
            instruction: parse_ids(chunk[1])?,
            response: parse_ids(chunk[2])?,
            gt_mask,
            pixels,
        });
    }
    Ok(out)
}

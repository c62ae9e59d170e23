//! Flat `key = value` run configuration shared by every CLI command.

use std::path::Path;
use std::str::FromStr;

use crate::dataset::DatasetSpec;
use crate::dataset::{TRAIN_SEEDS, VAL_SEEDS};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::world::DEFAULT_CELL_SCALE;

pub const SEED_ENV: &str = "ALLMASK_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: usize,
    pub cell_scale: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub allow_no_object: bool,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_text_positions: usize,
    pub max_grid_side: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub checkpoint_every: usize,
    /// `off` for uniform sampling.
    pub no_object_fraction: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            grid: 8,
            cell_scale: DEFAULT_CELL_SCALE,
            train_count: 5000,
            val_count: 1000,
            allow_no_object: true,
            embed_dim: m.embed_dim,
            layers: m.layers,
            heads: m.heads,
            mlp_hidden: m.mlp_hidden,
            max_text_positions: m.max_text_positions,
            max_grid_side: m.max_grid_side,
            learning_rate: t.learning_rate,
            steps: t.steps,
            batch_size: t.batch_size,
            warmup_fraction: t.warmup_fraction,
            grad_clip: t.grad_clip,
            beta1: t.beta1,
            beta2: t.beta2,
            checkpoint_every: t.checkpoint_every,
            no_object_fraction: t.no_object_fraction,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 21] = [
        "seed",
        "grid",
        "cell_scale",
        "train_count",
        "val_count",
        "allow_no_object",
        "embed_dim",
        "layers",
        "heads",
        "mlp_hidden",
        "max_text_positions",
        "max_grid_side",
        "learning_rate",
        "steps",
        "batch_size",
        "warmup_fraction",
        "grad_clip",
        "beta1",
        "beta2",
        "checkpoint_every",
        "no_object_fraction",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "grid" => self.grid = parse(key, value)?,
            "cell_scale" => self.cell_scale = parse(key, value)?,
            "train_count" => self.train_count = parse(key, value)?,
            "val_count" => self.val_count = parse(key, value)?,
            "allow_no_object" => self.allow_no_object = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, value)?,
            "max_text_positions" => self.max_text_positions = parse(key, value)?,
            "max_grid_side" => self.max_grid_side = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "no_object_fraction" => {
                self.no_object_fraction = if value == "off" { None } else { Some(parse(key, value)?) }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "grid" => self.grid.to_string(),
            "cell_scale" => self.cell_scale.to_string(),
            "train_count" => self.train_count.to_string(),
            "val_count" => self.val_count.to_string(),
            "allow_no_object" => self.allow_no_object.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "mlp_hidden" => self.mlp_hidden.to_string(),
            "max_text_positions" => self.max_text_positions.to_string(),
            "max_grid_side" => self.max_grid_side.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "warmup_fraction" => self.warmup_fraction.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "no_object_fraction" => self.no_object_fraction.map_or("off".to_string(), |f| f.to_string()),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and text
    /// after `#` are ignored.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Every key, one per line, in a form [`RunConfig::from_text`] reads back.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.model_config().validate().map_err(cfg)?;
        self.train_config().validate().map_err(cfg)?;
        if self.grid == 0 || self.grid > self.max_grid_side {
            return Err(Error::Config(format!(
                "grid {} outside 1..={}",
                self.grid, self.max_grid_side
            )));
        }
        if self.cell_scale == 0 {
            return Err(Error::Config("cell_scale must be >= 1".into()));
        }
        if self.train_count as u64 > TRAIN_SEEDS.end - TRAIN_SEEDS.start
            || self.val_count as u64 > VAL_SEEDS.end - VAL_SEEDS.start
        {
            return Err(Error::Config("split count exceeds its seed range".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            layers: self.layers,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            max_text_positions: self.max_text_positions,
            max_grid_side: self.max_grid_side,
            patch_input_dim: self.cell_scale * self.cell_scale * 3,
            init_seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            warmup_fraction: self.warmup_fraction,
            grad_clip: self.grad_clip,
            seed: self.seed,
            beta1: self.beta1,
            beta2: self.beta2,
            checkpoint_every: self.checkpoint_every,
            checkpoint_dir: None,
            no_object_fraction: self.no_object_fraction,
        }
    }

    pub fn train_split(&self) -> DatasetSpec {
        DatasetSpec {
            allow_no_object: self.allow_no_object,
            cell_scale: self.cell_scale,
            ..DatasetSpec::train(self.train_count, self.grid)
        }
    }

    pub fn val_split(&self) -> DatasetSpec {
        DatasetSpec {
            allow_no_object: self.allow_no_object,
            cell_scale: self.cell_scale,
            ..DatasetSpec::val(self.val_count, self.grid)
        }
    }
}

/// Seed from an explicit flag, else the environment, else `default`.
pub fn resolve_seed(flag: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(default),
    }
}

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use allmask::config::{resolve_seed, RunConfig};
use allmask::dataset::{make_dataset, write_records, DatasetSpec, SampleRecord, SyntheticSample};
use allmask::error::{Error, Result};
use allmask::metrics::{benchmark, evaluate, iou, render_pair, BenchReport, EvalMode};
use allmask::model::{init_parameters, read_checkpoint_file, write_checkpoint_file, Parameters};
use allmask::pipeline::{baseline_next_token_segment, run_pipeline, AllMaskVariant, Paradigm, PipelineOptions, DEFAULT_MAX_NEW_TOKENS};
use allmask::training::{train, write_loss_csv};
use allmask::vocab::Vocabulary;

#[derive(Parser, Debug)]
#[command(name = "allmask", version, about = "Toy referring segmentation with one-pass mask prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run config file (`key = value` lines)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed; falls back to $ALLMASK_SEED, then the config value [default: 0]
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Patch grid side P [default: 8]
    #[arg(long, global = true, value_name = "P")]
    grid: Option<usize>,
    /// Number of samples [default: gen-data 100, train 5000, eval 1000]
    #[arg(long, global = true, value_name = "N")]
    count: Option<usize>,
    /// Checkpoint to load [default: <out>/model.ckpt]
    #[arg(long, global = true, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "allmask-out")]
    out: PathBuf,
    /// Mask generation paradigm
    #[arg(long, global = true, value_enum, default_value_t = Mode::Allmask)]
    mode: Mode,
    /// Refine masks by region growing from a keypoint
    #[arg(long, global = true)]
    refine: bool,
    /// Causal attention inside the placeholder block
    #[arg(long, global = true)]
    no_hybrid: bool,
    /// Placeholders without patch features
    #[arg(long, global = true)]
    no_fusion: bool,
    /// Timed benchmark repeats after one warm-up run
    #[arg(long, global = true, value_name = "N", default_value_t = 5)]
    repeats: usize,
    /// Optimizer steps [default: 5000]
    #[arg(long, global = true, value_name = "N")]
    steps: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic split as a text record file
    GenData,
    /// Train a model and write <out>/model.ckpt
    Train,
    /// Evaluate a checkpoint on the validation split
    Eval,
    /// Time mask generation on one fixed sample
    Bench,
    /// Run one sample and print the response and mask grids
    Demo,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Allmask,
    Nexttoken,
}

impl Cli {
    fn variant(&self) -> AllMaskVariant {
        let mut v = AllMaskVariant::default();
        if self.no_hybrid {
            v.block = AllMaskVariant::no_hybrid().block;
        }
        if self.no_fusion {
            v.fusion = AllMaskVariant::no_fusion().fusion;
        }
        v
    }

    fn paradigm(&self) -> Paradigm {
        match self.mode {
            Mode::Allmask => Paradigm::AllMask(self.variant()),
            Mode::Nexttoken => Paradigm::NextToken,
        }
    }

    fn eval_mode(&self) -> EvalMode {
        match self.mode {
            Mode::Allmask => EvalMode::AllMask {
                variant: self.variant(),
                refine: self.refine,
            },
            Mode::Nexttoken => EvalMode::NextToken,
        }
    }

    fn ckpt_path(&self) -> PathBuf {
        self.ckpt.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    /// Defaults, then the config file (or the config saved next to the
    /// checkpoint), then flags.
    fn resolve(&self, use_ckpt_config: bool) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.merge_text(&fs::read_to_string(path)?)?;
        } else if use_ckpt_config {
            let sibling = self.ckpt_path().with_file_name("config.txt");
            if sibling.exists() {
                cfg.merge_text(&fs::read_to_string(sibling)?)?;
            }
        }
        cfg.seed = resolve_seed(self.seed, cfg.seed)?;
        if let Some(g) = self.grid {
            cfg.grid = g;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn flag_echo(&self) -> String {
        format!(
            "# mode = {:?}\n# refine = {}\n# no_hybrid = {}\n# no_fusion = {}\n",
            self.mode, self.refine, self.no_hybrid, self.no_fusion
        )
        .to_lowercase()
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

fn prepare_out(cli: &Cli, cfg: &RunConfig, extra: &str) -> Result<()> {
    fs::create_dir_all(&cli.out)?;
    write_file(&cli.out.join("config.txt"), &format!("{}{extra}", cfg.to_text()))
}

fn load_params(cli: &Cli, cfg: &RunConfig) -> Result<Parameters<f32>> {
    read_checkpoint_file(&cli.ckpt_path(), &cfg.model_config())
}

fn cmd_gen_data(cli: &Cli, vocab: &Vocabulary) -> Result<()> {
    let cfg = cli.resolve(false)?;
    let spec = DatasetSpec {
        allow_no_object: cfg.allow_no_object,
        cell_scale: cfg.cell_scale,
        ..DatasetSpec::new(cfg.seed, cli.count.unwrap_or(100), vec![cfg.grid])
    };
    let samples = make_dataset(&spec, vocab)?;
    prepare_out(cli, &cfg, &format!("# count = {}\n", spec.count))?;
    let records: Vec<SampleRecord> = samples.iter().map(SampleRecord::from).collect();
    let mut f = io::BufWriter::new(fs::File::create(cli.out.join("data.txt"))?);
    write_records(&mut f, &records)?;
    f.flush()?;
    let none = samples.iter().filter(|s| !s.has_target()).count();
    let metrics = format!("samples = {}\nno_object = {none}\n", samples.len());
    write_file(&cli.out.join("metrics.txt"), &metrics)?;
    print!("{metrics}");
    Ok(())
}

fn cmd_train(cli: &Cli, vocab: &Vocabulary) -> Result<()> {
    let mut cfg = cli.resolve(false)?;
    if let Some(n) = cli.count {
        cfg.train_count = n;
        cfg.validate()?;
    }
    prepare_out(cli, &cfg, &cli.flag_echo())?;
    let data = make_dataset(&cfg.train_split(), vocab)?;
    let params = init_parameters::<f32>(&cfg.model_config())?;
    let mut tc = cfg.train_config();
    if tc.checkpoint_every > 0 {
        tc.checkpoint_dir = Some(cli.out.clone());
    }
    let every = (tc.steps / 20).max(1);
    let out = train(params, &data, &tc, cli.paradigm(), vocab, |p| {
        if p.step % every == 0 || p.step + 1 == tc.steps {
            eprintln!(
                "step {:>6}  text {:.4}  bce {:.4}  dice {:.4}  total {:.4}",
                p.step, p.l_text, p.l_bce, p.l_dice, p.l_total
            );
        }
    })?;
    write_checkpoint_file(&out.params, &cli.ckpt_path())?;
    let mut f = fs::File::create(cli.out.join("loss.csv"))?;
    write_loss_csv(&mut f, &out.curve)?;
    let last = out.curve.last().copied();
    let metrics = match last {
        Some(p) => format!(
            "steps = {}\nl_text = {:.6}\nl_bce = {:.6}\nl_dice = {:.6}\nl_total = {:.6}\n",
            out.curve.len(),
            p.l_text,
            p.l_bce,
            p.l_dice,
            p.l_total
        ),
        None => "steps = 0\n".to_string(),
    };
    write_file(&cli.out.join("metrics.txt"), &metrics)?;
    print!("{metrics}");
    Ok(())
}

fn cmd_eval(cli: &Cli, vocab: &Vocabulary) -> Result<()> {
    let mut cfg = cli.resolve(true)?;
    if let Some(n) = cli.count {
        cfg.val_count = n;
        cfg.validate()?;
    }
    let params = load_params(cli, &cfg)?;
    prepare_out(cli, &cfg, &cli.flag_echo())?;
    let split = make_dataset(&cfg.val_split(), vocab)?;
    let report = evaluate(&params, &split, cli.eval_mode(), vocab)?;
    let mut f = io::BufWriter::new(fs::File::create(cli.out.join("eval.csv"))?);
    report.write_csv(&mut f)?;
    f.flush()?;
    let table = report.summary_table();
    write_file(&cli.out.join("metrics.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_bench(cli: &Cli, vocab: &Vocabulary) -> Result<()> {
    let mut cfg = cli.resolve(true)?;
    if cli.grid.is_none() {
        cfg.grid = 16.min(cfg.max_grid_side);
    }
    let params = if cli.ckpt.is_some() || cli.ckpt_path().exists() {
        load_params(cli, &cfg)?
    } else {
        init_parameters(&cfg.model_config())?
    };
    prepare_out(cli, &cfg, &cli.flag_echo())?;
    let sample = SyntheticSample::generate(cfg.seed, cfg.grid, false, cfg.cell_scale, vocab)?;
    let report = benchmark(&params, &sample, cli.eval_mode(), cli.repeats, vocab)?;
    let csv = format!("{}\n{}\n", BenchReport::CSV_HEADER, report.csv_row());
    write_file(&cli.out.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_demo(cli: &Cli, vocab: &Vocabulary) -> Result<()> {
    let cfg = cli.resolve(true)?;
    let params = load_params(cli, &cfg)?;
    prepare_out(cli, &cfg, &cli.flag_echo())?;
    let sample = SyntheticSample::generate(cfg.seed, cfg.grid, true, cfg.cell_scale, vocab)?;
    let p = cfg.grid;
    let mut text = format!("instruction: {}\n", vocab.decode_str(&sample.instruction)?);
    let pred = match cli.mode {
        Mode::Allmask => {
            let opts = PipelineOptions {
                variant: cli.variant(),
                refine: cli.refine,
                ..PipelineOptions::default()
            };
            let r = run_pipeline(&params, &sample.pixels, p, &sample.instruction, &opts)?;
            text.push_str(&r.render(vocab));
            let mut union = vec![false; p * p];
            for m in &r.masks {
                for (u, &b) in union.iter_mut().zip(m.final_mask()) {
                    *u |= b;
                }
            }
            union
        }
        Mode::Nexttoken => {
            let grid = params.patch_features(&sample.pixels, p)?;
            let out = baseline_next_token_segment(&params, &sample.instruction, &grid, vocab, DEFAULT_MAX_NEW_TOKENS)?;
            text.push_str(&vocab.decode_str(&out.response_prefix)?);
            text.push_str(" <seg>\n");
            text.push_str(&out.prediction.render());
            text.push_str(&format!("steps={} decoding_errors={}\n", out.steps, out.decoding_errors));
            if out.seg_emitted {
                out.prediction.binary
            } else {
                vec![false; p * p]
            }
        }
    };
    text.push_str("prediction vs ground truth:\n");
    text.push_str(&render_pair(&pred, &sample.gt_mask, p));
    let score = iou(&pred, &sample.gt_mask)?;
    write_file(&cli.out.join("metrics.txt"), &format!("seed = {}\niou = {score:.6}\n", cfg.seed))?;
    print!("{text}");
    println!("iou={score:.4}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let vocab = Vocabulary::toy();
    match cli.command {
        Command::GenData => cmd_gen_data(cli, &vocab),
        Command::Train => cmd_train(cli, &vocab),
        Command::Eval => cmd_eval(cli, &vocab),
        Command::Bench => cmd_bench(cli, &vocab),
        Command::Demo => cmd_demo(cli, &vocab),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(match e {
                Error::Io(_) => 3,
                _ => 2,
            })
        }
    }
}

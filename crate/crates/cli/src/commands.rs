use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use satr_autodiff::io as tensor_io;
use satr_core::backbone::SliceStack;
use satr_core::config::RunConfig;
use satr_core::dataset::{Dataset, Split};
use satr_core::export::export_attention;
use satr_core::froc::FrocResult;
use satr_core::model::Detector;
use satr_core::satr::Variant;
use satr_core::train::{evaluate, train};
use serde_json::json;

use crate::checks::{self, Outcome};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "satr", version, about = "Slice-attention lesion detection: data, training, evaluation and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Volume seeds: a range `a..b` (end exclusive) or a comma list.
        #[arg(long, default_value = "0..86")]
        seeds: String,
    },
    /// Train one variant on a generated dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FROC of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run the invariant suite (oracles, attention structure, FROC, data).
    Check {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the gradient suite.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Forward-pass timings, baseline vs satr.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
    /// Dump attention weights for one input.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A tensor file `[2N+1, H, W]` / `[2N+1, 1, H, W]`, or a dataset
        /// directory (see `--split` and `--index`).
        #[arg(long)]
        input_sample: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let cfg = base.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `a..b` (end exclusive) or `a,b,c`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        (a..b).collect()
    } else {
        text.split(',').map(|s| s.trim().parse::<u64>()).collect::<std::result::Result<_, _>>()?
    };
    ensure!(!seeds.is_empty(), "no seeds in {text:?}");
    Ok(seeds)
}

/// Runs a command; `Ok(false)` means a check failed.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out, seeds } => gen_data(&config.load()?, &out, &parse_seeds(&seeds).context("--seeds")?),
        Command::Train { config, data_dir, variant, seed, out } => {
            let mut cfg = config.load()?;
            if let Some(v) = variant {
                cfg = cfg.with_variant(v);
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = data_dir.or(cfg.paths.data_dir.clone()).context("no dataset: pass --data-dir or set paths.data_dir")?;
            let out = out.or(cfg.paths.out.clone()).context("no output directory: pass --out or set paths.out")?;
            train_cmd(&cfg, &data, &out)
        }
        Command::Eval { checkpoint, data_dir, split, json } => eval_cmd(&checkpoint, &data_dir, split, json),
        Command::Check { config } => {
            config.load()?;
            Ok(report("check", checks::invariant_suite()))
        }
        Command::Gradcheck { config, tol } => {
            config.load()?;
            ensure!(tol > 0.0, "--tol must be positive");
            Ok(report("gradcheck", checks::gradient_suite(tol)))
        }
        Command::Bench { config, iters } => bench(&config.load()?, iters),
        Command::ExportAttn { checkpoint, input_sample, split, index, out } => {
            export_cmd(&checkpoint, &input_sample, split, index, &out)
        }
    }
}

fn report(suite: &str, outcomes: Vec<Outcome>) -> bool {
    let mut out = std::io::stdout().lock();
    for o in &outcomes {
        let _ = writeln!(out, "{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        let _ = writeln!(out, "{suite}: all {} properties pass", outcomes.len());
        true
    } else {
        let _ = writeln!(out, "{suite}: {} of {} failed: {}", failed.len(), outcomes.len(), failed.join(", "));
        false
    }
}

fn gen_data(cfg: &RunConfig, out: &Path, seeds: &[u64]) -> Result<bool> {
    let ds = Dataset::generate(&cfg.synth, cfg.radius, seeds)?;
    ds.write(out)?;
    eprintln!("wrote {} volumes ({} images) to {}", ds.volumes.len(), ds.image_count(), out.display());
    Ok(true)
}

fn froc_json(f: Option<FrocResult>) -> serde_json::Value {
    f.map_or(serde_json::Value::Null, |f| serde_json::Value::Object(f.to_json()))
}

fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<bool> {
    let ds = Dataset::read(data)?;
    ensure!(
        ds.radius == cfg.radius,
        "dataset window radius {} differs from config radius {}",
        ds.radius,
        cfg.radius
    );
    let (train_set, val_set, test_set) = (ds.samples(Split::Train)?, ds.samples(Split::Val)?, ds.samples(Split::Test)?);
    let mut det = Detector::new(&cfg.model, cfg.radius, ds.config.height, ds.config.width, cfg.seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join("metrics.jsonl");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let started = Instant::now();
    let rep = train(&mut det, &train_set, &val_set, &cfg.train, cfg.seed, &mut log)?;
    log.flush()?;
    let test = if test_set.iter().any(|s| !s.boxes.is_empty()) { Some(evaluate(&det, &test_set)?) } else { None };
    let run = json!({ "seed": cfg.seed, "config": cfg.to_json() });
    det.save(&out.join("checkpoint"), run)?;
    let summary = json!({
        "variant": det.variant(),
        "seed": cfg.seed,
        "steps": cfg.train.steps,
        "final_loss": rep.final_loss,
        "val": froc_json(rep.final_val),
        "test": froc_json(test),
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    eprintln!(
        "{} seed {}: final loss {:.4}, test avg {}, {:.1}s",
        det.variant(),
        cfg.seed,
        rep.final_loss,
        test.map_or("n/a".into(), |t| format!("{:.4}", t.average)),
        started.elapsed().as_secs_f64()
    );
    Ok(true)
}

fn eval_cmd(checkpoint: &Path, data: &Path, split: Split, as_json: bool) -> Result<bool> {
    let (det, _) = Detector::load(checkpoint)?;
    let ds = Dataset::read(data)?;
    ensure!(ds.radius == det.radius(), "dataset radius {} differs from checkpoint radius {}", ds.radius, det.radius());
    ensure!(
        (ds.config.height, ds.config.width) == det.image_size(),
        "dataset images are {}x{}, checkpoint expects {:?}",
        ds.config.height,
        ds.config.width,
        det.image_size()
    );
    let f = evaluate(&det, &ds.samples(split)?)?;
    if as_json {
        let mut doc = f.to_json();
        doc.insert("split".into(), json!(split));
        doc.insert("variant".into(), json!(det.variant()));
        println!("{}", serde_json::Value::Object(doc));
    } else {
        println!("{:<10} {:>7} {:>7} {:>7} {:>7} {:>7}", "variant", "@0.5", "@1", "@2", "@4", "Avg.");
        let s = f.sensitivity;
        println!(
            "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            det.variant().to_string(),
            100.0 * s[0],
            100.0 * s[1],
            100.0 * s[2],
            100.0 * s[3],
            100.0 * f.average
        );
    }
    Ok(true)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank]
}

fn bench(cfg: &RunConfig, iters: usize) -> Result<bool> {
    ensure!(iters > 0, "--iters must be positive");
    let n = 2 * cfg.radius + 1;
    let (h, w) = (cfg.synth.height, cfg.synth.width);
    let stack = SliceStack::new(satr_autodiff::Tensor::from_fn(&[n, 1, h, w], |i| ((i * 7919) % 1000) as f64 / 1000.0), cfg.radius)?;
    println!("forward pass, {n} slices of {h}x{w}, {iters} iterations");
    println!("{:<10} {:>12} {:>12} {:>10}", "variant", "median ms", "p90 ms", "params");
    for variant in [Variant::Baseline, Variant::Satr] {
        let det = Detector::new(&cfg.clone().with_variant(variant).model, cfg.radius, h, w, cfg.seed)?;
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            let start = Instant::now();
            det.predict(&stack)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        println!(
            "{:<10} {:>12.3} {:>12.3} {:>10}",
            variant.to_string(),
            percentile(&times, 0.5),
            percentile(&times, 0.9),
            det.params().num_scalars()
        );
    }
    Ok(true)
}

fn load_input(path: &Path, split: Split, index: usize, radius: usize) -> Result<SliceStack> {
    if path.is_dir() {
        let ds = Dataset::read(path)?;
        let samples = ds.samples(split)?;
        let n = samples.len();
        return samples
            .into_iter()
            .nth(index)
            .map(|s| s.stack)
            .with_context(|| format!("sample {index} out of range: the {split} split has {n} samples"));
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let t = tensor_io::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    let t = match *t.shape() {
        [s, h, w] => t.reshape(&[s, 1, h, w])?,
        [_, 1, _, _] => t,
        ref other => bail!("{}: expected [2N+1, H, W] or [2N+1, 1, H, W], got {other:?}", path.display()),
    };
    Ok(SliceStack::new(t, radius)?)
}

fn export_cmd(checkpoint: &Path, input: &Path, split: Split, index: usize, out: &Path) -> Result<bool> {
    let (det, _) = Detector::load(checkpoint)?;
    let stack = load_input(input, split, index, det.radius())?;
    let p = det.predict(&stack)?;
    let records: Vec<_> = p.attention.into_iter().flatten().collect();
    let entries = export_attention(&records, det.variant(), det.config().satr.grid, out)?;
    eprintln!("wrote {} attention maps to {}", entries.len(), out.display());
    Ok(true)
}

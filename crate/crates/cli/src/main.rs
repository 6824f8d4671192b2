use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use protoformer::bench::{count_macs, run_sweep, SweepConfig, ANCHOR_TOKENS};
use protoformer::checkpoint::Checkpoint;
use protoformer::config::RunConfig;
use protoformer::encoder::{Head, Input, Model};
use protoformer::par::Execution;
use protoformer::pgm::GrayImage;
use protoformer::proto::AssignmentImages;
use protoformer::tasks::{evaluate, train, Dataset};
use protoformer::verify::{self, Suite};
use protoformer::{Error, Result, Tensor};

/// Prototype-based attention: property suites, toy flow and depth training,
/// complexity sweeps and assignment export.
#[derive(Parser)]
#[command(name = "protoformer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suites and print a pass/fail table.
    Verify {
        /// Suite to run.
        #[arg(long, default_value = "all", value_parser = ["em", "proto", "sync", "grad", "all"])]
        suite: String,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Generate a synthetic dataset, one checkpoint file per sample.
    GenData {
        #[command(flatten)]
        task: TaskArgs,
        /// Number of samples (default from config, else 80).
        #[arg(long)]
        count: Option<usize>,
        /// Square image side in pixels (default from config, else 32).
        #[arg(long)]
        size: Option<usize>,
        /// Largest flow shift in pixels (default from config, else 3).
        #[arg(long)]
        max_shift: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and report the held-out metric.
    Train {
        #[command(flatten)]
        task: TaskArgs,
        /// Dataset directory from gen-data; generated from the seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
        /// Optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Samples per step.
        #[arg(long)]
        batch: Option<usize>,
        /// Learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Decoupled weight decay.
        #[arg(long)]
        weight_decay: Option<f64>,
        /// Run batch gradients on the calling thread only.
        #[arg(long)]
        sequential: bool,
        /// Where to write the trained model.
        #[arg(long)]
        out_checkpoint: Option<PathBuf>,
        /// Per-epoch CSV (epoch,loss,metric); a JSON summary is written next
        /// to it with the extension `.summary.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        /// Model checkpoint from train.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; generated from the seed and config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Config file supplying data.* keys for a generated dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
        /// Which part of the dataset to score.
        #[arg(long, value_enum, default_value_t = Split::HeldOut)]
        split: Split,
        /// Write the JSON result here as well as to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time prototyping against self-attention over a grid of token counts.
    Bench {
        /// Token grid: default is 256..16384 plus the 240x108 anchor.
        #[arg(long, value_enum, default_value_t = SweepKind::Default)]
        sweep: SweepKind,
        /// Timed repetitions per point (median is reported).
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[command(flatten)]
        seed: SeedArg,
        /// CSV output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one PGM per prototype and an argmax label map for one block.
    ExportAssignments {
        /// Model checkpoint from train.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (PGM); the first frame for flow models.
        #[arg(long)]
        image: PathBuf,
        /// Second frame for flow models; defaults to the first.
        #[arg(long)]
        image2: Option<PathBuf>,
        /// Stage, counted from 1; the stage after the last is the flow
        /// fusion stage.
        #[arg(long, default_value_t = 1)]
        stage: usize,
        /// Block within the stage, counted from 1.
        #[arg(long, default_value_t = 1)]
        block: usize,
        /// Frame, counted from 1.
        #[arg(long, default_value_t = 1)]
        frame: usize,
        /// Output directory.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct SeedArg {
    /// Seed for data, initialisation and random instances.
    #[arg(long, env = "PROTO_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TaskArgs {
    /// Task head; overrides the config file's `head`.
    #[arg(long, value_parser = ["flow", "depth"])]
    task: Option<String>,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl TaskArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let head = self.task.as_deref().map(str::parse).transpose()?;
        match &self.config {
            Some(path) => RunConfig::load(path, head),
            None => Ok(RunConfig::new(head.unwrap_or(Head::Flow))),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    HeldOut,
    Train,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Default,
    Quick,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Returns `Ok(false)` when the command ran but found a failure.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::Verify { suite, seed } => cmd_verify(suite.parse()?, seed.seed),
        Command::GenData {
            task,
            count,
            size,
            max_shift,
            seed,
            out,
        } => {
            let mut cfg = task.resolve()?;
            cfg.data.count = count.unwrap_or(cfg.data.count);
            cfg.data.size = size.unwrap_or(cfg.data.size);
            cfg.data.max_shift = max_shift.unwrap_or(cfg.data.max_shift);
            let data = Dataset::generate(cfg.head(), &cfg.data, seed.seed, Execution::Parallel)?;
            data.save(&out)?;
            println!("wrote {} {} samples to {}", data.len(), cfg.head().name(), out.display());
            Ok(true)
        }
        Command::Train {
            task,
            data,
            seed,
            steps,
            batch,
            lr,
            weight_decay,
            sequential,
            out_checkpoint,
            report,
        } => {
            let mut cfg = task.resolve()?;
            cfg.train.seed = seed.seed;
            cfg.train.steps = steps.unwrap_or(cfg.train.steps);
            cfg.train.batch = batch.unwrap_or(cfg.train.batch);
            cfg.train.lr = lr.unwrap_or(cfg.train.lr);
            cfg.train.weight_decay = weight_decay.unwrap_or(cfg.train.weight_decay);
            cfg.validate()?;
            let dataset = load_or_generate(data.as_deref(), &cfg, seed.seed)?;
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            };
            let (model, rep) = train(&cfg.encoder, &dataset, &cfg.train, exec)?;
            if let Some(path) = out_checkpoint {
                model.to_checkpoint().save(path)?;
            }
            if let Some(path) = report {
                let mut csv = Vec::new();
                rep.write_csv(&mut csv)?;
                fs::write(&path, csv)?;
                fs::write(summary_path(&path), rep.summary_json() + "\n")?;
            }
            println!("{}", rep.summary_json());
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            seed,
            split,
            report,
        } => {
            let model = Model::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let head = model.config().head;
            let cfg = match config {
                Some(path) => RunConfig::load(path, Some(head))?,
                None => RunConfig::new(head),
            };
            let dataset = load_or_generate(data.as_deref(), &cfg, seed.seed)?;
            if dataset.task() != Some(head) {
                return Err(Error::Config(format!("dataset does not hold {} samples", head.name())));
            }
            let (train_part, held_out) = dataset.split();
            let (samples, split_name) = match split {
                Split::HeldOut => (held_out, "held-out"),
                Split::Train => (train_part, "train"),
                Split::All => (&dataset.samples[..], "all"),
            };
            let metrics = evaluate(&model, samples, Execution::Parallel)?;
            let json = serde_json::json!({
                "task": head.name(),
                "metric_name": metric_name(head),
                "split": split_name,
                "samples": samples.len(),
                "metric": metrics.primary,
                "rmse": metrics.rmse,
            })
            .to_string();
            if let Some(path) = report {
                fs::write(path, json.clone() + "\n")?;
            }
            println!("{json}");
            Ok(true)
        }
        Command::Bench { sweep, reps, seed, out } => {
            let mut cfg = match sweep {
                SweepKind::Default => SweepConfig::default_grid(),
                SweepKind::Quick => SweepConfig::quick(),
            };
            cfg.reps = reps;
            cfg.seed = seed.seed;
            let result = run_sweep(&cfg)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            result.save(&out)?;
            let anchor = count_macs(ANCHOR_TOKENS, cfg.k, cfg.n, cfg.d);
            println!(
                "anchor T={ANCHOR_TOKENS}: N*K = {} vs T = {ANCHOR_TOKENS}; iterative/self-attention MACs = {}/{}",
                cfg.n * cfg.k,
                anchor.proto_iterative,
                anchor.self_scores
            );
            let hi = cfg.tokens.iter().copied().filter(|&t| t < ANCHOR_TOKENS).max().unwrap_or(0);
            match result.slopes(0, hi) {
                Ok((p, s)) => println!("log-log slope up to T={hi}: prototyping {p:.3}, self-attention {s:.3}"),
                Err(e) => println!("slopes unavailable: {e}"),
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::ExportAssignments {
            checkpoint,
            image,
            image2,
            stage,
            block,
            frame,
            out_dir,
        } => {
            let model = Model::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let f1 = read_image(&image)?;
            let f2 = image2.as_deref().map(read_image).transpose()?;
            let input = match model.config().head {
                Head::Flow => Input::Flow {
                    frame1: &f1,
                    frame2: f2.as_ref().unwrap_or(&f1),
                },
                Head::Depth => Input::Depth { image: &f1 },
            };
            let pred = model.forward(input)?;
            let diag = pred
                .diagnostics
                .iter()
                .find(|d| d.stage + 1 == stage && d.block + 1 == block && d.frame + 1 == frame)
                .ok_or_else(|| Error::Config(format!("no block {block} in stage {stage} for frame {frame}")))?;
            let images = AssignmentImages::new(&diag.assignment, diag.height, diag.width)?;
            let paths = images.save(&out_dir)?;
            println!(
                "wrote {} prototype maps and argmax.pgm ({}x{} tokens) to {}",
                paths.len() - 1,
                diag.width,
                diag.height,
                out_dir.display()
            );
            Ok(true)
        }
    }
}

fn cmd_verify(suite: Suite, seed: u64) -> Result<bool> {
    let reports = verify::run(suite, seed);
    println!("{:<8} {:<22} {:<6} detail", "suite", "check", "result");
    for r in &reports {
        for c in &r.checks {
            let verdict = if c.passed { "pass" } else { "FAIL" };
            println!("{:<8} {:<22} {:<6} {}", r.suite, c.name, verdict, c.detail);
        }
    }
    println!();
    let mut ok = true;
    for r in &reports {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        println!("{:<8} {verdict} ({:.2} s)", r.suite, r.elapsed.as_secs_f64());
        ok &= r.passed();
    }
    Ok(ok)
}

fn metric_name(head: Head) -> &'static str {
    match head {
        Head::Flow => "epe",
        Head::Depth => "abs_rel",
    }
}

fn summary_path(report: &Path) -> PathBuf {
    let mut name = report.file_stem().unwrap_or_default().to_os_string();
    name.push(".summary.json");
    report.with_file_name(name)
}

fn load_or_generate(dir: Option<&Path>, cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    match dir {
        Some(d) => Dataset::load(d),
        None => Dataset::generate(cfg.head(), &cfg.data, seed, Execution::Parallel),
    }
}

/// Reads a PGM as an `H x W x 1` image scaled to `[0, 1]`.
fn read_image(path: &Path) -> Result<Tensor> {
    let img = GrayImage::load(path)?;
    let scale = f64::from(img.maxval);
    let data = img.pixels.iter().map(|&p| f64::from(p) / scale).collect();
    Tensor::new(&[img.height, img.width, 1], data)
}

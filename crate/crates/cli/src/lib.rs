//! The `turbo` commands. Each command writes its report to a caller-supplied
//! writer and maps failures to exit codes: 0 ok, 1 failed check or runtime
//! error, 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use thiserror::Error;
use turbo_core::cost::{flops_estimate, sweep, sweep_csv, TRADE_OFF_PAIRS};
use turbo_core::data::{
    gen_align_sample, gen_long_video, gen_shapes_clip, write_sample, LongDataset, ShapesDataset, Split, NUM_ACTIVITIES,
    NUM_CLASSES,
};
use turbo_core::gradcheck::full_suite;
use turbo_core::io::{unix_time, Checkpoint, DatasetKind, RunConfig};
use turbo_core::model::{LongPreset, Task, TurboConfig, TurboNet};
use turbo_core::train::{
    align_recall_at_1, embed_sentences, evaluate_classify, evaluate_long, per_second_features, retrieval_top1,
    EvalRecord, EvalReport, MetricLog, TrainData, TrainParams, Trainer,
};
use turbo_core::{OpKind, TurboError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] TurboError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(TurboError::Config(_) | TurboError::Constraint(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "turbo", version, about = "Token-dropout video transformer training")]
pub struct Cli {
    /// Seed overriding the one in the config or checkpoint.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a key=value run configuration.
    Train {
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Store optimizer moments in checkpoints.
        #[arg(long)]
        with_optim: bool,
    },
    /// Evaluate a checkpoint on its task's held-out split.
    Eval {
        checkpoint: PathBuf,
        /// Fraction of tokens hidden at inference.
        #[arg(long)]
        infer_mask: Option<f64>,
        /// Frame samplings averaged per long video.
        #[arg(long)]
        multicrop: Option<usize>,
        /// Expected task; a different checkpoint task is an error.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        test_size: Option<usize>,
    },
    /// Print the cost-model sweep as CSV.
    Flops {
        /// Model from a run configuration instead of a preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// toy, reference, reference_calibration, f16, f32 or f64.
        #[arg(long, default_value = "reference")]
        preset: String,
        /// Comma-separated `m:r` pairs; defaults to the six trade-off pairs.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Finite-difference check of every op and a full toy training step.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write synthetic samples to a cache directory.
    GenData {
        /// shapes, pairs or longvideo.
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Train { config, resume, with_optim } => {
            cmd_train(&config, resume.as_deref(), with_optim, cli.seed, out).map(|_| ())
        }
        Command::Eval { checkpoint, infer_mask, multicrop, task, test_size } => {
            let opts = EvalOptions { infer_mask, multicrop, task, test_size, seed: cli.seed };
            for r in cmd_eval(&checkpoint, &opts)? {
                writeln!(out, "{}", serde_json::to_string(&r).map_err(TurboError::from)?)?;
            }
            Ok(())
        }
        Command::Flops { config, preset, sweep } => cmd_flops(config.as_deref(), &preset, sweep.as_deref(), out),
        Command::Gradcheck { inject_fault } => cmd_gradcheck(cli.seed.unwrap_or(0), inject_fault.as_deref(), out),
        Command::GenData { dataset, split, count, out: dir } => {
            cmd_gen_data(&dataset, &split, count, &dir, cli.seed.unwrap_or(0), out)
        }
    }
}

/// Model preset by name.
pub fn preset(name: &str) -> CliResult<TurboConfig> {
    Ok(match name {
        "toy" => TurboConfig::toy(Task::Classify),
        "reference" => TurboConfig::reference(),
        "reference_calibration" => TurboConfig::reference_calibration(),
        other => match LongPreset::parse(other) {
            Some(p) => TurboConfig::toy_long(p),
            None => return Err(CliError::Usage(format!("unknown preset `{other}`"))),
        },
    })
}

/// Parses `m:r[,m:r...]`; a bare `m` means `r = 0`.
pub fn parse_sweep(spec: &str) -> CliResult<Vec<(f64, f64)>> {
    spec.split(',')
        .map(|item| {
            let item = item.trim();
            let bad = || CliError::Usage(format!("bad sweep entry `{item}`, expected m:r"));
            let (m, r) = item.split_once(':').unwrap_or((item, "0"));
            let r = if r.trim() == "-" { "0" } else { r };
            Ok((m.trim().parse().map_err(|_| bad())?, r.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

pub fn cmd_flops(config: Option<&Path>, preset_name: &str, spec: Option<&str>, out: &mut dyn Write) -> CliResult<()> {
    let model = match config {
        Some(p) => RunConfig::load(p)?.model,
        None => preset(preset_name)?,
    };
    let pairs = match spec {
        Some(s) => parse_sweep(s)?,
        None => TRADE_OFF_PAIRS.to_vec(),
    };
    let reports = sweep(&model, &pairs)?;
    write!(out, "{}", sweep_csv(&reports))?;
    Ok(())
}

pub fn cmd_gradcheck(seed: u64, fault: Option<&str>, out: &mut dyn Write) -> CliResult<()> {
    let fault = match fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| CliError::Usage(format!("unknown op `{name}`")))?),
        None => None,
    };
    let reports = full_suite(seed, fault)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{:<34} coords {:>4}  max_rel_err {:.3e}  {verdict}", r.name, r.coords, r.max_rel_err)?;
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        writeln!(out, "all {} checks passed", reports.len())?;
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

pub fn cmd_gen_data(dataset: &str, split: &str, count: usize, dir: &Path, seed: u64, out: &mut dyn Write) -> CliResult<()> {
    let kind = DatasetKind::parse(dataset)
        .ok_or_else(|| CliError::Usage(format!("unknown dataset `{dataset}` (shapes, pairs, longvideo)")))?;
    let split = Split::parse(split).ok_or_else(|| CliError::Usage(format!("unknown split `{split}` (train, val, test)")))?;
    fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(count);
    for i in 0..count {
        let s = split.sample_seed(seed, i);
        let file = format!("{}_{:06}.bin", split.name(), i);
        let entry = match kind {
            DatasetKind::Shapes | DatasetKind::Pairs => {
                let clip = gen_shapes_clip(i % NUM_CLASSES, s)?;
                write_sample(&dir.join(&file), &clip.frames, s, clip.label)?;
                serde_json::json!({ "file": file, "seed": s, "label": clip.label, "caption": clip.caption })
            }
            DatasetKind::LongVideo => {
                let v = gen_long_video(i % NUM_ACTIVITIES, s)?;
                let frames = v.frames(&(0..v.n_frames()).collect::<Vec<_>>())?;
                write_sample(&dir.join(&file), &frames, s, v.activity)?;
                serde_json::json!({ "file": file, "seed": s, "label": v.activity, "segments": v.segments })
            }
        };
        index.push(entry.to_string());
    }
    fs::write(dir.join(format!("{}_index.jsonl", split.name())), index.join("\n") + "\n")?;
    writeln!(out, "wrote {count} {} samples to {}", kind.name(), dir.display())?;
    Ok(())
}

/// Paths written by a training run.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub reports: Vec<EvalReport>,
}

pub fn cmd_train(
    config: &Path,
    resume: Option<&Path>,
    with_optim: bool,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> CliResult<TrainOutputs> {
    let mut rc = RunConfig::load(config)?;
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    fs::create_dir_all(&rc.out_dir)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.header.config != rc.model {
                return Err(TurboError::Config(format!("checkpoint {} was trained with a different model", p.display())).into());
            }
            ck.restore(rc.train.clone())?
        }
        None => Trainer::new(rc.model.clone(), rc.train.clone())?,
    };
    let metrics = rc.out_dir.join("metrics.jsonl");
    trainer.log = MetricLog::to_file(&metrics)?;
    let seed = rc.train.seed;
    let geom = rc.model.geometry;
    let every = rc.checkpoint_every;
    let dir = rc.out_dir.clone();
    let save = move |t: &mut Trainer| -> turbo_core::Result<()> {
        if every > 0 && t.epoch % every == 0 && t.epoch < t.params.epochs {
            Checkpoint::from_trainer(t, with_optim, unix_time())?.save(&dir.join(format!("epoch_{:04}.ckpt", t.epoch)))?;
        }
        Ok(())
    };
    let t0 = Instant::now();
    match rc.dataset {
        DatasetKind::Shapes | DatasetKind::Pairs => {
            let train = ShapesDataset::generate(&geom, Split::Train, rc.train_size, seed)?;
            trainer.fit(TrainData::Shapes(&train), save)?;
        }
        DatasetKind::LongVideo => {
            let train = LongDataset::generate(Split::Train, rc.train_size, seed)?;
            trainer.fit(TrainData::Long(&train), save)?;
        }
    }
    let train_seconds = t0.elapsed().as_secs_f64();
    let checkpoint = rc.out_dir.join("final.ckpt");
    Checkpoint::from_trainer(&trainer, with_optim, unix_time())?.save(&checkpoint)?;
    let opts = EvalOptions {
        infer_mask: Some(rc.train.infer_mask),
        multicrop: Some(rc.train.multicrop),
        task: None,
        test_size: Some(rc.test_size),
        seed: Some(seed),
    };
    let reports = evaluate(&trainer.net, trainer.step, &trainer.params, &opts)?;
    for r in &reports {
        trainer.log.eval(&EvalRecord {
            eval: true,
            step: trainer.step,
            task: r.task.clone(),
            metric_name: r.metric_name.clone(),
            value: r.value,
        })?;
    }
    trainer.log.flush()?;
    let report = rc.out_dir.join("report.json");
    let summary = serde_json::json!({ "train_seconds": train_seconds, "steps": trainer.step, "eval": reports });
    fs::write(&report, serde_json::to_string_pretty(&summary).map_err(TurboError::from)? + "\n")?;
    for r in &reports {
        writeln!(out, "{}", serde_json::to_string(r).map_err(TurboError::from)?)?;
    }
    Ok(TrainOutputs { metrics, checkpoint, report, reports })
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub infer_mask: Option<f64>,
    pub multicrop: Option<usize>,
    pub task: Option<String>,
    pub test_size: Option<usize>,
    pub seed: Option<u64>,
}

/// Held-out clips used by the retrieval metric, and its batch size.
const RETRIEVAL_BATCH: usize = 16;
/// Alignment videos scored by the contrastive evaluation.
const ALIGN_SAMPLES: usize = 20;

pub fn cmd_eval(checkpoint: &Path, opts: &EvalOptions) -> CliResult<Vec<EvalReport>> {
    let ck = Checkpoint::load(checkpoint)?;
    let task = ck.header.config.task;
    if let Some(want) = &opts.task {
        let want = Task::parse(want).ok_or_else(|| CliError::Usage(format!("unknown task `{want}`")))?;
        if want != task {
            return Err(TurboError::Config(format!(
                "checkpoint holds a {} model, not {}",
                task.name(),
                want.name()
            ))
            .into());
        }
    }
    let net = ck.to_net()?;
    Ok(evaluate(&net, ck.header.step, &ck.header.train, opts)?)
}

/// Task metrics of `net` on freshly generated held-out data.
pub fn evaluate(net: &TurboNet<f32>, steps: u64, params: &TrainParams, opts: &EvalOptions) -> turbo_core::Result<Vec<EvalReport>> {
    let c = &net.config;
    let seed = opts.seed.unwrap_or(params.seed);
    let mask = opts.infer_mask.unwrap_or(params.infer_mask);
    turbo_core::model::check_inference_ratio(mask)?;
    let flops = flops_estimate(c, mask, 0.0)?.total_gflops();
    let report = |metric: &str, value: f64, samples: usize, t: Instant| EvalReport {
        task: c.task.name().into(),
        metric_name: metric.into(),
        value,
        samples,
        steps,
        wall_seconds: t.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
        flops_per_step: flops,
    };
    let t = Instant::now();
    Ok(match c.task {
        Task::Classify => {
            let ds = ShapesDataset::generate(&c.geometry, Split::Test, opts.test_size.unwrap_or(400), seed)?;
            vec![report("accuracy", evaluate_classify(net, &ds, mask, seed, 50)?, ds.len(), t)]
        }
        Task::LongClassify => {
            let ds = LongDataset::generate(Split::Test, opts.test_size.unwrap_or(80), seed)?;
            let crops = opts.multicrop.unwrap_or(params.multicrop);
            vec![report("accuracy", evaluate_long(net, &ds, crops, mask, seed)?, ds.len(), t)]
        }
        Task::Contrast => {
            let ds = ShapesDataset::generate(&c.geometry, Split::Test, opts.test_size.unwrap_or(400), seed)?;
            let embedder = turbo_core::data::TextEmbedder::new(params.seed, c.text_dim);
            let top1 = retrieval_top1(net, &embedder, &ds, RETRIEVAL_BATCH, mask, seed)?;
            let first = report("retrieval_top1", top1, ds.len() / RETRIEVAL_BATCH * RETRIEVAL_BATCH, t);
            let t = Instant::now();
            let mut total = 0.0;
            for i in 0..ALIGN_SAMPLES {
                let s = gen_align_sample(Split::Test.sample_seed(seed, i))?;
                let feats = per_second_features(net, &s.video)?;
                let sents = embed_sentences(net, &embedder, &s.sentences)?;
                total += align_recall_at_1(&feats, &sents, &s.truth)?;
            }
            vec![first, report("align_r1", total / ALIGN_SAMPLES as f64, ALIGN_SAMPLES, t)]
        }
    })
}

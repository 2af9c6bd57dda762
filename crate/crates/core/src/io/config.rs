//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every other line must
//! be `key = value` with a known key, given at most once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TurboError};
use crate::model::{LongPreset, Task, TurboConfig};
use crate::objectives::LogBase;
use crate::partition::check_ratios;
use crate::patch::PatchGeometry;
use crate::train::TrainParams;

/// Keys accepted in a run configuration file.
pub const KEYS: &[&str] = &[
    "task",
    "preset",
    "frames",
    "image_size",
    "patch_t",
    "patch_h",
    "patch_w",
    "enc_depth",
    "enc_dim",
    "enc_heads",
    "dec_depth",
    "dec_dim",
    "dec_heads",
    "mlp_ratio",
    "mask_ratio",
    "recon_ratio",
    "num_classes",
    "proj_dim",
    "text_dim",
    "batch_size",
    "epochs",
    "base_lr",
    "min_lr",
    "warmup_epochs",
    "weight_decay",
    "clip_norm",
    "seed",
    "dataset",
    "train_size",
    "test_size",
    "normalize_embeddings",
    "normalize_targets",
    "temperature",
    "log_base",
    "infer_mask",
    "multicrop",
    "checkpoint_every",
    "out_dir",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// Labelled shape clips.
    Shapes,
    /// Shape clips paired with captions.
    Pairs,
    /// Long procedural videos.
    LongVideo,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shapes" => Some(Self::Shapes),
            "pairs" => Some(Self::Pairs),
            "longvideo" => Some(Self::LongVideo),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Shapes => "shapes",
            Self::Pairs => "pairs",
            Self::LongVideo => "longvideo",
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classify => Self::Shapes,
            Task::Contrast => Self::Pairs,
            Task::LongClassify => Self::LongVideo,
        }
    }
}

/// A fully resolved run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: TurboConfig,
    pub train: TrainParams,
    pub dataset: DatasetKind,
    pub train_size: usize,
    pub test_size: usize,
    /// Write a checkpoint after every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
}

/// Raw `(line, key, value)` triples in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let Some((k, v)) = s.split_once('=') else {
            return Err(TurboError::Config(format!("line {line}: expected `key = value`, got `{s}`")));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(TurboError::Config(format!("line {line}: empty key")));
        }
        if !KEYS.contains(&k) {
            return Err(TurboError::Config(format!("line {line}: unknown key `{k}`")));
        }
        if let Some((first, ..)) = out.iter().find(|(_, key, _)| key == k) {
            return Err(TurboError::Config(format!("line {line}: key `{k}` already set on line {first}")));
        }
        out.push((line, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| TurboError::Config(format!("line {line}: `{key}` expects a number, got `{v}`")))
}

fn flag(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(TurboError::Config(format!("line {line}: `{key}` expects true or false, got `{v}`"))),
    }
}

/// Model preset named by `preset`, defaulting per task.
fn base_model(task: Task, preset: Option<(usize, &str)>) -> Result<TurboConfig> {
    let Some((line, name)) = preset else {
        return Ok(match task {
            Task::LongClassify => TurboConfig::toy_long(LongPreset::F32),
            t => TurboConfig::toy(t),
        });
    };
    let mut c = match name {
        "toy" if task == Task::LongClassify => TurboConfig::toy_long(LongPreset::F32),
        "toy" => TurboConfig::toy(task),
        "reference" => TurboConfig::reference(),
        "reference_calibration" => TurboConfig::reference_calibration(),
        other => match LongPreset::parse(other) {
            Some(p) if task == Task::LongClassify => TurboConfig::toy_long(p),
            Some(_) => {
                return Err(TurboError::Config(format!("line {line}: preset `{other}` needs task = long")));
            }
            None => return Err(TurboError::Config(format!("line {line}: unknown preset `{other}`"))),
        },
    };
    c.task = task;
    Ok(c)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let get = |k: &str| pairs.iter().find(|(_, key, _)| key == k).map(|(l, _, v)| (*l, v.as_str()));
        let (task_line, task) = get("task").ok_or_else(|| TurboError::Config("missing required key `task`".into()))?;
        let task = Task::parse(task)
            .ok_or_else(|| TurboError::Config(format!("line {task_line}: unknown task `{task}` (classify, contrast, long)")))?;
        let mut model = base_model(task, get("preset"))?;
        let mut train = TrainParams::default();
        let mut dataset = DatasetKind::for_task(task);
        let (mut train_size, mut test_size) = match task {
            Task::LongClassify => (640, 80),
            _ => (2000, 400),
        };
        let mut checkpoint_every = 0;
        let mut out_dir = PathBuf::from("runs/out");
        let g = model.geometry;
        let (mut frames, mut size, mut pt, mut ph, mut pw) = (g.frames, g.height, g.patch_t, g.patch_h, g.patch_w);
        let mut geometry_line = None;

        for (line, key, v) in &pairs {
            let (line, v) = (*line, v.as_str());
            match key.as_str() {
                "task" | "preset" => {}
                "frames" | "image_size" | "patch_t" | "patch_h" | "patch_w" => {
                    let x = num(line, key, v)?;
                    match key.as_str() {
                        "frames" => frames = x,
                        "image_size" => size = x,
                        "patch_t" => pt = x,
                        "patch_h" => ph = x,
                        _ => pw = x,
                    }
                    geometry_line = Some(line);
                }
                "enc_depth" => model.enc_depth = num(line, key, v)?,
                "enc_dim" => model.enc_dim = num(line, key, v)?,
                "enc_heads" => model.enc_heads = num(line, key, v)?,
                "dec_depth" => model.dec_depth = num(line, key, v)?,
                "dec_dim" => model.dec_dim = num(line, key, v)?,
                "dec_heads" => model.dec_heads = num(line, key, v)?,
                "mlp_ratio" => model.mlp_ratio = num(line, key, v)?,
                "mask_ratio" => model.mask_ratio = num(line, key, v)?,
                "recon_ratio" => model.recon_ratio = num(line, key, v)?,
                "num_classes" => model.num_classes = num(line, key, v)?,
                "proj_dim" => model.proj_dim = num(line, key, v)?,
                "text_dim" => model.text_dim = num(line, key, v)?,
                "batch_size" => train.batch_size = num(line, key, v)?,
                "epochs" => train.epochs = num(line, key, v)?,
                "base_lr" => train.base_lr = num(line, key, v)?,
                "min_lr" => train.min_lr = num(line, key, v)?,
                "warmup_epochs" => train.warmup_epochs = num(line, key, v)?,
                "weight_decay" => train.optimizer.weight_decay = num(line, key, v)?,
                "clip_norm" => {
                    train.optimizer.clip_norm = match v {
                        "none" | "0" => None,
                        _ => Some(num(line, key, v)?),
                    }
                }
                "seed" => train.seed = num(line, key, v)?,
                "dataset" => {
                    dataset = DatasetKind::parse(v).ok_or_else(|| {
                        TurboError::Config(format!("line {line}: unknown dataset `{v}` (shapes, pairs, longvideo)"))
                    })?;
                    if dataset != DatasetKind::for_task(task) {
                        return Err(TurboError::Config(format!(
                            "line {line}: dataset `{v}` does not fit task {}",
                            task.name()
                        )));
                    }
                }
                "train_size" => train_size = num(line, key, v)?,
                "test_size" => test_size = num(line, key, v)?,
                "normalize_embeddings" => model.normalize_embeddings = flag(line, key, v)?,
                "normalize_targets" => model.normalize_targets = flag(line, key, v)?,
                "temperature" => train.temperature = num(line, key, v)?,
                "log_base" => {
                    train.log_base = LogBase::parse(v)
                        .ok_or_else(|| TurboError::Config(format!("line {line}: log_base must be e, 2 or 10, got `{v}`")))?
                }
                "infer_mask" => train.infer_mask = num(line, key, v)?,
                "multicrop" => train.multicrop = num(line, key, v)?,
                "checkpoint_every" => checkpoint_every = num(line, key, v)?,
                "out_dir" => out_dir = PathBuf::from(v),
                other => unreachable!("key {other} listed but not handled"),
            }
        }

        let at = |k: &str| get(k).map_or(String::new(), |(l, _)| format!("line {l}: "));
        model.geometry = PatchGeometry::new(frames, size, size, g.channels, (pt, ph, pw))
            .map_err(|e| TurboError::Config(format!("{}{e}", geometry_line.map_or(String::new(), |l| format!("line {l}: ")))))?;
        check_ratios(model.mask_ratio, model.recon_ratio)
            .map_err(|e| TurboError::Config(format!("{}{e}", at("mask_ratio"))))?;
        model.validate().map_err(|e| TurboError::Config(e.to_string()))?;
        if !(train.temperature > 0.0) {
            return Err(TurboError::Config(format!("{}temperature must be positive", at("temperature"))));
        }
        if train.batch_size == 0 || train.epochs == 0 {
            return Err(TurboError::Config("batch_size and epochs must be positive".into()));
        }
        if task == Task::Contrast && train.batch_size < 2 {
            return Err(TurboError::Config(format!("{}contrastive training needs batch_size >= 2", at("batch_size"))));
        }
        if !(0.0..1.0).contains(&train.infer_mask) {
            return Err(TurboError::Config(format!("{}infer_mask must be in [0, 1)", at("infer_mask"))));
        }
        if train.multicrop == 0 {
            return Err(TurboError::Config(format!("{}multicrop must be positive", at("multicrop"))));
        }
        if train_size == 0 || test_size == 0 {
            return Err(TurboError::Config("train_size and test_size must be positive".into()));
        }
        Ok(Self { model, train, dataset, train_size, test_size, checkpoint_every, out_dir })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TurboError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            TurboError::Config(m) => TurboError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

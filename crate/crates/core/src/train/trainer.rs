//! The joint training loop shared by all three tasks.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cost::flops_estimate;
use crate::data::{sample_long_video_frames, stack, LongDataset, ShapesDataset, TextEmbedder};
use crate::error::{Result, TurboError};
use crate::model::{pmae_targets, Session, Task, TurboConfig, TurboNet};
use crate::objectives::{ce_loss, combine_graph, info_nce, lambda_ce, lambda_nce, pmae_loss, LogBase, LossBundle, LossWeights};
use crate::partition::{make_partition, PartitionPlan};
use crate::patch::patchify;
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

use super::metrics::{MetricLog, StepRecord};
use super::optim::{adamw_step, AdamW, OptimState};
use super::schedule::Schedule;

/// Optimization and evaluation settings that are not part of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub optimizer: AdamW,
    pub seed: u64,
    pub temperature: f64,
    pub log_base: LogBase,
    /// Mask ratio used at evaluation time.
    pub infer_mask: f64,
    /// Frame samplings averaged per long video at evaluation time.
    pub multicrop: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            base_lr: 1e-3,
            min_lr: 0.0,
            warmup_epochs: 2.0,
            optimizer: AdamW::default(),
            seed: 0,
            temperature: 1.0,
            log_base: LogBase::E,
            infer_mask: 0.0,
            multicrop: 10,
        }
    }
}

/// What a batch is supervised with.
pub enum Targets {
    Labels(Vec<usize>),
    /// Frozen text features `[B, text_dim]`.
    Text(Tensor<f32>),
}

/// Training data for one of the three tasks.
#[derive(Clone, Copy)]
pub enum TrainData<'a> {
    Shapes(&'a ShapesDataset),
    Long(&'a LongDataset),
}

impl TrainData<'_> {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Shapes(d) => d.len(),
            TrainData::Long(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Model, optimizer state, schedule position and metric log of one run.
pub struct Trainer {
    pub net: TurboNet<f32>,
    pub opt: OptimState,
    pub params: TrainParams,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub log: MetricLog,
    /// Frozen text encoder for contrastive training.
    pub embedder: Option<TextEmbedder>,
    flops_gf: f64,
}

impl Trainer {
    pub fn new(config: TurboConfig, params: TrainParams) -> Result<Self> {
        let net = TurboNet::new(config, derive_seed(&[params.seed, 0x1417]))?;
        Self::from_net(net, params)
    }

    pub fn from_net(net: TurboNet<f32>, params: TrainParams) -> Result<Self> {
        let c = &net.config;
        if params.batch_size == 0 || params.epochs == 0 {
            return Err(TurboError::Config("batch_size and epochs must be positive".into()));
        }
        if c.task == Task::Contrast && params.batch_size < 2 {
            return Err(TurboError::Config(format!(
                "contrastive training needs batch_size >= 2, got {}",
                params.batch_size
            )));
        }
        let flops_gf = flops_estimate(c, c.mask_ratio, c.recon_ratio)?.total_gflops();
        let embedder = (c.task == Task::Contrast).then(|| TextEmbedder::new(params.seed, c.text_dim));
        let opt = OptimState::new(&net.params);
        Ok(Self { net, opt, params, step: 0, epoch: 0, log: MetricLog::new(), embedder, flops_gf })
    }

    pub fn config(&self) -> &TurboConfig {
        &self.net.config
    }

    pub fn schedule(&self, n_samples: usize) -> Schedule {
        Schedule {
            base_lr: self.params.base_lr,
            min_lr: self.params.min_lr,
            warmup_epochs: self.params.warmup_epochs,
            total_epochs: self.params.epochs,
            steps_per_epoch: self.batches_per_epoch(n_samples),
        }
    }

    pub fn batches_per_epoch(&self, n_samples: usize) -> usize {
        let b = self.params.batch_size;
        let full = n_samples / b;
        let rest = n_samples % b;
        // a contrastive batch of one has no negatives
        full + usize::from(rest > 0 && !(self.config().task == Task::Contrast && rest < 2))
    }

    pub fn weights(&self) -> Result<LossWeights> {
        let c = self.config();
        Ok(if c.task.uses_classifier() {
            LossWeights { lambda_ce: lambda_ce(c.num_classes, self.params.log_base)?, lambda_nce: 0.0 }
        } else {
            LossWeights { lambda_ce: 0.0, lambda_nce: lambda_nce(self.params.batch_size, self.params.log_base)? }
        })
    }

    /// Training partitions for the samples of the current step.
    pub fn plans(&self, batch: usize) -> Result<Vec<PartitionPlan>> {
        let c = self.config();
        (0..batch)
            .map(|i| {
                make_partition(c.n_tokens(), c.mask_ratio, c.recon_ratio, derive_seed(&[self.params.seed, self.step, i as u64]))
            })
            .collect()
    }

    /// Forward, backward and one optimizer update on `patches [B, n, P]`.
    pub fn train_step(&mut self, patches: &Tensor<f32>, targets: &Targets, lr: f64) -> Result<LossBundle> {
        let b = patches.shape()[0];
        let plans = self.plans(b)?;
        let weights = self.weights()?;
        let recon_targets = pmae_targets(patches, &plans, self.config().normalize_targets)?;
        let task = self.config().task;
        let grads = {
            let mut s = Session::new(&self.net.params);
            let out = self.net.forward_visual(&mut s, patches, &plans)?;
            let downstream = match targets {
                Targets::Labels(labels) => {
                    let logits = self.net.classify_head(&mut s, out.z_cls)?;
                    ce_loss(&mut s.g, logits, labels)?
                }
                Targets::Text(feats) => {
                    let z_v = self.net.project_visual(&mut s, out.z_cls)?;
                    let t = s.g.constant(feats.clone());
                    let z_t = self.net.project_text(&mut s, t)?;
                    info_nce(&mut s.g, z_v, z_t, self.params.temperature)?
                }
            };
            let pmae = pmae_loss(&mut s.g, out.predicted, &recon_targets)?;
            let (total, bundle) = combine_graph(&mut s.g, task, Some(downstream), pmae, weights)?;
            s.g.backward(total)?;
            (s.into_grads(), bundle)
        };
        let (grads, bundle) = grads;
        self.net.params.zero_grad();
        self.net.params.accumulate(grads);
        adamw_step(&mut self.net.params, &mut self.opt, &self.params.optimizer, lr)?;
        self.step += 1;
        Ok(bundle)
    }

    /// Patches and targets for the dataset samples at `indices`.
    pub fn make_batch(&self, data: TrainData<'_>, indices: &[usize]) -> Result<(Tensor<f32>, Targets)> {
        let c = self.config();
        match data {
            TrainData::Shapes(ds) => {
                let patches = ds.batch(indices)?;
                let targets = match &self.embedder {
                    Some(e) => {
                        let mut feats = Vec::with_capacity(indices.len() * e.dim);
                        for &i in indices {
                            feats.extend(e.embed(&ds.items[i].caption)?);
                        }
                        Targets::Text(Tensor::new(vec![indices.len(), e.dim], feats)?)
                    }
                    None => Targets::Labels(indices.iter().map(|&i| ds.items[i].label).collect()),
                };
                Ok((patches, targets))
            }
            TrainData::Long(ds) => {
                let n = c.geometry.frames;
                let mut rows = Vec::with_capacity(indices.len());
                for &i in indices {
                    let v = &ds.videos[i];
                    let mut rng = rng_from(derive_seed(&[self.params.seed, 0x10f, self.epoch as u64, i as u64]));
                    let idx = sample_long_video_frames(v.n_frames(), n, &mut rng)?;
                    rows.push(patchify(&v.frames(&idx)?, &c.geometry)?);
                }
                let refs: Vec<&Tensor<f32>> = rows.iter().collect();
                Ok((stack(&refs)?, Targets::Labels(indices.iter().map(|&i| ds.videos[i].activity).collect())))
            }
        }
    }

    /// Sample order of epoch `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(derive_seed(&[self.params.seed, 0xe90c, epoch as u64])));
        order
    }

    /// Runs one epoch, logging every step.
    pub fn run_epoch(&mut self, data: TrainData<'_>) -> Result<()> {
        if data.is_empty() {
            return Err(TurboError::Data("empty training set".into()));
        }
        let schedule = self.schedule(data.len());
        let order = self.epoch_order(data.len(), self.epoch);
        for chunk in order.chunks(self.params.batch_size).take(schedule.steps_per_epoch) {
            let t0 = Instant::now();
            let (patches, targets) = self.make_batch(data, chunk)?;
            let lr = schedule.lr_at(self.step + 1);
            let bundle = self.train_step(&patches, &targets, lr)?;
            let c = self.config();
            let rec = StepRecord {
                step: self.step,
                epoch: self.epoch,
                task: c.task.name().into(),
                loss_total: bundle.total,
                loss_ce: bundle.parts.ce,
                loss_nce: bundle.parts.nce,
                loss_pmae: bundle.parts.pmae,
                lr,
                flops_gf: self.flops_gf,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                m: c.mask_ratio,
                r: c.recon_ratio,
            };
            self.log.step(&rec)?;
        }
        self.epoch += 1;
        self.log.flush()
    }

    /// Trains until `params.epochs` epochs are complete, calling `after_epoch`
    /// after each one.
    pub fn fit(&mut self, data: TrainData<'_>, mut after_epoch: impl FnMut(&mut Self) -> Result<()>) -> Result<()> {
        while self.epoch < self.params.epochs {
            self.run_epoch(data)?;
            after_epoch(self)?;
        }
        Ok(())
    }
}

fn expect_task(config: &TurboConfig, want: &[Task]) -> Result<()> {
    if want.contains(&config.task) {
        Ok(())
    } else {
        Err(TurboError::Config(format!("task {} cannot be trained on this dataset", config.task.name())))
    }
}

pub fn train_classify(config: TurboConfig, params: TrainParams, data: &ShapesDataset) -> Result<Trainer> {
    expect_task(&config, &[Task::Classify])?;
    let mut t = Trainer::new(config, params)?;
    t.fit(TrainData::Shapes(data), |_| Ok(()))?;
    Ok(t)
}

pub fn train_contrast(config: TurboConfig, params: TrainParams, data: &ShapesDataset) -> Result<Trainer> {
    expect_task(&config, &[Task::Contrast])?;
    let mut t = Trainer::new(config, params)?;
    t.fit(TrainData::Shapes(data), |_| Ok(()))?;
    Ok(t)
}

pub fn train_long(config: TurboConfig, params: TrainParams, data: &LongDataset) -> Result<Trainer> {
    expect_task(&config, &[Task::LongClassify])?;
    let mut t = Trainer::new(config, params)?;
    t.fit(TrainData::Long(data), |_| Ok(()))?;
    Ok(t)
}

//! Optimizer, schedule, the training loop and evaluation.

mod eval;
mod metrics;
mod optim;
mod schedule;
mod trainer;

pub use eval::{
    align_recall_at_1, argmax, embed_pairs, embed_sentences, eval_mask_seed, evaluate_classify, evaluate_long,
    infer_classify, infer_long_multicrop, per_second_features, retrieval_top1, EvalReport,
};
pub use metrics::{without_wall_time, EvalRecord, MetricLog, StepRecord};
pub use optim::{adamw_step, decays, AdamW, OptimState, UpdateStats};
pub use schedule::Schedule;
pub use trainer::{train_classify, train_contrast, train_long, Targets, TrainData, TrainParams, Trainer};

//! Pretraining, AdamW and the sequential segment loop.

mod config;
mod optim;
mod run;

pub use config::{Paradigm, PretrainConfig, TrainConfig, DEFAULT_LR, REFERENCE_LR};
pub use optim::{adamw_step, l2, AdamW, OptimizerState};
pub use run::{
    attach_adapters, batch_gradient, decode_greedy, evaluate, evaluate_both, pretrain_base, run_experiment, score,
    utterance_loss, Adaptation, DevScores, ExperimentOutcome, PretrainLog, SegmentReport,
};

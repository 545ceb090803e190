//! Probing and finetuning loops, samplers, the optimizer, and checkpoints.

mod checkpoint;
mod config;
mod finetune;
mod optim;
mod probe;
mod sampler;

pub use checkpoint::{metrics_csv, CheckpointBundle, EpochMetrics, METRICS_CSV_HEADER};
pub use config::{Reweight, TrainConfig};
pub use finetune::{baseline_full_finetune, baseline_lp_ft, finetune, stage2_finetune};
pub use optim::{adamw_cosine_step, cosine_lr, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use probe::{probe_class_head, stage1_linear_probe, ProbeReport};
pub use sampler::{make_sampler, Sampler};

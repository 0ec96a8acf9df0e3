//! Optimization, checkpointing and the two-phase training protocol.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod optim;
pub mod pipeline;

pub use checkpoint::{Checkpoint, CheckpointMeta, Phase};
pub use config::{RunConfig, TrainConfig};
pub use gradcheck::{run_gradcheck, GradcheckSummary, LossCheck};
pub use optim::{clip_grad_norm, one_cycle_cosine_lr, AdamW};
pub use pipeline::{evaluate, finetune, pretrain, translate_features, Evaluation, FinetuneOutcome, PretrainOutcome, Vocabularies};

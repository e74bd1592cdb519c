//! Model assembly, optimisation, checkpointing, and the training loop.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod runner;

pub use checkpoint::{load_checkpoint, save_checkpoint, BlobMeta, CheckpointManifest};
pub use model::{BatchOutput, LossHyper, Model, ModelBinding, ModelConfig, ModelId};
pub use optim::{clip_gradients, cosine_lr, early_stop, Adam, AdamParams};
pub use runner::{
    evaluate, load_datasets, train, write_epochs_csv, DatasetSel, Datasets, EpochStat, EvalStats,
    RunRecord, TrainConfig,
};

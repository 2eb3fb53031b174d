//! Group attention for timeseries transformers.
//!
//! Windows of a timeseries are embedded by a strided convolution and fed to a
//! transformer encoder whose attention can run in two modes: full softmax
//! attention, or group attention, where keys are clustered by k-means and
//! every query attends to the group centroids. The approximation error of
//! the grouped path is bounded entrywise by the key-to-centroid distance, and
//! an adaptive scheduler shrinks the number of groups while training as long
//! as that bound still holds. A batch planner learns a batch size function of
//! sequence length and group count from a memory model.

pub mod attention;
pub mod cli;
pub mod bench;
pub mod embedder;
pub mod error;
pub mod grouping;
pub mod matrix;
pub mod model;
pub mod oracle;
pub mod planner;
pub mod scheduler;
pub mod synth;
pub mod tape;
pub mod train;

pub use attention::{
    check_error_bound, group_attention, group_softmax, restore_full, vanilla_attention, AttentionLayer,
    BoundCheck, GroupAttentionOutput,
};
pub use bench::{bench_scaling, BenchConfig, BenchReport};
pub use embedder::{Scaler, Timeseries};
pub use error::{Error, Result};
pub use grouping::{grouping_stats, kmeans_group, Grouping};
pub use matrix::Matrix;
pub use model::{AttentionMode, Checkpoint, Model, ModelConfig};
pub use planner::{plan_batches, predict_batch, BatchPlan, MemoryModel, MemoryProbe};
pub use scheduler::SchedulerState;
pub use synth::{generate, DatasetKind, SynthConfig};
pub use tape::{grad_check, GradTape, Gradients, Var};
pub use train::{finetune, forecast, impute, pretrain, BatchPolicy, TrainConfig};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
struct ReadmeDoctests;

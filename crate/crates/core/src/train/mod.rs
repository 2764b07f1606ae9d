//! Supporting machinery for training runs: optimizers, learning-rate
//! schedule, datasets, configuration, checkpoints, the training loop and
//! latency benchmarks.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use bench::{bench_latency, Dispersion, LatencyReport};
pub use checkpoint::{Checkpoint, RngState};
pub use config::{Augment, LrSchedule, MoeConfig, RoutingKind, TrainConfig};
pub use data::{load_dataset, Dataset, DatasetSpec, SyntheticSpec};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use schedule::cosine_lr;
pub use trainer::{
    convert_checkpoint, evaluate, evaluate_inference_form, finetune, finetune_init, prepare_data, train,
    train_model, write_csv, EpochRecord, EvalReport, Session, StepRecord, TrainOutcome,
};

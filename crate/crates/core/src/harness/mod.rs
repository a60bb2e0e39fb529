//! Training loop, metrics, experiment configuration and run records.

mod config;
mod metrics;
mod tables;
mod train;

pub use config::{
    load_mnist_train, DataConfig, ExperimentConfig, ModelSpec, PreparedData, TrainConfig, MNIST_TRAIN_IMAGES,
    MNIST_TRAIN_LABELS,
};
pub use metrics::{
    classification_metrics, regression_metrics, Averaging, ClassificationMetrics, ConfusionMatrix, Metrics,
    RegressionMetrics,
};
pub use tables::{mean_std, write_seed_table};
pub use train::{
    build_model, derive_seed, evaluate, predict_all, run_experiment, run_prepared, train, BestEpoch, EpochRecord, Run,
    RunOptions, RunRecord, RunStatus, TrainResult,
};

//! Training, evaluation, checkpoints, gradient checking and file formats.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod qdm;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{OptimizerKind, Precision, TrainConfig};
pub use eval::{evaluate, evaluate_checkpoint, heatmap, predict_to_dir, Evaluation, Prediction};
pub use gradcheck::{check_gradients, gradcheck, GradcheckOptions, GradcheckReport};
pub use metrics::{mae, rmse, EpochRecord};
pub use optim::{AdamW, AdamWConfig};
pub use train::{train, train_on, StepReport, TrainOutcome, Trainer};

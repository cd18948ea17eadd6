//! Fold training and the cross-validation driver.

pub mod cv;
pub mod fold;
pub mod loss;
pub mod optim;

use std::path::Path;

use thiserror::Error;

pub use cv::{run_cross_validation, CaseRecord, CvOptions, CvResult, CV_REPORT, DEFAULT_FOLDS};
pub use fold::{
    fold_normalization, network_seed, train_fold, EpochRecord, FoldTrainer, TrainOptions, TrainingState,
    BEST_CHECKPOINT, FINAL_CHECKPOINT, TRAINING_LOG,
};
pub use loss::{deep_supervision_weights, downsample_labels, training_loss, LossOutput, DICE_SMOOTH};
pub use optim::{poly_learning_rate, Sgd, DEFAULT_MOMENTUM};

use crate::data::DataError;
use crate::inference::InferenceError;
use crate::metrics::MetricsError;
use crate::nn::{CheckpointError, NetworkError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

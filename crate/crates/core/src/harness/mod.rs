//! Experiment configuration, data preparation, checkpoints and the
//! command-line front end.

mod checkpoint;
mod cli;
mod config;
mod experiment;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::gradcheck::GradcheckError;
use crate::hetmaml::HetError;
use crate::tasks::TaskError;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use cli::{run_cli, Cli, Command};
pub use config::{ArchConfig, ExperimentConfig, HtdConfig, ModelKind, SyntheticConfig};
pub use experiment::{
    derive_seed, prepare_data, synthetic_parts, train, write_curve_csv, write_metrics_csv, ExperimentData, Stream,
    TrainData, TrainedModel, MANIFEST, META_TEST_DIR, META_TRAIN_DIR,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Het(#[from] HetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Gradcheck(#[from] GradcheckError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{0}")]
    CheckFailed(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(path: &Path, source: csv::Error) -> Self {
        HarnessError::Csv {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 usage error, 2 validation or I/O failure, 3 failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::CheckFailed(_) => 3,
            _ => 2,
        }
    }
}

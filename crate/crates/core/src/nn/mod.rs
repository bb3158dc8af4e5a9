//! Building blocks of the three-module network: per-modality encoders, the
//! task-aware aggregation network and the classifier head.
//!
//! All forward functions work on batches: a set of `B` samples is a `[B, D]`
//! tensor per modality.

mod arch;
mod layers;
mod params;

pub use arch::{
    aggregator_count, init_mlp_params, init_params, mlp_layers, tfan_count_closed_form, Architecture,
    HetNetParams, MlpArchitecture,
};
pub use layers::{
    attention_aggregate, backbone_forward, head_forward, iterative_aggregate, lstm_cell, mlp_forward, task_embed,
    BackboneParams, HeadParams, LinearParams, LstmCellParams, TfanParams, LSTM_GATES,
};
pub use params::{glorot_bound, Group, ParamEntry, ParamSet};

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("parameter list does not match the architecture layout")]
    ParamLayout,
    #[error("expected {expected} modalities, got {got}")]
    ModalityCount { expected: usize, got: usize },
    #[error("modality {modality}: expected dimension {expected}, got {got}")]
    ModalityDim { modality: usize, expected: usize, got: usize },
    #[error("modality {0} is present but the model has no channel for it")]
    MissingChannel(usize),
    #[error("empty modality sequence")]
    EmptySequence,
}

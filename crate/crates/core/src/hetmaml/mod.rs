//! Bilevel meta-learning over heterogeneous tasks.
//!
//! Parameters are split into an internal group, adapted per task on the
//! support set, and an external group that only moves in the outer loop.
//! The outer loop updates the internal initialisation and the external
//! parameters from the query loss at the adapted parameters.

mod baselines;
mod learner;
mod network;
mod source;

pub use baselines::{multi_maml_bf_models, multi_maml_bf_train, split_iterations, BfEnsemble};
pub use learner::{
    evaluate, forward, inner_adapt, meta_train, outer_step, task_meta_gradient, OptimizerState, TaskOutcome,
};
pub(crate) use learner::bilevel_objective;
pub use network::{Encoded, Network, PaddedMlp};
pub use source::{DatasetSource, TaskSource, TypedSampler};

pub use crate::nn::{Group, ParamSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::nn::NnError;
use crate::tasks::TaskError;

#[derive(Debug, Error)]
pub enum HetError {
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: NnError,
    },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("meta-batch is empty")]
    EmptyBatch,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl HetError {
    pub(crate) fn stage(stage: &'static str, source: NnError) -> Self {
        Self::Stage { stage, source }
    }
}

impl From<AutodiffError> for HetError {
    fn from(e: AutodiffError) -> Self {
        Self::stage("autodiff", e.into())
    }
}

/// A network description together with its current parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaModel {
    pub network: Network,
    pub params: ParamSet,
}

impl MetaModel {
    pub fn new(network: Network, seed: u64) -> Result<Self, HetError> {
        let params = network.init(seed)?;
        Ok(Self { network, params })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterOptimizer {
    /// `p ← p − β·g`
    #[default]
    Sgd,
    /// Adam with the usual (0.9, 0.999, 1e-8) constants and step size β.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Inner-loop learning rate.
    pub alpha: f64,
    /// Outer-loop learning rate.
    pub beta: f64,
    pub inner_steps: usize,
    pub meta_batch: usize,
    pub iterations: usize,
    /// Differentiate through the inner-loop updates; otherwise first-order.
    pub second_order: bool,
    pub optimizer: OuterOptimizer,
    pub seed: u64,
    /// Threads used for per-task work inside a meta-batch.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            beta: 1e-4,
            inner_steps: 10,
            meta_batch: 4,
            iterations: 1000,
            second_order: true,
            optimizer: OuterOptimizer::Sgd,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HetError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(HetError::InvalidConfig("learning rates must be finite and non-negative".into()));
        }
        if self.meta_batch == 0 {
            return Err(HetError::InvalidConfig("meta_batch must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(HetError::InvalidConfig("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Query accuracy and loss after each number of inner steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTrace {
    pub type_id: usize,
    pub acc: Vec<f64>,
    pub loss: Vec<f64>,
}

/// Per-step accuracy over a set of evaluation tasks; entry `s` is after `s`
/// adaptation steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationTrace {
    pub tasks: Vec<TaskTrace>,
    pub mean_acc: Vec<f64>,
    pub mean_loss: Vec<f64>,
    /// `None` for task types with no evaluation tasks.
    pub type_acc: Vec<Option<Vec<f64>>>,
    pub type_counts: Vec<usize>,
}

impl AdaptationTrace {
    pub fn from_tasks(tasks: Vec<TaskTrace>, n_types: usize) -> Self {
        let steps = tasks.first().map(|t| t.acc.len()).unwrap_or(0);
        let mean = |pick: &dyn Fn(&TaskTrace) -> &Vec<f64>, subset: &[&TaskTrace]| -> Vec<f64> {
            (0..steps)
                .map(|s| subset.iter().map(|t| pick(t)[s]).sum::<f64>() / subset.len() as f64)
                .collect()
        };
        let all: Vec<&TaskTrace> = tasks.iter().collect();
        let (mean_acc, mean_loss) = if all.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            (mean(&|t| &t.acc, &all), mean(&|t| &t.loss, &all))
        };
        let mut type_acc = Vec::with_capacity(n_types);
        let mut type_counts = Vec::with_capacity(n_types);
        for ty in 0..n_types {
            let subset: Vec<&TaskTrace> = tasks.iter().filter(|t| t.type_id == ty).collect();
            type_counts.push(subset.len());
            type_acc.push((!subset.is_empty()).then(|| mean(&|t| &t.acc, &subset)));
        }
        Self {
            tasks,
            mean_acc,
            mean_loss,
            type_acc,
            type_counts,
        }
    }

    pub fn steps(&self) -> usize {
        self.mean_acc.len()
    }

    /// Final-step accuracy.
    pub fn final_acc(&self) -> f64 {
        self.mean_acc.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_type_acc(&self, ty: usize) -> Option<f64> {
        self.type_acc.get(ty)?.as_ref()?.last().copied()
    }
}

/// Metrics of one outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_query_loss: f64,
    pub mean_query_acc: f64,
    /// Mean query accuracy per task type, `None` when the type was not in the batch.
    pub type_acc: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub iterations: Vec<IterationMetrics>,
    /// Tasks dropped because no modality was present.
    pub skipped_tasks: usize,
}

#[cfg(test)]
mod tests;

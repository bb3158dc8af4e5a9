use crate::nn::Architecture;
use crate::tasks::{ConfigVector, TaskInstance};

use super::learner::{evaluate, outer_step_in, worker_pool, OptimizerState};
use super::network::Network;
use super::source::TaskSource;
use super::{AdaptationTrace, HetError, IterationMetrics, MetaModel, MetricsLog, TrainConfig};

/// One independent model per task type. Model `r` only carries the backbone
/// channels that type `r` uses.
#[derive(Clone, Debug, PartialEq)]
pub struct BfEnsemble {
    pub types: Vec<ConfigVector>,
    pub models: Vec<MetaModel>,
}

impl BfEnsemble {
    pub fn param_count(&self) -> usize {
        self.models.iter().map(|m| m.params.count()).sum()
    }

    /// Evaluates every task with the model of its own type.
    pub fn evaluate(&self, tasks: &[TaskInstance], cfg: &TrainConfig) -> Result<AdaptationTrace, HetError> {
        let n_types = self.models.len();
        let mut traces = Vec::with_capacity(tasks.len());
        for (ty, model) in self.models.iter().enumerate() {
            let own: Vec<TaskInstance> = tasks.iter().filter(|t| t.type_id == ty).cloned().collect();
            if own.is_empty() {
                continue;
            }
            traces.extend(evaluate(model, &own, cfg, n_types)?.tasks);
        }
        if let Some(t) = tasks.iter().find(|t| t.type_id >= n_types) {
            return Err(HetError::InvalidConfig(format!("task type {} has no model", t.type_id)));
        }
        Ok(AdaptationTrace::from_tasks(traces, n_types))
    }
}

/// Untrained ensemble for `types`. Model `r` is initialised from `seed + r`.
pub fn multi_maml_bf_models(arch: &Architecture, types: &[ConfigVector], seed: u64) -> Result<BfEnsemble, HetError> {
    let models = types
        .iter()
        .enumerate()
        .map(|(r, c)| {
            let sub = arch.clone().with_channels(c.0.clone());
            MetaModel::new(Network::HetNet(sub), seed.wrapping_add(r as u64))
        })
        .collect::<Result<_, _>>()?;
    Ok(BfEnsemble {
        types: types.to_vec(),
        models,
    })
}

/// Splits a total iteration budget across types in proportion to `weights`,
/// rounding to nearest.
pub fn split_iterations(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    weights.iter().map(|w| (total as f64 * w / sum).round() as usize).collect()
}

/// Trains each model of the ensemble on its own type stream.
///
/// `streams[r]` must only yield tasks of type `r`; tasks of any other type
/// are rejected. Model `r` runs `iterations[r]` outer steps. The models are
/// independent, so stepping them in lockstep only affects the log: row `i`
/// summarises every model that is still training at iteration `i`.
pub fn multi_maml_bf_train(
    ensemble: &mut BfEnsemble,
    streams: &mut [&mut dyn TaskSource],
    iterations: &[usize],
    cfg: &TrainConfig,
) -> Result<MetricsLog, HetError> {
    cfg.validate()?;
    let n_models = ensemble.models.len();
    if streams.len() != n_models || iterations.len() != n_models {
        return Err(HetError::InvalidConfig(format!(
            "{} models need as many streams and budgets (got {} and {})",
            n_models,
            streams.len(),
            iterations.len()
        )));
    }
    let pool = worker_pool(cfg.workers)?;
    let mut states = vec![OptimizerState::default(); n_models];
    let mut log = MetricsLog::default();
    let total = iterations.iter().copied().max().unwrap_or(0);
    for iteration in 0..total {
        let mut row = IterationMetrics {
            iteration,
            mean_query_loss: 0.0,
            mean_query_acc: 0.0,
            type_acc: vec![None; n_models],
        };
        let mut tasks = 0usize;
        for r in 0..n_models {
            if iteration >= iterations[r] {
                continue;
            }
            let mut guarded = SingleType {
                inner: &mut *streams[r],
                type_id: r,
            };
            let batch = (0..cfg.meta_batch)
                .map(|_| guarded.next_task())
                .collect::<Result<Vec<_>, _>>()?;
            let report = outer_step_in(&mut ensemble.models[r], &batch, cfg, &mut states[r], n_models, pool.as_ref())?;
            log.skipped_tasks += report.skipped;
            let used = batch.len() - report.skipped;
            if used > 0 {
                row.mean_query_loss += report.metrics.mean_query_loss * used as f64;
                row.mean_query_acc += report.metrics.mean_query_acc * used as f64;
                tasks += used;
            }
            row.type_acc[r] = report.metrics.type_acc[r];
        }
        row.mean_query_loss /= tasks as f64;
        row.mean_query_acc /= tasks as f64;
        if iteration % 100 == 0 || iteration + 1 == total {
            log::info!(
                "iteration {iteration}: query loss {:.4}, query acc {:.4}",
                row.mean_query_loss,
                row.mean_query_acc
            );
        }
        log.iterations.push(row);
    }
    Ok(log)
}

struct SingleType<'a> {
    inner: &'a mut dyn TaskSource,
    type_id: usize,
}

impl TaskSource for SingleType<'_> {
    fn next_task(&mut self) -> Result<TaskInstance, HetError> {
        let task = self.inner.next_task()?;
        if task.type_id != self.type_id {
            return Err(HetError::InvalidConfig(format!(
                "stream for type {} produced a task of type {}",
                self.type_id, task.type_id
            )));
        }
        Ok(task)
    }

    fn n_types(&self) -> usize {
        self.inner.n_types()
    }
}

use rayon::prelude::*;

use crate::autodiff::{argmax, cross_entropy, Tape, Tensor, Var};
use crate::nn::{Group, ParamSet};
use crate::tasks::{ConfigVector, SampleBatch, TaskInstance};

use super::network::{Encoded, Network};
use super::source::TaskSource;
use super::{
    AdaptationTrace, HetError, IterationMetrics, MetaModel, MetricsLog, OuterOptimizer, TaskTrace, TrainConfig,
};

/// Logits of `batch` with the internal and external groups supplied separately.
/// Each slice lists its group's parameters in parameter-set order.
pub fn forward(
    model: &MetaModel,
    tape: &mut Tape,
    internal: &[Var],
    external: &[Var],
    batch: &SampleBatch,
    config: &ConfigVector,
) -> Result<Var, HetError> {
    let vars = merge_groups(&model.params, internal, external)?;
    model.network.forward(tape, &vars, batch, config)
}

fn merge_groups(params: &ParamSet, internal: &[Var], external: &[Var]) -> Result<Vec<Var>, HetError> {
    let (mut int, mut ext) = (internal.iter(), external.iter());
    let merged: Option<Vec<Var>> = params
        .entries()
        .iter()
        .map(|e| match e.group {
            Group::Internal => int.next().copied(),
            Group::External => ext.next().copied(),
        })
        .collect();
    match (merged, int.next(), ext.next()) {
        (Some(v), None, None) => Ok(v),
        _ => Err(HetError::stage("parameters", crate::nn::NnError::ParamLayout)),
    }
}

/// Fraction of rows of `logits` whose argmax equals the label.
pub(crate) fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let cols = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(cols)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// `p + (−α)·g`, the same arithmetic the recorded inner step uses.
fn sgd_values(p: &Tensor, g: &Tensor, alpha: f64) -> Tensor {
    let data = p.data().iter().zip(g.data()).map(|(&x, &d)| x + (-alpha) * d).collect();
    Tensor::new(p.shape().to_vec(), data).expect("same shape")
}

/// Inner-loop adaptation without recording a graph, optionally tracing query
/// accuracy after every step.
fn adapt(
    network: &Network,
    params: &ParamSet,
    task: &TaskInstance,
    alpha: f64,
    steps: usize,
    trace: bool,
) -> Result<(ParamSet, Option<TaskTrace>), HetError> {
    let mut tape = Tape::new();
    let internal = params.group_indices(Group::Internal);
    let mut vars = params.bind_constant(&mut tape);
    let support = task.support_batch();
    let enc_support = network.encode(&mut tape, &vars, &support, &task.config)?;
    let query = trace.then(|| task.query_batch());
    let enc_query: Option<Encoded> = match &query {
        Some(q) => Some(network.encode(&mut tape, &vars, q, &task.config)?),
        None => None,
    };
    let mut values = params.values();
    let base = tape.len();
    let (mut accs, mut losses) = (Vec::new(), Vec::new());
    for step in 0..=steps {
        tape.truncate(base);
        for &i in &internal {
            vars[i] = tape.leaf(values[i].clone());
        }
        if let (Some(q), Some(enc)) = (&query, &enc_query) {
            let logits = network.classify(&mut tape, &vars, enc)?;
            let loss = cross_entropy(&mut tape, logits, &q.labels)?;
            accs.push(accuracy(tape.value(logits), &q.labels));
            losses.push(tape.value(loss).item());
        }
        if step == steps {
            break;
        }
        let logits = network.classify(&mut tape, &vars, &enc_support)?;
        let loss = cross_entropy(&mut tape, logits, &support.labels)?;
        let wrt: Vec<Var> = internal.iter().map(|&i| vars[i]).collect();
        let grads = tape.grad_values(loss, &wrt)?;
        for (&i, g) in internal.iter().zip(&grads) {
            values[i] = sgd_values(&values[i], g, alpha);
        }
    }
    let trace = trace.then(|| TaskTrace {
        type_id: task.type_id,
        acc: accs,
        loss: losses,
    });
    Ok((params.with_values(values), trace))
}

/// Adapts the internal parameters to `task` with `cfg.inner_steps` full-batch
/// gradient steps on the support loss. External parameters are copied
/// through untouched.
pub fn inner_adapt(model: &MetaModel, task: &TaskInstance, cfg: &TrainConfig) -> Result<ParamSet, HetError> {
    adapt(&model.network, &model.params, task, cfg.alpha, cfg.inner_steps, false).map(|(p, _)| p)
}

/// Gradient of one task's query loss at its adapted parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutcome {
    /// One tensor per parameter, in parameter-set order.
    pub grads: Vec<Tensor>,
    pub query_loss: f64,
    pub query_acc: f64,
    pub type_id: usize,
}

/// Differentiates the query loss after inner adaptation with respect to the
/// initial internal parameters and the external parameters.
///
/// With `cfg.second_order` the inner updates stay on the tape, so the
/// gradient flows through them exactly; otherwise each inner gradient is
/// treated as a constant.
pub fn task_meta_gradient(model: &MetaModel, task: &TaskInstance, cfg: &TrainConfig) -> Result<TaskOutcome, HetError> {
    let mut tape = Tape::new();
    let leaves = model.params.bind(&mut tape);
    let internal = model.params.group_indices(Group::Internal);
    let (loss, logits) = bilevel_objective(&model.network, &mut tape, &leaves, &internal, task, cfg)?;
    let query = &task.query;
    let labels: Vec<usize> = query.iter().map(|s| s.label).collect();
    let query_acc = accuracy(tape.value(logits), &labels);
    let query_loss = tape.value(loss).item();
    let grads = tape.grad_values(loss, &leaves)?;
    Ok(TaskOutcome {
        grads,
        query_loss,
        query_acc,
        type_id: task.type_id,
    })
}

/// Query loss after `cfg.inner_steps` support-set updates of the internal
/// entries of `params`, recorded on `tape`. Returns the loss and the query
/// logits.
pub(crate) fn bilevel_objective(
    network: &Network,
    tape: &mut Tape,
    params: &[Var],
    internal: &[usize],
    task: &TaskInstance,
    cfg: &TrainConfig,
) -> Result<(Var, Var), HetError> {
    let support = task.support_batch();
    let query = task.query_batch();
    let mut vars = params.to_vec();
    if cfg.inner_steps > 0 {
        let enc_support = network.encode(tape, params, &support, &task.config)?;
        for _ in 0..cfg.inner_steps {
            let logits = network.classify(tape, &vars, &enc_support)?;
            let loss = cross_entropy(tape, logits, &support.labels)?;
            let wrt: Vec<Var> = internal.iter().map(|&i| vars[i]).collect();
            let grads = tape.grad(loss, &wrt, cfg.second_order)?;
            for (&i, g) in internal.iter().zip(grads) {
                let step = tape.scale(g, -cfg.alpha)?;
                vars[i] = tape.add(vars[i], step)?;
            }
        }
    }
    let enc_query = network.encode(tape, params, &query, &task.config)?;
    let logits = network.classify(tape, &vars, &enc_query)?;
    let loss = cross_entropy(tape, logits, &query.labels)?;
    Ok((loss, logits))
}

/// Moment estimates for the adaptive outer optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    fn apply(&mut self, kind: OuterOptimizer, lr: f64, params: &mut ParamSet, grads: &[Tensor]) {
        match kind {
            OuterOptimizer::Sgd => {
                for (e, g) in params.entries_mut().iter_mut().zip(grads) {
                    e.value = sgd_values(&e.value, g, lr);
                }
            }
            OuterOptimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                if self.first.is_empty() {
                    self.first = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
                    self.second = self.first.clone();
                }
                self.step += 1;
                let c1 = 1.0 - B1.powi(self.step as i32);
                let c2 = 1.0 - B2.powi(self.step as i32);
                for (k, (e, g)) in params.entries_mut().iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for (j, (p, &d)) in e.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = B1 * m[j] + (1.0 - B1) * d;
                        v[j] = B2 * v[j] + (1.0 - B2) * d * d;
                        *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Result of one outer update.
#[derive(Clone, Debug, PartialEq)]
pub struct OuterReport {
    pub metrics: IterationMetrics,
    pub skipped: usize,
}

/// One outer update from a meta-batch.
///
/// Both parameter groups step along the gradient of the summed query losses,
/// computed from the same pre-update snapshot. Tasks with no modality present
/// are skipped.
pub fn outer_step(
    model: &mut MetaModel,
    batch: &[TaskInstance],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    n_types: usize,
) -> Result<OuterReport, HetError> {
    outer_step_in(model, batch, cfg, state, n_types, None)
}

pub(crate) fn outer_step_in(
    model: &mut MetaModel,
    batch: &[TaskInstance],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    n_types: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<OuterReport, HetError> {
    if batch.is_empty() {
        return Err(HetError::EmptyBatch);
    }
    let usable: Vec<&TaskInstance> = batch.iter().filter(|t| t.config.any()).collect();
    let skipped = batch.len() - usable.len();
    let snapshot: &MetaModel = model;
    let outcomes: Vec<TaskOutcome> = match pool {
        Some(pool) => pool.install(|| {
            usable
                .par_iter()
                .map(|t| task_meta_gradient(snapshot, t, cfg))
                .collect::<Result<_, _>>()
        })?,
        None => usable
            .iter()
            .map(|t| task_meta_gradient(snapshot, t, cfg))
            .collect::<Result<_, _>>()?,
    };
    let metrics = batch_metrics(&outcomes, n_types);
    if let Some((first, rest)) = outcomes.split_first() {
        let mut total = first.grads.clone();
        for o in rest {
            for (acc, g) in total.iter_mut().zip(&o.grads) {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        state.apply(cfg.optimizer, cfg.beta, &mut model.params, &total);
    }
    Ok(OuterReport { metrics, skipped })
}

fn batch_metrics(outcomes: &[TaskOutcome], n_types: usize) -> IterationMetrics {
    let n = outcomes.len() as f64;
    let mean = |f: fn(&TaskOutcome) -> f64| {
        if outcomes.is_empty() {
            f64::NAN
        } else {
            outcomes.iter().map(f).sum::<f64>() / n
        }
    };
    let type_acc = (0..n_types)
        .map(|ty| {
            let accs: Vec<f64> = outcomes.iter().filter(|o| o.type_id == ty).map(|o| o.query_acc).collect();
            (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
        })
        .collect();
    IterationMetrics {
        iteration: 0,
        mean_query_loss: mean(|o| o.query_loss),
        mean_query_acc: mean(|o| o.query_acc),
        type_acc,
    }
}

pub(crate) fn worker_pool(workers: usize) -> Result<Option<rayon::ThreadPool>, HetError> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| HetError::Pool(e.to_string()))
}

/// Runs `cfg.iterations` outer steps on batches drawn from `source`.
pub fn meta_train(model: &mut MetaModel, source: &mut dyn TaskSource, cfg: &TrainConfig) -> Result<MetricsLog, HetError> {
    cfg.validate()?;
    let pool = worker_pool(cfg.workers)?;
    let n_types = source.n_types();
    let mut state = OptimizerState::default();
    let mut log = MetricsLog::default();
    for iteration in 0..cfg.iterations {
        let batch = (0..cfg.meta_batch)
            .map(|_| source.next_task())
            .collect::<Result<Vec<_>, _>>()?;
        let report = outer_step_in(model, &batch, cfg, &mut state, n_types, pool.as_ref())?;
        if report.skipped > 0 {
            log::warn!("iteration {iteration}: skipped {} task(s) with no modality present", report.skipped);
        }
        log.skipped_tasks += report.skipped;
        let mut metrics = report.metrics;
        metrics.iteration = iteration;
        if iteration % 100 == 0 || iteration + 1 == cfg.iterations {
            log::info!(
                "iteration {iteration}: query loss {:.4}, query acc {:.4}",
                metrics.mean_query_loss,
                metrics.mean_query_acc
            );
        }
        log.iterations.push(metrics);
    }
    Ok(log)
}

/// Query accuracy after 0..=`cfg.inner_steps` adaptation steps on every task.
pub fn evaluate(
    model: &MetaModel,
    tasks: &[TaskInstance],
    cfg: &TrainConfig,
    n_types: usize,
) -> Result<AdaptationTrace, HetError> {
    let pool = worker_pool(cfg.workers)?;
    let run = |t: &TaskInstance| {
        adapt(&model.network, &model.params, t, cfg.alpha, cfg.inner_steps, true).map(|(_, tr)| tr.expect("traced"))
    };
    let traces: Vec<TaskTrace> = match &pool {
        Some(pool) => pool.install(|| tasks.par_iter().map(run).collect::<Result<_, _>>())?,
        None => tasks.iter().map(run).collect::<Result<_, _>>()?,
    };
    Ok(AdaptationTrace::from_tasks(traces, n_types))
}

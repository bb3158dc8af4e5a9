use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::hetmaml::{
    evaluate, meta_train, multi_maml_bf_train, split_iterations, AdaptationTrace, BfEnsemble, DatasetSource,
    MetaModel, MetricsLog, TaskSource, TypedSampler,
};
use crate::nn::{ParamEntry, ParamSet};
use crate::tasks::{load_meta_dataset, make_class_bank, ClassBank, HtdSpec, Split, TaskInstance, TaskSampler};

use super::config::{ExperimentConfig, ModelKind};
use super::HarnessError;

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    ClassBank = 0,
    MetaTrain = 1,
    MetaTest = 2,
}

/// SplitMix64 of `seed` and the stream index.
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const META_TRAIN_DIR: &str = "meta-train";
pub const META_TEST_DIR: &str = "meta-test";
pub const MANIFEST: &str = "manifest.json";

/// Where meta-training episodes come from.
pub enum TrainData {
    Synthetic { bank: ClassBank, noise: f64, epsilon: f64 },
    Dataset(Arc<Vec<TaskInstance>>),
}

pub struct ExperimentData {
    pub spec: HtdSpec,
    pub train: TrainData,
    pub test: Vec<TaskInstance>,
}

impl ExperimentData {
    fn sampler(&self, split: Split, seed: u64) -> Result<TaskSampler, HarnessError> {
        let TrainData::Synthetic { bank, noise, epsilon } = &self.train else {
            unreachable!("only synthetic data has a sampler")
        };
        Ok(TaskSampler::new(self.spec.clone(), bank.clone(), split, *noise, *epsilon, seed)?)
    }
}

/// The synthetic class bank and the meta-test tasks of a configuration.
pub fn synthetic_parts(cfg: &ExperimentConfig, spec: &HtdSpec) -> Result<(ClassBank, Vec<TaskInstance>), HarnessError> {
    let syn = cfg.synthetic();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, Stream::ClassBank));
    let bank = make_class_bank(&spec.modality_dims, syn.classes, syn.separation, syn.prototype_mode, &mut rng)?;
    let mut test = TaskSampler::new(
        spec.clone(),
        bank.clone(),
        Split::Test,
        syn.noise,
        cfg.htd.epsilon,
        derive_seed(cfg.train.seed, Stream::MetaTest),
    )?;
    let tasks = (0..syn.test_tasks).map(|_| test.sample()).collect::<Result<_, _>>()?;
    Ok((bank, tasks))
}

/// Loads or generates the data of `cfg`. With a dataset the task
/// distribution comes from its manifest and overrides `cfg.htd`.
pub fn prepare_data(cfg: &mut ExperimentConfig) -> Result<ExperimentData, HarnessError> {
    if let Some(dir) = cfg.dataset.clone() {
        let eps = cfg.htd.epsilon;
        let (spec, train) = load_meta_dataset(&dir.join(META_TRAIN_DIR).join(MANIFEST), eps)?;
        let (test_spec, test) = load_meta_dataset(&dir.join(META_TEST_DIR).join(MANIFEST), eps)?;
        if test_spec.modality_dims != spec.modality_dims
            || test_spec.task_types != spec.task_types
            || test_spec.n_way != spec.n_way
        {
            return Err(HarnessError::Config(format!(
                "{}: meta-train and meta-test manifests describe different task distributions",
                dir.display()
            )));
        }
        cfg.htd.modality_dims = spec.modality_dims.clone();
        cfg.htd.task_types = spec
            .task_types
            .iter()
            .map(crate::tasks::type_label)
            .collect::<Vec<_>>()
            .join(",");
        cfg.htd.type_weights = None;
        cfg.htd.n_way = spec.n_way;
        cfg.htd.k_shot = spec.k_shot;
        cfg.htd.k_query = spec.k_query;
        return Ok(ExperimentData {
            spec,
            train: TrainData::Dataset(Arc::new(train)),
            test,
        });
    }
    let spec = cfg.htd.spec()?;
    let (bank, test) = synthetic_parts(cfg, &spec)?;
    Ok(ExperimentData {
        spec,
        train: TrainData::Synthetic {
            bank,
            noise: cfg.synthetic().noise,
            epsilon: cfg.htd.epsilon,
        },
        test,
    })
}

/// A trained (or freshly initialised) model of any kind.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Single(MetaModel),
    Ensemble(BfEnsemble),
}

const ENSEMBLE_PREFIX: &str = "model";

impl TrainedModel {
    pub fn init(cfg: &ExperimentConfig, spec: &HtdSpec) -> Result<Self, HarnessError> {
        let seed = cfg.train.seed;
        match cfg.model {
            ModelKind::MultiMamlBf => {
                let models = spec
                    .task_types
                    .iter()
                    .enumerate()
                    .map(|(r, c)| MetaModel::new(cfg.network_for(c.as_slice())?, seed.wrapping_add(r as u64)).map_err(HarnessError::from))
                    .collect::<Result<_, _>>()?;
                Ok(TrainedModel::Ensemble(BfEnsemble {
                    types: spec.task_types.clone(),
                    models,
                }))
            }
            _ => Ok(TrainedModel::Single(MetaModel::new(cfg.network_for(&[])?, seed)?)),
        }
    }

    /// All parameters as one set; ensemble members are prefixed `model{r}.`.
    pub fn params(&self) -> ParamSet {
        match self {
            TrainedModel::Single(m) => m.params.clone(),
            TrainedModel::Ensemble(e) => ParamSet::from_entries(
                e.models
                    .iter()
                    .enumerate()
                    .flat_map(|(r, m)| {
                        m.params.entries().iter().map(move |p| ParamEntry {
                            name: format!("{ENSEMBLE_PREFIX}{r}.{}", p.name),
                            ..p.clone()
                        })
                    })
                    .collect(),
            ),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().count()
    }

    /// Replaces the parameters with `loaded`, which must have exactly the
    /// names, groups and shapes of the current ones.
    pub fn load(&mut self, loaded: &ParamSet) -> Result<(), HarnessError> {
        let expected = self.params();
        if let Some(reason) = layout_mismatch(&expected, loaded) {
            return Err(HarnessError::Config(format!(
                "checkpoint does not match the configured model: {reason}"
            )));
        }
        match self {
            TrainedModel::Single(m) => m.params = loaded.clone(),
            TrainedModel::Ensemble(e) => {
                let mut values = loaded.values().into_iter();
                for m in &mut e.models {
                    let own: Vec<_> = values.by_ref().take(m.params.len()).collect();
                    m.params = m.params.with_values(own);
                }
            }
        }
        Ok(())
    }

    pub fn evaluate(
        &self,
        tasks: &[TaskInstance],
        cfg: &crate::hetmaml::TrainConfig,
        n_types: usize,
    ) -> Result<AdaptationTrace, HarnessError> {
        Ok(match self {
            TrainedModel::Single(m) => evaluate(m, tasks, cfg, n_types)?,
            TrainedModel::Ensemble(e) => e.evaluate(tasks, cfg)?,
        })
    }
}

fn layout_mismatch(expected: &ParamSet, got: &ParamSet) -> Option<String> {
    if expected.len() != got.len() {
        return Some(format!("expected {} tensors, found {}", expected.len(), got.len()));
    }
    expected.entries().iter().zip(got.entries()).find_map(|(e, g)| {
        if e.name != g.name {
            Some(format!("expected `{}`, found `{}`", e.name, g.name))
        } else if e.group != g.group {
            Some(format!("`{}` has the wrong group", e.name))
        } else if e.value.shape() != g.value.shape() {
            Some(format!(
                "`{}` has shape {:?}, expected {:?}",
                e.name,
                g.value.shape(),
                e.value.shape()
            ))
        } else {
            None
        }
    })
}

/// Meta-trains the configured model.
pub fn train(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<(TrainedModel, MetricsLog), HarnessError> {
    let mut model = TrainedModel::init(cfg, &data.spec)?;
    let stream_seed = derive_seed(cfg.train.seed, Stream::MetaTrain);
    let n_types = data.spec.n_types();
    let log = match &mut model {
        TrainedModel::Single(m) => {
            let mut source: Box<dyn TaskSource> = match &data.train {
                TrainData::Synthetic { .. } => Box::new(data.sampler(Split::Train, stream_seed)?),
                TrainData::Dataset(tasks) => Box::new(DatasetSource::new(tasks.clone(), n_types, stream_seed)?),
            };
            meta_train(m, source.as_mut(), &cfg.train)?
        }
        TrainedModel::Ensemble(e) => {
            let mut sources: Vec<Box<dyn TaskSource>> = (0..n_types)
                .map(|r| {
                    let seed = stream_seed.wrapping_add(r as u64);
                    Ok(match &data.train {
                        TrainData::Synthetic { .. } => {
                            Box::new(TypedSampler::new(data.sampler(Split::Train, seed)?, r)) as Box<dyn TaskSource>
                        }
                        TrainData::Dataset(tasks) => Box::new(DatasetSource::of_type(tasks.clone(), r, n_types, seed)?),
                    })
                })
                .collect::<Result<_, HarnessError>>()?;
            let mut streams: Vec<&mut dyn TaskSource> = sources.iter_mut().map(|s| &mut **s as &mut dyn TaskSource).collect();
            let budget = split_iterations(cfg.train.iterations, &data.spec.type_weights);
            multi_maml_bf_train(e, &mut streams, &budget, &cfg.train)?
        }
    };
    Ok((model, log))
}

/// `iteration,mean_query_loss,mean_query_acc,acc_type_0,…`; per-type cells
/// are empty when the type was not in that iteration's batch.
pub fn write_metrics_csv(path: &Path, log: &MetricsLog, n_types: usize) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::csv(path, e))?;
    let mut header = vec!["iteration".to_string(), "mean_query_loss".into(), "mean_query_acc".into()];
    header.extend((0..n_types).map(|k| format!("acc_type_{k}")));
    w.write_record(&header).map_err(|e| HarnessError::csv(path, e))?;
    for m in &log.iterations {
        let mut row = vec![m.iteration.to_string(), m.mean_query_loss.to_string(), m.mean_query_acc.to_string()];
        row.extend(m.type_acc.iter().map(|a| a.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(|e| HarnessError::csv(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// `step,overall_acc,overall_loss,acc_type_0,…` for steps `0..=inner_steps`.
pub fn write_curve_csv(path: &Path, trace: &AdaptationTrace) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::csv(path, e))?;
    let mut header = vec!["step".to_string(), "overall_acc".into(), "overall_loss".into()];
    header.extend((0..trace.type_acc.len()).map(|k| format!("acc_type_{k}")));
    w.write_record(&header).map_err(|e| HarnessError::csv(path, e))?;
    for s in 0..trace.steps() {
        let mut row = vec![s.to_string(), trace.mean_acc[s].to_string(), trace.mean_loss[s].to_string()];
        row.extend(
            trace
                .type_acc
                .iter()
                .map(|a| a.as_ref().map(|v| v[s].to_string()).unwrap_or_default()),
        );
        w.write_record(&row).map_err(|e| HarnessError::csv(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

//! Heterogeneous task distributions: episode data model, configuration
//! vectors, a synthetic episode generator and the HTFS feature-file format.

mod htfs;
mod synthetic;

pub use htfs::{load_meta_dataset, save_meta_dataset, Manifest, ManifestTask, HTFS_MAGIC, HTFS_VERSION};
pub use synthetic::{make_class_bank, sample_synthetic_task, ClassBank, PrototypeMode, Split, TaskSampler};

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

/// Default variance threshold below which a modality counts as absent.
pub const DEFAULT_EPSILON: f64 = 1e-1;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task distribution: {0}")]
    InvalidSpec(String),
    #[error("support set is empty")]
    EmptySupport,
    #[error("need at least {needed} classes in the {split} split, have {available}")]
    InsufficientClasses {
        needed: usize,
        available: usize,
        split: &'static str,
    },
    #[error("task {task}: computed configuration {computed} disagrees with declared {declared}")]
    ConfigMismatch {
        task: String,
        computed: ConfigVector,
        declared: ConfigVector,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: truncated, expected {expected} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Which modalities carry information in a task.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfigVector(pub Vec<bool>);

impl ConfigVector {
    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn bits(&self) -> Vec<u8> {
        self.0.iter().map(|&b| u8::from(b)).collect()
    }
}

impl fmt::Display for ConfigVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, &b) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", u8::from(b))?;
        }
        write!(f, "]")
    }
}

/// One sample: a vector per modality (absent ones are zeros) and a class index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub modalities: Vec<Vec<f64>>,
    pub label: usize,
}

/// A set of samples laid out for batched forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    /// `inputs[m]` has shape `[B, D_m]`.
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl SampleBatch {
    pub fn from_samples(samples: &[LabeledSample]) -> Self {
        let modalities = samples.first().map(|s| s.modalities.len()).unwrap_or(0);
        let inputs = (0..modalities)
            .map(|m| {
                let dim = samples[0].modalities[m].len();
                let data: Vec<f64> = samples.iter().flat_map(|s| s.modalities[m].iter().copied()).collect();
                Tensor::new(vec![samples.len(), dim], data).expect("consistent sample dims")
            })
            .collect();
        Self {
            inputs,
            labels: samples.iter().map(|s| s.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One N-way K-shot episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    pub support: Vec<LabeledSample>,
    pub query: Vec<LabeledSample>,
    pub config: ConfigVector,
    pub type_id: usize,
}

impl TaskInstance {
    pub fn support_batch(&self) -> SampleBatch {
        SampleBatch::from_samples(&self.support)
    }

    pub fn query_batch(&self) -> SampleBatch {
        SampleBatch::from_samples(&self.query)
    }
}

/// A mixture of homogeneous task distributions, one per modality combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HtdSpec {
    pub modality_dims: Vec<usize>,
    pub task_types: Vec<ConfigVector>,
    pub type_weights: Vec<f64>,
    pub n_way: usize,
    pub k_shot: usize,
    pub k_query: usize,
}

impl HtdSpec {
    /// Spec with uniform type weights.
    pub fn new(
        modality_dims: Vec<usize>,
        task_types: Vec<ConfigVector>,
        n_way: usize,
        k_shot: usize,
        k_query: usize,
    ) -> Result<Self, TaskError> {
        let n = task_types.len().max(1);
        let spec = Self {
            modality_dims,
            type_weights: vec![1.0 / n as f64; task_types.len()],
            task_types,
            n_way,
            k_shot,
            k_query,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn modalities(&self) -> usize {
        self.modality_dims.len()
    }

    pub fn n_types(&self) -> usize {
        self.task_types.len()
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let invalid = |msg: String| Err(TaskError::InvalidSpec(msg));
        let m = self.modalities();
        if m == 0 || m > 16 {
            return invalid(format!("modality count {m} outside 1..=16"));
        }
        if self.modality_dims.contains(&0) {
            return invalid("modality dimensions must be positive".into());
        }
        let max_types = (1usize << m) - 1;
        let types = self.task_types.len();
        if types < 2 || types > max_types {
            return invalid(format!("{types} task types; need between 2 and {max_types} for {m} modalities"));
        }
        for (r, t) in self.task_types.iter().enumerate() {
            if t.len() != m {
                return invalid(format!("task type {r} has {} entries, expected {m}", t.len()));
            }
            if !t.any() {
                return invalid(format!("task type {r} has no modality"));
            }
            if self.task_types[..r].contains(t) {
                return invalid(format!("task type {r} duplicates an earlier type"));
            }
        }
        if self.type_weights.len() != types {
            return invalid("one weight per task type required".into());
        }
        let total: f64 = self.type_weights.iter().sum();
        if self.type_weights.iter().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return invalid(format!("type weights must be non-negative and sum to 1, sum is {total}"));
        }
        if self.n_way < 2 || self.k_shot == 0 || self.k_query == 0 {
            return invalid("need n_way >= 2, k_shot >= 1, k_query >= 1".into());
        }
        Ok(())
    }
}

/// Marks modality `m` absent iff the mean squared deviation of its vectors
/// across the support set, `Σ‖x − x̄‖² / |S|`, is below `epsilon`.
pub fn compute_config_vector(support: &[LabeledSample], epsilon: f64) -> Result<ConfigVector, TaskError> {
    let first = support.first().ok_or(TaskError::EmptySupport)?;
    let count = support.len() as f64;
    let flags = (0..first.modalities.len())
        .map(|m| {
            let dim = first.modalities[m].len();
            let mut mean = vec![0.0; dim];
            for s in support {
                for (acc, v) in mean.iter_mut().zip(&s.modalities[m]) {
                    *acc += v;
                }
            }
            for v in &mut mean {
                *v /= count;
            }
            let spread: f64 = support
                .iter()
                .map(|s| {
                    s.modalities[m]
                        .iter()
                        .zip(&mean)
                        .map(|(x, mu)| (x - mu) * (x - mu))
                        .sum::<f64>()
                })
                .sum();
            spread / count >= epsilon
        })
        .collect();
    Ok(ConfigVector(flags))
}

/// Parses `X1,X2,X1+X2` style type lists into masks over `modalities` modalities.
pub fn parse_task_types(text: &str, modalities: usize) -> Result<Vec<ConfigVector>, TaskError> {
    text.split(',')
        .map(|ty| {
            let mut mask = vec![false; modalities];
            for part in ty.trim().split('+') {
                let idx = part
                    .trim()
                    .strip_prefix(['X', 'x'])
                    .and_then(|d| d.parse::<usize>().ok())
                    .filter(|&d| d >= 1 && d <= modalities)
                    .ok_or_else(|| TaskError::InvalidSpec(format!("bad modality `{part}` in type `{ty}`")))?;
                mask[idx - 1] = true;
            }
            Ok(ConfigVector(mask))
        })
        .collect()
}

/// Inverse of [`parse_task_types`] for a single type.
pub fn type_label(config: &ConfigVector) -> String {
    config
        .0
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| format!("X{}", i + 1))
        .collect::<Vec<_>>()
        .join("+")
}

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tasks::{TaskInstance, TaskSampler};

use super::HetError;

/// A stream of training episodes.
pub trait TaskSource {
    fn next_task(&mut self) -> Result<TaskInstance, HetError>;

    /// Number of task types the stream can produce.
    fn n_types(&self) -> usize;
}

impl TaskSource for TaskSampler {
    fn next_task(&mut self) -> Result<TaskInstance, HetError> {
        Ok(self.sample()?)
    }

    fn n_types(&self) -> usize {
        self.spec.n_types()
    }
}

/// Uniform draws (with replacement) from a materialised task list.
pub struct DatasetSource {
    tasks: Arc<Vec<TaskInstance>>,
    indices: Vec<usize>,
    n_types: usize,
    rng: ChaCha8Rng,
}

impl DatasetSource {
    pub fn new(tasks: Arc<Vec<TaskInstance>>, n_types: usize, seed: u64) -> Result<Self, HetError> {
        let indices = (0..tasks.len()).collect();
        Self::with_indices(tasks, indices, n_types, seed)
    }

    /// Only tasks of `type_id`.
    pub fn of_type(tasks: Arc<Vec<TaskInstance>>, type_id: usize, n_types: usize, seed: u64) -> Result<Self, HetError> {
        let indices = (0..tasks.len()).filter(|&i| tasks[i].type_id == type_id).collect();
        Self::with_indices(tasks, indices, n_types, seed)
    }

    fn with_indices(
        tasks: Arc<Vec<TaskInstance>>,
        indices: Vec<usize>,
        n_types: usize,
        seed: u64,
    ) -> Result<Self, HetError> {
        if indices.is_empty() {
            return Err(HetError::InvalidConfig("task source has no tasks".into()));
        }
        Ok(Self {
            tasks,
            indices,
            n_types,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl TaskSource for DatasetSource {
    fn next_task(&mut self) -> Result<TaskInstance, HetError> {
        let pick = self.indices[self.rng.random_range(0..self.indices.len())];
        Ok(self.tasks[pick].clone())
    }

    fn n_types(&self) -> usize {
        self.n_types
    }
}

/// Synthetic episodes of one task type only.
pub struct TypedSampler {
    sampler: TaskSampler,
    type_id: usize,
}

impl TypedSampler {
    pub fn new(sampler: TaskSampler, type_id: usize) -> Self {
        Self { sampler, type_id }
    }
}

impl TaskSource for TypedSampler {
    fn next_task(&mut self) -> Result<TaskInstance, HetError> {
        Ok(self.sampler.sample_of_type(self.type_id)?)
    }

    fn n_types(&self) -> usize {
        self.sampler.spec.n_types()
    }
}

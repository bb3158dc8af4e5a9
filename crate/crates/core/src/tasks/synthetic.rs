use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{compute_config_vector, HtdSpec, LabeledSample, TaskError, TaskInstance};

/// How class prototypes relate across modalities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeMode {
    /// Each modality's prototype is drawn independently.
    #[default]
    Independent,
    /// Every modality is a fixed random linear map of one latent class vector.
    SharedLatent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Per-class, per-modality prototype vectors with a disjoint train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBank {
    /// `prototypes[class][modality]`
    pub prototypes: Vec<Vec<Vec<f64>>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassBank {
    pub fn classes(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draws prototypes from `N(0, separation²·I)` and splits classes 3:1 into
/// train and test (`int(3/4·n)` train classes).
pub fn make_class_bank(
    modality_dims: &[usize],
    n_classes: usize,
    separation: f64,
    mode: PrototypeMode,
    rng: &mut impl Rng,
) -> Result<ClassBank, TaskError> {
    if !(separation > 0.0) {
        return Err(TaskError::InvalidSpec(format!("separation must be positive, got {separation}")));
    }
    let prototypes = match mode {
        PrototypeMode::Independent => (0..n_classes)
            .map(|_| modality_dims.iter().map(|&d| normal_vec(rng, d, separation)).collect())
            .collect(),
        PrototypeMode::SharedLatent => {
            let latent_dim = modality_dims.iter().copied().max().unwrap_or(1);
            let maps: Vec<Vec<f64>> = modality_dims
                .iter()
                .map(|&d| normal_vec(rng, d * latent_dim, 1.0 / (latent_dim as f64).sqrt()))
                .collect();
            (0..n_classes)
                .map(|_| {
                    let latent = normal_vec(rng, latent_dim, separation);
                    maps.iter()
                        .zip(modality_dims)
                        .map(|(map, &d)| {
                            (0..d)
                                .map(|r| {
                                    map[r * latent_dim..(r + 1) * latent_dim]
                                        .iter()
                                        .zip(&latent)
                                        .map(|(a, z)| a * z)
                                        .sum()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        }
    };
    let n_train = n_classes * 3 / 4;
    Ok(ClassBank {
        prototypes,
        train: (0..n_train).collect(),
        test: (n_train..n_classes).collect(),
    })
}

/// Draws one episode of task type `type_id` from `split`.
///
/// Samples are prototype plus `N(0, noise²)` noise, class-major then shot.
/// Modalities outside the type's mask are zeroed, and the recomputed
/// configuration vector must agree with the mask.
pub fn sample_synthetic_task(
    spec: &HtdSpec,
    bank: &ClassBank,
    split: Split,
    type_id: usize,
    noise: f64,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<TaskInstance, TaskError> {
    let pool = bank.classes(split);
    if pool.len() < spec.n_way {
        return Err(TaskError::InsufficientClasses {
            needed: spec.n_way,
            available: pool.len(),
            split: split.name(),
        });
    }
    let mask = spec
        .task_types
        .get(type_id)
        .ok_or_else(|| TaskError::InvalidSpec(format!("no task type {type_id}")))?
        .clone();
    let chosen: Vec<usize> = index::sample(rng, pool.len(), spec.n_way)
        .into_iter()
        .map(|i| pool[i])
        .collect();

    let mut draw = |class: usize, label: usize| LabeledSample {
        modalities: bank.prototypes[class]
            .iter()
            .zip(mask.as_slice())
            .map(|(proto, &present)| {
                let noisy = proto.iter().map(|&p| p + noise * rng.sample::<f64, _>(StandardNormal));
                if present {
                    noisy.collect()
                } else {
                    // Draw anyway so the random stream does not depend on the mask.
                    noisy.map(|_| 0.0).collect()
                }
            })
            .collect(),
        label,
    };
    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = Vec::with_capacity(spec.n_way * spec.k_query);
    for (label, &class) in chosen.iter().enumerate() {
        for _ in 0..spec.k_shot {
            support.push(draw(class, label));
        }
    }
    for (label, &class) in chosen.iter().enumerate() {
        for _ in 0..spec.k_query {
            query.push(draw(class, label));
        }
    }
    let config = compute_config_vector(&support, epsilon)?;
    if config != mask {
        return Err(TaskError::ConfigMismatch {
            task: format!("synthetic type {type_id}"),
            computed: config,
            declared: mask,
        });
    }
    Ok(TaskInstance {
        support,
        query,
        config,
        type_id,
    })
}

/// Seeded stream of synthetic episodes with task types drawn by weight.
pub struct TaskSampler {
    pub spec: HtdSpec,
    pub bank: ClassBank,
    pub split: Split,
    pub noise: f64,
    pub epsilon: f64,
    types: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl TaskSampler {
    pub fn new(
        spec: HtdSpec,
        bank: ClassBank,
        split: Split,
        noise: f64,
        epsilon: f64,
        seed: u64,
    ) -> Result<Self, TaskError> {
        spec.validate()?;
        let types = WeightedIndex::new(&spec.type_weights)
            .map_err(|e| TaskError::InvalidSpec(format!("type weights: {e}")))?;
        Ok(Self {
            spec,
            bank,
            split,
            noise,
            epsilon,
            types,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_type(&mut self) -> usize {
        self.types.sample(&mut self.rng)
    }

    pub fn sample_of_type(&mut self, type_id: usize) -> Result<TaskInstance, TaskError> {
        sample_synthetic_task(
            &self.spec,
            &self.bank,
            self.split,
            type_id,
            self.noise,
            self.epsilon,
            &mut self.rng,
        )
    }

    pub fn sample(&mut self) -> Result<TaskInstance, TaskError> {
        let ty = self.next_type();
        self.sample_of_type(ty)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{parse_task_types, ConfigVector};

    fn spec() -> HtdSpec {
        HtdSpec::new(vec![4, 3], parse_task_types("X1,X2,X1+X2", 2).unwrap(), 5, 1, 3).unwrap()
    }

    fn bank(classes: usize, seed: u64) -> ClassBank {
        make_class_bank(&[4, 3], classes, 1.0, PrototypeMode::Independent, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn class_splits() {
        for (n, train, test) in [(40, 30, 10), (200, 150, 50)] {
            let b = bank(n, 0);
            assert_eq!((b.train.len(), b.test.len()), (train, test));
            assert!(b.train.iter().all(|c| !b.test.contains(c)));
        }
        assert_eq!(bank(40, 3), bank(40, 3));
        assert_ne!(bank(40, 3), bank(40, 4));
        assert!(make_class_bank(&[2], 4, 0.0, PrototypeMode::Independent, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn noiseless_support_equals_prototypes() {
        let (s, b) = (spec(), bank(40, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let task = sample_synthetic_task(&s, &b, Split::Test, 2, 0.0, 0.1, &mut rng).unwrap();
        // Prototypes of the chosen classes, in label order, are the support samples.
        for sample in &task.support {
            let class = b.test.iter().find(|&&c| b.prototypes[c] == sample.modalities);
            assert!(class.is_some());
        }
        let classes: Vec<_> = task.support.iter().map(|s| &s.modalities).collect();
        for i in 0..classes.len() {
            for j in 0..i {
                assert_ne!(classes[i], classes[j]);
            }
        }
    }

    #[test]
    fn masked_modality_is_zero() {
        let (s, b) = (spec(), bank(40, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let task = sample_synthetic_task(&s, &b, Split::Train, 0, 0.25, 0.1, &mut rng).unwrap();
        assert_eq!(task.config, ConfigVector(vec![true, false]));
        assert!(task.support.iter().chain(&task.query).all(|x| x.modalities[1] == [0.0; 3]));
    }

    #[test]
    fn episode_shape_and_labels() {
        let mut sampler = TaskSampler::new(spec(), bank(40, 1), Split::Train, 0.25, 0.1, 9).unwrap();
        for _ in 0..20 {
            let t = sampler.sample().unwrap();
            assert_eq!(t.support.len(), 5);
            assert_eq!(t.query.len(), 15);
            for label in 0..5 {
                assert_eq!(t.support.iter().filter(|s| s.label == label).count(), 1);
                assert_eq!(t.query.iter().filter(|s| s.label == label).count(), 3);
            }
            assert_eq!(t.config, sampler.spec.task_types[t.type_id]);
        }
    }

    #[test]
    fn streams_are_reproducible() {
        let draw = |seed| {
            let mut s = TaskSampler::new(spec(), bank(40, 1), Split::Test, 0.25, 0.1, seed).unwrap();
            (0..5).map(|_| s.sample().unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }

    #[test]
    fn too_few_classes() {
        let err = sample_synthetic_task(&spec(), &bank(8, 0), Split::Test, 0, 0.1, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, TaskError::InsufficientClasses { needed: 5, available: 2, split: "test" }));
    }

    #[test]
    fn shared_latent_prototypes_have_modality_dims() {
        let b = make_class_bank(&[4, 3], 12, 1.0, PrototypeMode::SharedLatent, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b.prototypes.iter().all(|p| p[0].len() == 4 && p[1].len() == 3));
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::hetmaml::{Network, PaddedMlp, TrainConfig};
use crate::nn::Architecture;
use crate::tasks::{parse_task_types, HtdSpec, PrototypeMode, DEFAULT_EPSILON};

use super::HarnessError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    Hetmaml,
    /// Single MLP on zero-padded, summed modalities.
    Maml,
    /// One independent model per task type.
    MultiMamlBf,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Hetmaml => "hetmaml",
            ModelKind::Maml => "maml",
            ModelKind::MultiMamlBf => "multi-maml-bf",
        }
    }
}

/// The task distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HtdConfig {
    pub modality_dims: Vec<usize>,
    /// Task types as modality combinations, e.g. `X1,X2,X1+X2`.
    pub task_types: String,
    /// Sampling weight per type; uniform when absent.
    pub type_weights: Option<Vec<f64>>,
    pub n_way: usize,
    pub k_shot: usize,
    pub k_query: usize,
    /// Variance threshold of the configuration vector.
    pub epsilon: f64,
}

impl Default for HtdConfig {
    fn default() -> Self {
        Self {
            modality_dims: vec![16, 12],
            task_types: "X1,X2,X1+X2".into(),
            type_weights: None,
            n_way: 5,
            k_shot: 1,
            k_query: 12,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl HtdConfig {
    pub fn spec(&self) -> Result<HtdSpec, HarnessError> {
        let types = parse_task_types(&self.task_types, self.modality_dims.len())?;
        let mut spec = HtdSpec::new(self.modality_dims.clone(), types, self.n_way, self.k_shot, self.k_query)?;
        if let Some(w) = &self.type_weights {
            spec.type_weights = w.clone();
            spec.validate()?;
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub f1: usize,
    pub f2: usize,
    pub f3: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { f1: 128, f2: 64, f3: 64 }
    }
}

/// Parameters of the synthetic episode generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// Standard deviation of the class prototypes per coordinate.
    pub separation: f64,
    /// Standard deviation of the per-sample noise per coordinate.
    pub noise: f64,
    pub prototype_mode: PrototypeMode,
    /// Meta-train tasks written by `gen-data`.
    pub tasks: usize,
    /// Meta-test tasks written by `gen-data` and drawn for evaluation.
    pub test_tasks: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 40,
            separation: 1.0,
            noise: 0.25,
            prototype_mode: PrototypeMode::Independent,
            tasks: 200,
            test_tasks: 300,
        }
    }
}

/// Everything one run needs. Command-line flags override file values,
/// which override these defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub htd: HtdConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Generate episodes on the fly. Exclusive with `dataset`.
    pub synthetic: Option<SyntheticConfig>,
    /// Directory written by `gen-data` with `meta-train/` and `meta-test/`.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Hetmaml,
            htd: HtdConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            synthetic: None,
            dataset: None,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Fills in the synthetic generator when no data source was given and
    /// checks the whole configuration.
    pub fn resolve(mut self) -> Result<Self, HarnessError> {
        match (&self.synthetic, &self.dataset) {
            (Some(_), Some(_)) => {
                return Err(HarnessError::Config(
                    "set exactly one of `synthetic` and `dataset`, not both".into(),
                ))
            }
            (None, None) => self.synthetic = Some(SyntheticConfig::default()),
            _ => {}
        }
        if let Some(s) = &self.synthetic {
            if !(s.separation > 0.0 && s.noise >= 0.0) {
                return Err(HarnessError::Config("synthetic separation must be > 0 and noise >= 0".into()));
            }
        }
        self.htd.spec()?;
        self.train.validate()?;
        self.network_for(&vec![true; self.htd.modality_dims.len()])?;
        Ok(self)
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        self.synthetic.clone().unwrap_or_default()
    }

    fn architecture(&self) -> Architecture {
        Architecture::new(
            self.htd.modality_dims.clone(),
            self.arch.f1,
            self.arch.f2,
            self.arch.f3,
            self.htd.n_way,
        )
    }

    /// Network of the configured model kind; `channels` only matters for
    /// the per-type models of `multi-maml-bf`.
    pub fn network_for(&self, channels: &[bool]) -> Result<Network, HarnessError> {
        let network = match self.model {
            ModelKind::Hetmaml => Network::HetNet(self.architecture()),
            ModelKind::MultiMamlBf => Network::HetNet(self.architecture().with_channels(channels.to_vec())),
            ModelKind::Maml => Network::PaddedMlp(PaddedMlp::new(
                self.htd.modality_dims.clone(),
                vec![self.arch.f1, self.arch.f2],
                self.htd.n_way,
            )),
        };
        if let Network::HetNet(a) = &network {
            a.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(network)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setting() {
        let c = ExperimentConfig::default();
        assert_eq!((c.arch.f1, c.arch.f2, c.arch.f3), (128, 64, 64));
        assert_eq!(c.htd.epsilon, 0.1);
        assert_eq!((c.train.alpha, c.train.beta, c.train.inner_steps), (1e-2, 1e-4, 10));
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"arch": {"f1": 8}, "train": {"iterations": 3}}"#).unwrap();
        assert_eq!(c.arch.f1, 8);
        assert_eq!(c.arch.f2, 64);
        assert_eq!(c.train.iterations, 3);
        assert_eq!(c.train.inner_steps, 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"arch": {"f4": 1}}"#).is_err());
    }

    #[test]
    fn both_sources_rejected() {
        let c = ExperimentConfig {
            synthetic: Some(SyntheticConfig::default()),
            dataset: Some("d".into()),
            ..ExperimentConfig::default()
        };
        assert!(matches!(c.resolve(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn missing_source_becomes_synthetic() {
        let c = ExperimentConfig::default().resolve().unwrap();
        assert_eq!(c.synthetic, Some(SyntheticConfig::default()));
    }

    #[test]
    fn odd_f2_rejected() {
        let mut c = ExperimentConfig::default();
        c.arch.f2 = 5;
        assert!(c.resolve().is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig::default().resolve().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::nn::{
    attention_aggregate, backbone_forward, head_forward, init_mlp_params, init_params, iterative_aggregate,
    mlp_forward, mlp_layers, task_embed, Architecture, HetNetParams, MlpArchitecture, NnError, ParamSet,
};
use crate::tasks::{ConfigVector, SampleBatch};

use super::HetError;

/// Intermediate values that depend only on external parameters and the
/// data, so they can be computed once per task and reused by every inner
/// step.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Per-modality embeddings (`[B, F1]` each) or the single homogenised input.
    pub tokens: Vec<Var>,
    /// Task embedding `τ`, when the network uses one.
    pub task: Option<Var>,
}

/// Homogenised-input MLP used by the MAML baseline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddedMlp {
    pub modality_dims: Vec<usize>,
    pub mlp: MlpArchitecture,
}

impl PaddedMlp {
    /// Input width is the largest modality dimension.
    pub fn new(modality_dims: Vec<usize>, hidden: Vec<usize>, n_way: usize) -> Self {
        let input = modality_dims.iter().copied().max().unwrap_or(1);
        Self {
            modality_dims,
            mlp: MlpArchitecture { input, hidden, n_way },
        }
    }

    /// Zero-pads every modality vector to the largest dimension and sums them.
    pub fn homogenize(&self, inputs: &[Tensor]) -> Result<Tensor, HetError> {
        if inputs.len() != self.modality_dims.len() {
            return Err(HetError::stage(
                "homogenize",
                NnError::ModalityCount {
                    expected: self.modality_dims.len(),
                    got: inputs.len(),
                },
            ));
        }
        let rows = inputs[0].shape()[0];
        let width = self.mlp.input;
        let mut out = vec![0.0; rows * width];
        for (m, x) in inputs.iter().enumerate() {
            let dim = self.modality_dims[m];
            if x.rank() != 2 || x.shape() != [rows, dim] {
                return Err(HetError::stage(
                    "homogenize",
                    NnError::ModalityDim {
                        modality: m,
                        expected: dim,
                        got: x.shape().last().copied().unwrap_or(0),
                    },
                ));
            }
            for r in 0..rows {
                for (o, v) in out[r * width..r * width + dim]
                    .iter_mut()
                    .zip(&x.data()[r * dim..(r + 1) * dim])
                {
                    *o += v;
                }
            }
        }
        Ok(Tensor::new(vec![rows, width], out).expect("consistent dims"))
    }
}

/// The network families the meta-learners operate on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Network {
    /// Multi-channel backbone, task-aware aggregation and head.
    HetNet(Architecture),
    /// Single-channel MLP on zero-padded, summed modalities.
    PaddedMlp(PaddedMlp),
}

impl Network {
    pub fn init(&self, seed: u64) -> Result<ParamSet, HetError> {
        match self {
            Network::HetNet(arch) => init_params(arch, seed).map_err(|e| HetError::stage("init", e)),
            Network::PaddedMlp(p) => init_mlp_params(&p.mlp, seed).map_err(|e| HetError::stage("init", e)),
        }
    }

    pub fn n_way(&self) -> usize {
        match self {
            Network::HetNet(a) => a.n_way,
            Network::PaddedMlp(p) => p.mlp.n_way,
        }
    }

    /// Runs everything that does not involve internal parameters.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &SampleBatch,
        config: &ConfigVector,
    ) -> Result<Encoded, HetError> {
        match self {
            Network::HetNet(arch) => {
                let view = HetNetParams::from_vars(arch, vars).map_err(|e| HetError::stage("parameters", e))?;
                let tokens = backbone_forward(tape, &view.backbone, &batch.inputs, config.as_slice())
                    .map_err(|e| HetError::stage("backbone", e))?;
                let task = task_embed(tape, &view.tfan.task_embed, config.as_slice())
                    .map_err(|e| HetError::stage("task_embed", e.into()))?;
                Ok(Encoded {
                    tokens,
                    task: Some(task),
                })
            }
            Network::PaddedMlp(p) => {
                let x = p.homogenize(&batch.inputs)?;
                Ok(Encoded {
                    tokens: vec![tape.constant(x)],
                    task: None,
                })
            }
        }
    }

    /// Logits `[B, N]` from encoded inputs and the current parameters.
    pub fn classify(&self, tape: &mut Tape, vars: &[Var], encoded: &Encoded) -> Result<Var, HetError> {
        match self {
            Network::HetNet(arch) => {
                let view = HetNetParams::from_vars(arch, vars).map_err(|e| HetError::stage("parameters", e))?;
                let hs = iterative_aggregate(tape, &view.tfan.fwd, &view.tfan.bwd, &encoded.tokens)
                    .map_err(|e| HetError::stage("iterative_aggregate", e))?;
                let tau = encoded.task.ok_or_else(|| HetError::stage("attention", NnError::EmptySequence))?;
                let (h_star, _) = attention_aggregate(tape, view.tfan.attn_v, view.tfan.attn_w, &hs, tau)
                    .map_err(|e| HetError::stage("attention", e))?;
                head_forward(tape, &view.head, h_star).map_err(|e| HetError::stage("head", e.into()))
            }
            Network::PaddedMlp(p) => {
                let layers = mlp_layers(&p.mlp, vars).map_err(|e| HetError::stage("parameters", e))?;
                mlp_forward(tape, &layers, encoded.tokens[0]).map_err(|e| HetError::stage("mlp", e.into()))
            }
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &SampleBatch,
        config: &ConfigVector,
    ) -> Result<Var, HetError> {
        let encoded = self.encode(tape, vars, batch, config)?;
        self.classify(tape, vars, &encoded)
    }
}

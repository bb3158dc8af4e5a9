use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};

use super::layers::{take_layers, BackboneParams, Cursor, HeadParams, LinearParams, LstmCellParams, TfanParams, LSTM_GATES};
use super::params::{Group, ParamInit, ParamSet};
use super::NnError;

/// Dimensions of the three-module network.
///
/// `channels[m]` says whether the model carries an encoder for modality `m`;
/// a model trained on a single task type only needs the channels that type
/// uses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub modality_dims: Vec<usize>,
    pub channels: Vec<bool>,
    pub f1: usize,
    pub f2: usize,
    pub f3: usize,
    pub n_way: usize,
}

impl Architecture {
    pub fn new(modality_dims: Vec<usize>, f1: usize, f2: usize, f3: usize, n_way: usize) -> Self {
        let channels = vec![true; modality_dims.len()];
        Self {
            modality_dims,
            channels,
            f1,
            f2,
            f3,
            n_way,
        }
    }

    pub fn with_channels(mut self, channels: Vec<bool>) -> Self {
        self.channels = channels;
        self
    }

    pub fn modalities(&self) -> usize {
        self.modality_dims.len()
    }

    /// Hidden width of each recurrent direction.
    pub fn hidden(&self) -> usize {
        self.f2 / 2
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.modality_dims.is_empty() || self.channels.len() != self.modality_dims.len() {
            return Err(NnError::InvalidArchitecture(
                "modality dims and channel mask must be non-empty and equally long".into(),
            ));
        }
        if self.modality_dims.contains(&0) || [self.f1, self.f2, self.f3, self.n_way].contains(&0) {
            return Err(NnError::InvalidArchitecture("all dimensions must be positive".into()));
        }
        if self.f2 % 2 != 0 {
            return Err(NnError::InvalidArchitecture(format!(
                "F2 = {} must be even so each direction gets F2/2 units",
                self.f2
            )));
        }
        Ok(())
    }
}

/// Initialises all parameters of `arch`.
///
/// Weights are uniform in ±sqrt(6/(fan_in+fan_out)); biases are zero except
/// the forget-gate biases, which start at one.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ParamSet, NnError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = ParamInit::new(&mut rng);
    let (f1, f2, f3, h) = (arch.f1, arch.f2, arch.f3, arch.hidden());

    for (m, (&dim, &present)) in arch.modality_dims.iter().zip(&arch.channels).enumerate() {
        if present {
            init.linear(&format!("backbone.{m}.l0"), Group::External, dim, f1);
            init.linear(&format!("backbone.{m}.l1"), Group::External, f1, f1);
        }
    }
    for dir in ["fwd", "bwd"] {
        for gate in LSTM_GATES {
            let p = format!("tfan.{dir}");
            init.weight(format!("{p}.W_{gate}"), Group::Internal, &[h, f1], f1, h);
            init.weight(format!("{p}.U_{gate}"), Group::Internal, &[h, h], h, h);
            let bias = if gate == "f" { 1.0 } else { 0.0 };
            init.fill(format!("{p}.b_{gate}"), Group::Internal, &[h], bias);
        }
    }
    init.linear("tfan.embed.l0", Group::External, arch.modalities(), f3);
    init.linear("tfan.embed.l1", Group::External, f3, f3);
    init.weight("tfan.attn.v".into(), Group::External, &[f3], f3, 1);
    init.weight("tfan.attn.W_h".into(), Group::External, &[f3, f2 + f3], f2 + f3, f3);
    init.linear("head.l0", Group::Internal, f2, f2);
    init.linear("head.l1", Group::Internal, f2, arch.n_way);
    Ok(init.params)
}

/// Typed view over a bound parameter list in [`init_params`] order.
#[derive(Clone, Debug)]
pub struct HetNetParams {
    pub backbone: BackboneParams,
    pub tfan: TfanParams,
    pub head: HeadParams,
}

impl HetNetParams {
    pub fn from_vars(arch: &Architecture, vars: &[Var]) -> Result<Self, NnError> {
        let mut cur = Cursor::new(vars);
        let channels = arch
            .channels
            .iter()
            .map(|&present| if present { take_layers(&mut cur, 2).map(Some) } else { Ok(None) })
            .collect::<Result<Vec<_>, _>>()?;
        let fwd = LstmCellParams::take(&mut cur)?;
        let bwd = LstmCellParams::take(&mut cur)?;
        let task_embed = take_layers(&mut cur, 2)?;
        let attn_v = cur.next()?;
        let attn_w = cur.next()?;
        let head = take_layers(&mut cur, 2)?;
        cur.finish()?;
        Ok(Self {
            backbone: BackboneParams {
                channels,
                width: arch.f1,
            },
            tfan: TfanParams {
                fwd,
                bwd,
                task_embed,
                attn_v,
                attn_w,
            },
            head: HeadParams { layers: head },
        })
    }

    /// Binds `params` as leaves on `tape` and returns the typed view.
    pub fn bind(arch: &Architecture, params: &ParamSet, tape: &mut Tape) -> Result<(Self, Vec<Var>), NnError> {
        let vars = params.bind(tape);
        Ok((Self::from_vars(arch, &vars)?, vars))
    }
}

/// Parameter count of the iterative aggregator plus attention, i.e. the part
/// of the aggregation network whose size does not depend on the number of
/// modalities.
pub fn aggregator_count(params: &ParamSet) -> usize {
    params.count_prefix("tfan.fwd.") + params.count_prefix("tfan.bwd.") + params.count_prefix("tfan.attn.")
}

/// `2·4·(F1·H + H² + H) + |φ| + F3 + F3·(F2+F3)` with `H = F2/2`.
pub fn tfan_count_closed_form(f1: usize, f2: usize, f3: usize, embed_count: usize) -> usize {
    let h = f2 / 2;
    2 * 4 * (f1 * h + h * h + h) + embed_count + f3 + f3 * (f2 + f3)
}

/// Plain MLP classifier for the homogenised-input baseline. Every parameter
/// is internal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub n_way: usize,
}

impl MlpArchitecture {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.n_way);
        w
    }
}

pub fn init_mlp_params(arch: &MlpArchitecture, seed: u64) -> Result<ParamSet, NnError> {
    let widths = arch.widths();
    if widths.contains(&0) {
        return Err(NnError::InvalidArchitecture("all dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = ParamInit::new(&mut rng);
    for (i, pair) in widths.windows(2).enumerate() {
        init.linear(&format!("mlp.l{i}"), Group::Internal, pair[0], pair[1]);
    }
    Ok(init.params)
}

pub fn mlp_layers(arch: &MlpArchitecture, vars: &[Var]) -> Result<Vec<LinearParams>, NnError> {
    let mut cur = Cursor::new(vars);
    let layers = take_layers(&mut cur, arch.hidden.len() + 1)?;
    cur.finish()?;
    Ok(layers)
}

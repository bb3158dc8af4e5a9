use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

use super::NnError;

/// Pulls consecutive parameter handles out of a flat list.
pub(crate) struct Cursor<'a> {
    vars: std::slice::Iter<'a, Var>,
}

impl<'a> Cursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars: vars.iter() }
    }

    pub fn next(&mut self) -> Result<Var, NnError> {
        self.vars.next().copied().ok_or(NnError::ParamLayout)
    }

    pub fn finish(mut self) -> Result<(), NnError> {
        match self.vars.next() {
            None => Ok(()),
            Some(_) => Err(NnError::ParamLayout),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: Var,
    pub bias: Var,
}

impl LinearParams {
    pub(crate) fn take(cur: &mut Cursor) -> Result<Self, NnError> {
        Ok(Self {
            weight: cur.next()?,
            bias: cur.next()?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// Stack of linear layers with tanh between them; the last layer is linear.
pub fn mlp_forward(tape: &mut Tape, layers: &[LinearParams], x: Var) -> Result<Var, AutodiffError> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(tape, h)?;
        if i + 1 < layers.len() {
            h = tape.tanh(h)?;
        }
    }
    Ok(h)
}

pub(crate) fn take_layers(cur: &mut Cursor, n: usize) -> Result<Vec<LinearParams>, NnError> {
    (0..n).map(|_| LinearParams::take(cur)).collect()
}

/// One direction of the recurrent aggregator: input weights `W_*` (`H × F1`),
/// recurrent weights `U_*` (`H × H`) and biases `b_*` for the forget, input,
/// output and candidate-cell gates.
#[derive(Clone, Copy, Debug)]
pub struct LstmCellParams {
    pub w_f: Var,
    pub w_i: Var,
    pub w_o: Var,
    pub w_c: Var,
    pub u_f: Var,
    pub u_i: Var,
    pub u_o: Var,
    pub u_c: Var,
    pub b_f: Var,
    pub b_i: Var,
    pub b_o: Var,
    pub b_c: Var,
}

/// Gate suffixes in parameter order.
pub const LSTM_GATES: [&str; 4] = ["f", "i", "o", "c"];

impl LstmCellParams {
    /// Expects `W_f, U_f, b_f, W_i, U_i, b_i, W_o, ..., b_c`.
    pub(crate) fn take(cur: &mut Cursor) -> Result<Self, NnError> {
        let mut gate = || -> Result<(Var, Var, Var), NnError> { Ok((cur.next()?, cur.next()?, cur.next()?)) };
        let (w_f, u_f, b_f) = gate()?;
        let (w_i, u_i, b_i) = gate()?;
        let (w_o, u_o, b_o) = gate()?;
        let (w_c, u_c, b_c) = gate()?;
        Ok(Self {
            w_f,
            w_i,
            w_o,
            w_c,
            u_f,
            u_i,
            u_o,
            u_c,
            b_f,
            b_i,
            b_o,
            b_c,
        })
    }

    pub fn all(&self) -> [Var; 12] {
        [
            self.w_f, self.u_f, self.b_f, self.w_i, self.u_i, self.b_i, self.w_o, self.u_o, self.b_o, self.w_c,
            self.u_c, self.b_c,
        ]
    }
}

/// `z·Wᵀ + h·Uᵀ + b`
fn gate_preactivation(tape: &mut Tape, z: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var, AutodiffError> {
    let zw = tape.matmul_t(z, w, false, true)?;
    let hu = tape.matmul_t(h, u, false, true)?;
    let s = tape.add(zw, hu)?;
    tape.add(s, b)
}

/// One LSTM step over a batch: `z` is `[B, F1]`, the states are `[B, H]`.
/// Returns the new hidden state and memory cell.
pub fn lstm_cell(
    tape: &mut Tape,
    p: &LstmCellParams,
    z: Var,
    h_prev: Var,
    cell_prev: Var,
) -> Result<(Var, Var), AutodiffError> {
    let f = gate_preactivation(tape, z, h_prev, p.w_f, p.u_f, p.b_f)?;
    let f = tape.sigmoid(f)?;
    let i = gate_preactivation(tape, z, h_prev, p.w_i, p.u_i, p.b_i)?;
    let i = tape.sigmoid(i)?;
    let o = gate_preactivation(tape, z, h_prev, p.w_o, p.u_o, p.b_o)?;
    let o = tape.sigmoid(o)?;
    let candidate = gate_preactivation(tape, z, h_prev, p.w_c, p.u_c, p.b_c)?;
    let candidate = tape.tanh(candidate)?;
    let kept = tape.mul(f, cell_prev)?;
    let written = tape.mul(i, candidate)?;
    let cell = tape.add(kept, written)?;
    let squashed = tape.tanh(cell)?;
    let h = tape.mul(o, squashed)?;
    Ok((h, cell))
}

/// Bidirectional pass over the modality sequence `zs` (each `[B, F1]`).
///
/// Output `m` is the forward state after reading `zs[..=m]` concatenated with
/// the backward state after reading `zs[m..]` in reverse; both directions
/// start from zero states.
pub fn iterative_aggregate(
    tape: &mut Tape,
    fwd: &LstmCellParams,
    bwd: &LstmCellParams,
    zs: &[Var],
) -> Result<Vec<Var>, NnError> {
    let first = *zs.first().ok_or(NnError::EmptySequence)?;
    let batch = tape.shape(first)[0];
    let hidden = tape.shape(fwd.b_f)[0];
    let zeros = tape.constant(Tensor::zeros(&[batch, hidden]));

    let mut forward_states = Vec::with_capacity(zs.len());
    let (mut h, mut c) = (zeros, zeros);
    for &z in zs {
        (h, c) = lstm_cell(tape, fwd, z, h, c)?;
        forward_states.push(h);
    }
    let mut backward_states = vec![zeros; zs.len()];
    let (mut h, mut c) = (zeros, zeros);
    for (m, &z) in zs.iter().enumerate().rev() {
        (h, c) = lstm_cell(tape, bwd, z, h, c)?;
        backward_states[m] = h;
    }
    forward_states
        .into_iter()
        .zip(backward_states)
        .map(|(f, b)| tape.concat(&[f, b], 1).map_err(NnError::from))
        .collect()
}

/// Embeds a configuration vector into `[F3]` with a tanh MLP.
pub fn task_embed(tape: &mut Tape, layers: &[LinearParams], config: &[bool]) -> Result<Var, AutodiffError> {
    let c: Vec<f64> = config.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let c = tape.constant(Tensor::from_parts(&[1, config.len()], c));
    let tau = mlp_forward(tape, layers, c)?;
    let width = tape.shape(tau)[1];
    tape.reshape(tau, &[width])
}

/// Task-conditioned attention pooling over the aggregated states.
///
/// Scores are `vᵀ tanh(W_h [h_m ⊕ τ])`, normalised with a softmax over `m`.
/// Returns the pooled state `[B, F2]` and the coefficients `[B, M]`.
pub fn attention_aggregate(
    tape: &mut Tape,
    attn_v: Var,
    attn_w: Var,
    hs: &[Var],
    tau: Var,
) -> Result<(Var, Var), NnError> {
    let first = *hs.first().ok_or(NnError::EmptySequence)?;
    let (batch, width) = (tape.shape(first)[0], tape.shape(first)[1]);
    let f3 = tape.value(tau).numel();
    let tau = tape.reshape(tau, &[f3])?;
    let tau_rows = tape.broadcast_to(tau, &[batch, f3])?;
    let v_col = tape.reshape(attn_v, &[tape.value(attn_v).numel(), 1])?;
    let mut scores = Vec::with_capacity(hs.len());
    for &h in hs {
        let joined = tape.concat(&[h, tau_rows], 1)?;
        let proj = tape.matmul_t(joined, attn_w, false, true)?;
        let act = tape.tanh(proj)?;
        scores.push(tape.matmul(act, v_col)?);
    }
    let scores = tape.concat(&scores, 1)?;
    let coeffs = tape.softmax(scores)?;
    let mut pooled = None;
    for (m, &h) in hs.iter().enumerate() {
        let a = tape.slice(coeffs, 1, m, m + 1)?;
        let a = tape.col_expand(a, width)?;
        let term = tape.mul(a, h)?;
        pooled = Some(match pooled {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok((pooled.expect("non-empty"), coeffs))
}

/// Per-modality encoders. Channels that a model does not carry are `None`.
#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub channels: Vec<Option<Vec<LinearParams>>>,
    pub width: usize,
}

/// Encodes each modality of a batch (`inputs[m]` is `[B, D_m]`).
///
/// Absent modalities (`config[m] == false`) become exact zeros of width `F1`
/// without touching the channel's parameters or recording anything about them.
pub fn backbone_forward(
    tape: &mut Tape,
    params: &BackboneParams,
    inputs: &[Tensor],
    config: &[bool],
) -> Result<Vec<Var>, NnError> {
    if inputs.len() != params.channels.len() || config.len() != params.channels.len() {
        return Err(NnError::ModalityCount {
            expected: params.channels.len(),
            got: inputs.len().min(config.len()),
        });
    }
    let batch = inputs.first().map(|t| t.shape()[0]).unwrap_or(1);
    let mut out = Vec::with_capacity(inputs.len());
    for (m, ((channel, x), &present)) in params.channels.iter().zip(inputs).zip(config).enumerate() {
        if x.rank() != 2 || x.shape()[0] != batch {
            return Err(NnError::ModalityDim {
                modality: m,
                expected: channel_input_dim(tape, channel.as_deref()),
                got: x.shape().last().copied().unwrap_or(0),
            });
        }
        if !present {
            out.push(tape.constant(Tensor::zeros(&[batch, params.width])));
            continue;
        }
        let layers = channel.as_ref().ok_or(NnError::MissingChannel(m))?;
        let expected = tape.shape(layers[0].weight)[1];
        if x.shape()[1] != expected {
            return Err(NnError::ModalityDim {
                modality: m,
                expected,
                got: x.shape()[1],
            });
        }
        let x = tape.constant(x.clone());
        out.push(mlp_forward(tape, layers, x)?);
    }
    Ok(out)
}

fn channel_input_dim(tape: &Tape, layers: Option<&[LinearParams]>) -> usize {
    layers
        .and_then(|l| l.first())
        .map(|l| tape.shape(l.weight)[1])
        .unwrap_or(0)
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub layers: Vec<LinearParams>,
}

/// Classifier logits `[B, N]`; softmax is left to the loss.
pub fn head_forward(tape: &mut Tape, params: &HeadParams, h_star: Var) -> Result<Var, AutodiffError> {
    mlp_forward(tape, &params.layers, h_star)
}

#[derive(Clone, Debug)]
pub struct TfanParams {
    pub fwd: LstmCellParams,
    pub bwd: LstmCellParams,
    pub task_embed: Vec<LinearParams>,
    pub attn_v: Var,
    pub attn_w: Var,
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{init_params, Architecture, HetNetParams, ParamSet};

    fn arch(m: usize) -> Architecture {
        Architecture::new(vec![3, 2, 4, 5, 1, 2, 3, 2][..m].to_vec(), 4, 4, 3, 3)
    }

    /// `w` is `[out, in]`.
    fn mv(w: &Tensor, x: &[f64]) -> Vec<f64> {
        w.data().chunks(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn affine(ps: &ParamSet, prefix: &str, x: &[f64]) -> Vec<f64> {
        let w = ps.get(&format!("{prefix}.weight")).unwrap();
        let b = ps.get(&format!("{prefix}.bias")).unwrap();
        mv(w, x).iter().zip(b.data()).map(|(a, b)| a + b).collect()
    }

    fn tanh_v(x: Vec<f64>) -> Vec<f64> {
        x.into_iter().map(f64::tanh).collect()
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn oracle_cell(ps: &ParamSet, dir: &str, z: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre = |g: &str| -> Vec<f64> {
            let wz = mv(ps.get(&format!("tfan.{dir}.W_{g}")).unwrap(), z);
            let uh = mv(ps.get(&format!("tfan.{dir}.U_{g}")).unwrap(), h);
            let b = ps.get(&format!("tfan.{dir}.b_{g}")).unwrap().data();
            (0..b.len()).map(|k| wz[k] + uh[k] + b[k]).collect()
        };
        let (f, i, o, cand) = (pre("f"), pre("i"), pre("o"), pre("c"));
        let cell: Vec<f64> = (0..f.len()).map(|k| sig(f[k]) * c[k] + sig(i[k]) * cand[k].tanh()).collect();
        let h = (0..f.len()).map(|k| sig(o[k]) * cell[k].tanh()).collect();
        (h, cell)
    }

    fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
    }

    fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
        Tensor::matrix(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn zeroed(ps: &ParamSet) -> ParamSet {
        ps.with_values(ps.values().iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    fn set(ps: &mut ParamSet, name: &str, value: f64) {
        let e = ps.entries_mut().iter_mut().find(|e| e.name == name).unwrap();
        e.value = Tensor::full(e.value.shape(), value);
    }

    #[test]
    fn zero_lstm_gives_zero_state() {
        let a = arch(2);
        let ps = zeroed(&init_params(&a, 1).unwrap());
        let mut t = Tape::new();
        let (net, _) = HetNetParams::bind(&a, &ps, &mut t).unwrap();
        let z = t.constant(Tensor::full(&[2, 4], 0.7));
        let h0 = t.constant(Tensor::full(&[2, 2], -0.3));
        let (h, _) = lstm_cell(&mut t, &net.tfan.fwd, z, h0, h0).unwrap();
        // cell = σ(0)·(-0.3) = -0.15 so only a zero initial cell gives h = 0
        let zero = t.constant(Tensor::zeros(&[2, 2]));
        let (h_zero, _) = lstm_cell(&mut t, &net.tfan.fwd, z, h0, zero).unwrap();
        assert!(t.value(h_zero).data().iter().all(|&x| x == 0.0));
        let expect = 0.5 * (-0.15f64).tanh();
        assert!(t.value(h).data().iter().all(|&x| (x - expect).abs() < 1e-15));
    }

    #[test]
    fn saturated_gates_match_direct_formula() {
        let a = arch(2);
        let mut ps = zeroed(&init_params(&a, 1).unwrap());
        let big = 6.0;
        for g in ["o", "i", "c"] {
            set(&mut ps, &format!("tfan.fwd.b_{g}"), big);
        }
        let mut t = Tape::new();
        let (net, _) = HetNetParams::bind(&a, &ps, &mut t).unwrap();
        let zero_z = t.constant(Tensor::zeros(&[1, 4]));
        let zero_h = t.constant(Tensor::zeros(&[1, 2]));
        let (h, c) = lstm_cell(&mut t, &net.tfan.fwd, zero_z, zero_h, zero_h).unwrap();
        let cell = sig(big) * big.tanh();
        assert!(t.value(c).data().iter().all(|&x| (x - cell).abs() < 1e-15));
        assert!(t.value(h).data().iter().all(|&x| (x - sig(big) * cell.tanh()).abs() < 1e-15));
    }

    #[test]
    fn lstm_cell_matches_oracle() {
        let a = arch(2);
        let ps = init_params(&a, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (z, h, c) = (random_rows(&mut rng, 3, 4), random_rows(&mut rng, 3, 2), random_rows(&mut rng, 3, 2));
        let mut t = Tape::new();
        let (net, _) = HetNetParams::bind(&a, &ps, &mut t).unwrap();
        let (zv, hv, cv) = (t.constant(rows_tensor(&z)), t.constant(rows_tensor(&h)), t.constant(rows_tensor(&c)));
        let (h_out, c_out) = lstm_cell(&mut t, &net.tfan.fwd, zv, hv, cv).unwrap();
        for r in 0..3 {
            let (eh, ec) = oracle_cell(&ps, "fwd", &z[r], &h[r], &c[r]);
            assert!(close(&t.value(h_out).data()[r * 2..r * 2 + 2], &eh, 1e-14));
            assert!(close(&t.value(c_out).data()[r * 2..r * 2 + 2], &ec, 1e-14));
        }
    }

    #[test]
    fn single_token_with_shared_directions_has_equal_halves() {
        let a = arch(1);
        let ps = init_params(&a, 2).unwrap();
        let mut t = Tape::new();
        let (net, _) = HetNetParams::bind(&a, &ps, &mut t).unwrap();
        let z = t.constant(Tensor::full(&[1, 4], 0.4));
        let hs = iterative_aggregate(&mut t, &net.tfan.fwd, &net.tfan.fwd, &[z]).unwrap();
        let d = t.value(hs[0]).data();
        assert_eq!(d[..2], d[2..]);
        assert!(iterative_aggregate(&mut t, &net.tfan.fwd, &net.tfan.bwd, &[]).is_err());
    }

    #[test]
    fn zero_aggregator_gives_zero_states() {
        let a = arch(3);
        let ps = zeroed(&init_params(&a, 2).unwrap());
        let mut t = Tape::new();
        let (net, _) = HetNetParams::bind(&a, &ps, &mut t).unwrap();
        let zs: Vec<Var> = (0..3).map(|m| t.constant(Tensor::full(&[2, 4], m as f64 - 0.5))).collect();
        for h in iterative_aggregate(&mut t, &net.tfan.fwd, &net.tfan.bwd, &zs).unwrap() {
            assert!(t.value(h).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn bidirectional_pass_matches_unrolled_recurrence() {
        let a = arch(3);
        let ps = init_params(&a, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zs: Vec<Vec<f64>> = random_rows(&mut rng, 3, 4);
        let mut t = Tape::new();
        let (net, _) = HetNetParams::bind(&a, &ps, &mut t).unwrap();
        let zv: Vec<Var> = zs.iter().map(|z| t.constant(rows_tensor(std::slice::from_ref(z)))).collect();
        let hs = iterative_aggregate(&mut t, &net.tfan.fwd, &net.tfan.bwd, &zv).unwrap();

        let zero = vec![0.0; 2];
        let mut fwd = Vec::new();
        let (mut h, mut c) = (zero.clone(), zero.clone());
        for z in &zs {
            (h, c) = oracle_cell(&ps, "fwd", z, &h, &c);
            fwd.push(h.clone());
        }
        let mut bwd = vec![Vec::new(); 3];
        let (mut h, mut c) = (zero.clone(), zero);
        for m in (0..3).rev() {
            (h, c) = oracle_cell(&ps, "bwd", &zs[m], &h, &c);
            bwd[m] = h.clone();
        }
        for m in 0..3 {
            let expect = [fwd[m].clone(), bwd[m].clone()].concat();
            assert!(close(t.value(hs[m]).data(), &expect, 1e-14), "position {m}");
        }
    }

    #[test]
    fn task_embedding_examples() {
        let a = arch(3);
        let ps = init_params(&a, 4).unwrap();
        let mut t = Tape::new();
        let (net, _) = HetNetParams::bind(&a, &ps, &mut t).unwrap();
        let c = [true, false, true];
        let t1 = task_embed(&mut t, &net.tfan.task_embed, &c).unwrap();
        let t2 = task_embed(&mut t, &net.tfan.task_embed, &c).unwrap();
        assert_eq!(t.value(t1), t.value(t2));
        let expect = affine(&ps, "tfan.embed.l1", &tanh_v(affine(&ps, "tfan.embed.l0", &[1.0, 0.0, 1.0])));
        assert!(close(t.value(t1).data(), &expect, 1e-15));

        // Single layer, weight rows [1,0,0],[0,1,0],[0,0,1]: τ = c + b.
        let w = t.constant(Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.constant(Tensor::vector(vec![0.5, -0.5, 2.0]));
        let tau = task_embed(&mut t, &[LinearParams { weight: w, bias: b }], &c).unwrap();
        assert_eq!(t.value(tau).data(), &[1.5, -0.5, 3.0]);

        let zero_w = t.constant(Tensor::zeros(&[3, 3]));
        let tau = task_embed(&mut t, &[LinearParams { weight: zero_w, bias: b }], &c).unwrap();
        assert_eq!(t.value(tau).data(), &[0.5, -0.5, 2.0]);
    }

    fn attention_oracle(ps: &ParamSet, hs: &[Vec<f64>], tau: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let v = ps.get("tfan.attn.v").unwrap().data();
        let w = ps.get("tfan.attn.W_h").unwrap();
        let scores: Vec<f64> = hs
            .iter()
            .map(|h| {
                let joined = [h.clone(), tau.to_vec()].concat();
                tanh_v(mv(w, &joined)).iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = e.iter().sum();
        let coeffs: Vec<f64> = e.iter().map(|x| x / total).collect();
        let pooled = (0..hs[0].len()).map(|k| hs.iter().zip(&coeffs).map(|(h, a)| a * h[k]).sum()).collect();
        (pooled, coeffs)
    }

    fn run_attention(ps: &ParamSet, a: &Architecture, hs: &[Vec<f64>], tau: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut t = Tape::new();
        let (net, _) = HetNetParams::bind(a, ps, &mut t).unwrap();
        let hv: Vec<Var> = hs.iter().map(|h| t.constant(rows_tensor(std::slice::from_ref(h)))).collect();
        let tv = t.constant(Tensor::vector(tau.to_vec()));
        let (pooled, coeffs) = attention_aggregate(&mut t, net.tfan.attn_v, net.tfan.attn_w, &hv, tv).unwrap();
        (t.value(pooled).data().to_vec(), t.value(coeffs).data().to_vec())
    }

    #[test]
    fn attention_examples() {
        let a = arch(3);
        let ps = init_params(&a, 8).unwrap();
        let h = vec![0.3, -0.2, 0.9, 0.1];
        let tau = [0.2, 0.5, -0.4];
        let (pooled, coeffs) = run_attention(&ps, &a, &[h.clone(), h.clone(), h.clone()], &tau);
        assert!(coeffs.iter().all(|&c| (c - 1.0 / 3.0).abs() < 1e-12));
        assert!(close(&pooled, &h, 1e-12));

        let (pooled, coeffs) = run_attention(&ps, &a, std::slice::from_ref(&h), &tau);
        assert_eq!(coeffs, [1.0]);
        assert_eq!(pooled, h);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hs = random_rows(&mut rng, 2, 4);
        let (pooled, coeffs) = run_attention(&ps, &a, &hs, &tau);
        let (ep, ec) = attention_oracle(&ps, &hs, &tau);
        assert!(close(&coeffs, &ec, 1e-14));
        assert!(close(&pooled, &ep, 1e-14));
    }

    #[test]
    fn head_examples() {
        let a = arch(2);
        let ps = init_params(&a, 6).unwrap();
        let h = [0.1, -0.4, 0.8, 0.3];
        let mut t = Tape::new();
        let (net, _) = HetNetParams::bind(&a, &ps, &mut t).unwrap();
        let hv = t.constant(rows_tensor(&[h.to_vec()]));
        let logits = head_forward(&mut t, &net.head, hv).unwrap();
        let expect = affine(&ps, "head.l1", &tanh_v(affine(&ps, "head.l0", &h)));
        assert!(close(t.value(logits).data(), &expect, 1e-15));

        let b = t.constant(Tensor::vector(vec![0.5, 1.0, -1.0, 2.0]));
        let zero = t.constant(Tensor::zeros(&[4, 4]));
        let eye = t.constant(Tensor::matrix(4, 4, (0..16).map(|k| if k % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap());
        let zero_head = HeadParams {
            layers: vec![LinearParams { weight: zero, bias: b }],
        };
        let out = head_forward(&mut t, &zero_head, hv).unwrap();
        assert_eq!(t.value(out).data(), &[0.5, 1.0, -1.0, 2.0]);
        let eye_head = HeadParams {
            layers: vec![LinearParams { weight: eye, bias: b }],
        };
        let out = head_forward(&mut t, &eye_head, hv).unwrap();
        assert!(close(t.value(out).data(), &[0.6, 0.6, -0.2, 2.3], 1e-15));
    }

    #[test]
    fn backbone_masks_and_matches_oracle() {
        let a = arch(2);
        let ps = init_params(&a, 3).unwrap();
        let x0 = vec![0.5, -1.0, 0.25];
        let x1 = vec![2.0, 0.1];
        let inputs = [rows_tensor(&[x0.clone()]), rows_tensor(&[x1.clone()])];
        let mut t = Tape::new();
        let (net, vars) = HetNetParams::bind(&a, &ps, &mut t).unwrap();

        let z = backbone_forward(&mut t, &net.backbone, &inputs, &[true, true]).unwrap();
        for (m, x) in [&x0, &x1].into_iter().enumerate() {
            let expect = affine(&ps, &format!("backbone.{m}.l1"), &tanh_v(affine(&ps, &format!("backbone.{m}.l0"), x)));
            assert!(close(t.value(z[m]).data(), &expect, 1e-15));
        }

        let z = backbone_forward(&mut t, &net.backbone, &inputs, &[true, false]).unwrap();
        assert_eq!(t.value(z[1]).data(), &[0.0; 4]);

        let z = backbone_forward(&mut t, &net.backbone, &inputs, &[false, false]).unwrap();
        let zs = t.concat(&z, 1).unwrap();
        let s = t.sum(zs).unwrap();
        assert_eq!(t.value(s).item(), 0.0);
        let grads = t.backward(s, None).unwrap();
        assert!(vars[..8].iter().all(|&v| grads.get(v).unwrap().data().iter().all(|&g| g == 0.0)));

        let bad = [rows_tensor(&[x1.clone()]), rows_tensor(&[x1])];
        assert!(matches!(
            backbone_forward(&mut t, &net.backbone, &bad, &[true, true]),
            Err(NnError::ModalityDim { modality: 0, expected: 3, got: 2 })
        ));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Architecture::new(vec![6, 5], 8, 6, 4, 5);
        let p = init_params(&a, 42).unwrap();
        assert_eq!(p, init_params(&a, 42).unwrap());
        assert_ne!(p, init_params(&a, 43).unwrap());
        for e in p.entries() {
            if e.name.ends_with(".b_f") {
                assert!(e.value.data().iter().all(|&x| x == 1.0), "{}", e.name);
            } else if e.name.contains(".b_") || e.name.ends_with(".bias") {
                assert!(e.value.data().iter().all(|&x| x == 0.0), "{}", e.name);
            } else {
                let (fan_in, fan_out) = match e.value.shape() {
                    [out, inp] => (*inp, *out),
                    [n] => (*n, 1),
                    s => panic!("unexpected shape {s:?}"),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                assert!(e.value.data().iter().all(|x| x.abs() <= bound), "{}", e.name);
            }
        }
        let odd = Architecture::new(vec![6, 5], 8, 5, 4, 5);
        assert!(matches!(init_params(&odd, 0), Err(NnError::InvalidArchitecture(_))));
    }

    #[test]
    fn aggregator_size_does_not_grow_with_modalities() {
        use crate::nn::{aggregator_count, tfan_count_closed_form};
        let small = init_params(&Architecture::new(vec![4; 2], 32, 16, 8, 5), 0).unwrap();
        let large = init_params(&Architecture::new(vec![4; 8], 32, 16, 8, 5), 0).unwrap();
        assert_eq!(aggregator_count(&small), aggregator_count(&large));
        for (p, m) in [(&small, 2), (&large, 8)] {
            let tfan: usize = p
                .entries()
                .iter()
                .filter(|e| e.name.starts_with("tfan."))
                .map(|e| e.value.numel())
                .sum();
            let embed = m * 8 + 8 + 8 * 8 + 8;
            assert_eq!(tfan_count_closed_form(32, 16, 8, embed), tfan);
        }
    }

    proptest! {
        #[test]
        fn attention_coefficients_sum_to_one(seed in 0u64..1000, m in 1usize..6) {
            let a = arch(3);
            let ps = init_params(&a, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hs: Vec<Vec<f64>> = (0..m).map(|_| (0..4).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
            let (_, coeffs) = run_attention(&ps, &a, &hs, &[0.1, 0.2, 0.3]);
            prop_assert!((coeffs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

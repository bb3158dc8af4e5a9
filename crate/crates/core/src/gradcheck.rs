//! Central finite-difference checks of every analytic gradient in the crate.
//!
//! Each check is a scalar objective over a few input tensors. The analytic
//! gradient comes from a pluggable function (normally the tape) and is
//! compared coordinate by coordinate against `(f(x+h) − f(x−h)) / 2h`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{cross_entropy, AutodiffError, Tape, Tensor, Var};
use crate::hetmaml::{bilevel_objective, HetError, Network, PaddedMlp, TrainConfig};
use crate::nn::{
    attention_aggregate, head_forward, iterative_aggregate, lstm_cell, Architecture, Group,
    HeadParams, LinearParams, LstmCellParams,
};
use crate::tasks::{ConfigVector, LabeledSample, TaskInstance};

pub const SUITES: [&str; 9] = [
    "primitives",
    "linear",
    "lstm",
    "bilstm",
    "attention",
    "head",
    "forward",
    "inner",
    "meta",
];

/// Tolerance on the maximum relative error for single-level gradients.
pub const LAYER_TOLERANCE: f64 = 1e-5;
/// Tolerance for gradients through an inner-loop update.
pub const META_TOLERANCE: f64 = 1e-4;

/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-3;

const M: usize = 3;
const DIMS: [usize; M] = [3, 2, 4];
const F1: usize = 4;
const F2: usize = 4;
const F3: usize = 3;
const H: usize = F2 / 2;
const N_WAY: usize = 3;
const BATCH: usize = 3;

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error("unknown gradcheck suite `{0}` (known: {known})", known = SUITES.join(", "))]
    UnknownSuite(String),
    #[error("check {check}: {source}")]
    Objective {
        check: String,
        #[source]
        source: HetError,
    },
    #[error("check {check}: analytic gradient has the wrong shape")]
    AnalyticShape { check: String },
}

/// Computes `∂output/∂wrt` for a scalar `output` on `tape`.
pub type AnalyticGrad = dyn Fn(&mut Tape, Var, &[Var]) -> Result<Vec<Tensor>, AutodiffError>;

/// Reverse-mode gradient read off the tape.
pub fn tape_gradient(tape: &mut Tape, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>, AutodiffError> {
    tape.grad_values(output, wrt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Random instances per check.
    pub seeds: usize,
    /// Suites to run; empty means all.
    pub only: Vec<String>,
    /// Finite-difference step.
    pub step: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            only: Vec::new(),
            step: 1e-6,
        }
    }
}

/// Worst case of one check over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckSummary {
    pub suite: &'static str,
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub seeds: usize,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<CheckSummary>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckSummary::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckSummary> {
        self.checks.iter().filter(|c| !c.passed())
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<40} max_rel_err={:.3e} tol={:.0e} seeds={}",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.max_rel_err,
                c.tolerance,
                c.seeds
            )?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, HetError>>;

struct Check {
    suite: &'static str,
    name: String,
    inputs: Vec<Tensor>,
    objective: Objective,
    tolerance: f64,
}

/// Runs the selected suites with the tape's own gradients.
pub fn run(options: &GradcheckOptions) -> Result<GradcheckReport, GradcheckError> {
    run_with(options, &tape_gradient)
}

/// Runs the selected suites with `analytic` standing in for the gradient
/// under test.
pub fn run_with(options: &GradcheckOptions, analytic: &AnalyticGrad) -> Result<GradcheckReport, GradcheckError> {
    let suites = selected_suites(&options.only)?;
    let mut checks: Vec<CheckSummary> = Vec::new();
    for &suite in &suites {
        for seed in 0..options.seeds as u64 {
            for check in build_suite(suite, seed) {
                let err = max_relative_error(&check, analytic, options.step)?;
                match checks.iter_mut().find(|c| c.name == check.name) {
                    Some(c) => {
                        c.max_rel_err = worse(c.max_rel_err, err);
                        c.seeds += 1;
                    }
                    None => checks.push(CheckSummary {
                        suite: check.suite,
                        name: check.name,
                        max_rel_err: err,
                        tolerance: check.tolerance,
                        seeds: 1,
                    }),
                }
            }
        }
    }
    Ok(GradcheckReport { checks })
}

fn worse(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn selected_suites(only: &[String]) -> Result<Vec<&'static str>, GradcheckError> {
    if only.is_empty() {
        return Ok(SUITES.to_vec());
    }
    let mut picked = Vec::new();
    for name in only {
        let suite = SUITES
            .iter()
            .find(|s| s.eq_ignore_ascii_case(name.trim()))
            .ok_or_else(|| GradcheckError::UnknownSuite(name.clone()))?;
        if !picked.contains(suite) {
            picked.push(*suite);
        }
    }
    Ok(picked)
}

fn evaluate(check: &Check, inputs: &[Tensor]) -> Result<f64, GradcheckError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (check.objective)(&mut tape, &vars).map_err(|source| GradcheckError::Objective {
        check: check.name.clone(),
        source,
    })?;
    Ok(tape.value(out).item())
}

fn max_relative_error(check: &Check, analytic: &AnalyticGrad, h: f64) -> Result<f64, GradcheckError> {
    let fail = |source: HetError| GradcheckError::Objective {
        check: check.name.clone(),
        source,
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = check.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (check.objective)(&mut tape, &vars).map_err(fail)?;
    let grads = analytic(&mut tape, out, &vars).map_err(|e| fail(e.into()))?;
    let shapes_ok = grads.len() == vars.len() && grads.iter().zip(&check.inputs).all(|(g, x)| g.shape() == x.shape());
    if !shapes_ok {
        return Err(GradcheckError::AnalyticShape {
            check: check.name.clone(),
        });
    }
    let mut worst = 0.0f64;
    let mut inputs = check.inputs.clone();
    for (i, grad) in grads.iter().enumerate() {
        for j in 0..grad.numel() {
            let original = inputs[i].data()[j];
            inputs[i].data_mut()[j] = original + h;
            let plus = evaluate(check, &inputs)?;
            inputs[i].data_mut()[j] = original - h;
            let minus = evaluate(check, &inputs)?;
            inputs[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worse(worst, err);
        }
    }
    Ok(worst)
}

// ---- instance generation ----------------------------------------------------

fn rng_for(suite: &str, seed: u64) -> ChaCha8Rng {
    let salt = suite.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    ChaCha8Rng::seed_from_u64(salt ^ seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// `Σ r ⊙ y` with a fixed random `r`.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var, HetError> {
    let r = tape.constant(r.clone());
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod)?)
}

fn projections(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> Vec<Tensor> {
    shapes.iter().map(|s| rand_t(rng, s)).collect()
}

fn check(suite: &'static str, name: &str, inputs: Vec<Tensor>, tolerance: f64, objective: Objective) -> Check {
    Check {
        suite,
        name: format!("{suite}/{name}"),
        inputs,
        objective,
        tolerance,
    }
}

fn build_suite(suite: &'static str, seed: u64) -> Vec<Check> {
    let mut rng = rng_for(suite, seed);
    match suite {
        "primitives" => primitive_checks(&mut rng),
        "linear" => vec![linear_check(&mut rng)],
        "lstm" => vec![lstm_check(&mut rng)],
        "bilstm" => vec![bilstm_check(&mut rng)],
        "attention" => vec![attention_check(&mut rng)],
        "head" => vec![head_check(&mut rng)],
        "forward" => forward_checks(&mut rng, seed),
        "inner" => vec![inner_check(&mut rng, seed)],
        "meta" => meta_checks(&mut rng, seed),
        _ => Vec::new(),
    }
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>;

fn primitive_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let pos = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, 0.5, 2.0);
    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        ("add", vec![rand_t(rng, &[2, 3]), rand_t(rng, &[2, 3])], |t, x| t.add(x[0], x[1])),
        ("add_broadcast", vec![rand_t(rng, &[2, 3]), rand_t(rng, &[3])], |t, x| t.add(x[0], x[1])),
        ("sub", vec![rand_t(rng, &[2, 3]), rand_t(rng, &[2, 3])], |t, x| t.sub(x[0], x[1])),
        ("mul", vec![rand_t(rng, &[2, 3]), rand_t(rng, &[2, 3])], |t, x| t.mul(x[0], x[1])),
        ("mul_broadcast", vec![rand_t(rng, &[3]), rand_t(rng, &[2, 3])], |t, x| t.mul(x[0], x[1])),
        ("div", vec![rand_t(rng, &[2, 3]), pos(rng, &[2, 3])], |t, x| t.div(x[0], x[1])),
        ("scale", vec![rand_t(rng, &[4])], |t, x| t.scale(x[0], -1.7)),
        ("add_scalar", vec![rand_t(rng, &[4])], |t, x| t.add_scalar(x[0], 0.3)),
        ("sigmoid", vec![uniform(rng, &[2, 3], -3.0, 3.0)], |t, x| t.sigmoid(x[0])),
        ("tanh", vec![uniform(rng, &[2, 3], -2.0, 2.0)], |t, x| t.tanh(x[0])),
        ("exp", vec![rand_t(rng, &[2, 3])], |t, x| t.exp(x[0])),
        ("log", vec![pos(rng, &[2, 3])], |t, x| t.log(x[0])),
        ("matmul", vec![rand_t(rng, &[2, 3]), rand_t(rng, &[3, 4])], |t, x| t.matmul(x[0], x[1])),
        ("matmul_ta", vec![rand_t(rng, &[3, 2]), rand_t(rng, &[3, 4])], |t, x| {
            t.matmul_t(x[0], x[1], true, false)
        }),
        ("matmul_tb", vec![rand_t(rng, &[2, 3]), rand_t(rng, &[4, 3])], |t, x| {
            t.matmul_t(x[0], x[1], false, true)
        }),
        ("matmul_tab", vec![rand_t(rng, &[3, 2]), rand_t(rng, &[4, 3])], |t, x| {
            t.matmul_t(x[0], x[1], true, true)
        }),
        ("sum", vec![rand_t(rng, &[2, 3])], |t, x| t.sum(x[0])),
        ("expand_scalar", vec![rand_t(rng, &[1])], |t, x| t.expand_scalar(x[0], &[2, 3])),
        ("broadcast_to", vec![rand_t(rng, &[3])], |t, x| t.broadcast_to(x[0], &[2, 3])),
        ("sum_leading", vec![rand_t(rng, &[4, 3])], |t, x| t.sum_leading(x[0], &[3])),
        ("row_sum", vec![rand_t(rng, &[2, 3])], |t, x| t.row_sum(x[0])),
        ("col_expand", vec![rand_t(rng, &[2, 1])], |t, x| t.col_expand(x[0], 3)),
        ("softmax", vec![uniform(rng, &[2, 4], -2.0, 2.0)], |t, x| t.softmax(x[0])),
        ("concat_rows", vec![rand_t(rng, &[1, 3]), rand_t(rng, &[2, 3])], |t, x| t.concat(x, 0)),
        ("concat_cols", vec![rand_t(rng, &[2, 1]), rand_t(rng, &[2, 3])], |t, x| t.concat(x, 1)),
        ("stack", vec![rand_t(rng, &[3]), rand_t(rng, &[3])], |t, x| t.stack(x)),
        ("slice", vec![rand_t(rng, &[2, 5])], |t, x| t.slice(x[0], 1, 1, 4)),
        ("pad", vec![rand_t(rng, &[2, 3])], |t, x| t.pad(x[0], 1, 1, 2)),
        ("reshape", vec![rand_t(rng, &[2, 3])], |t, x| t.reshape(x[0], &[3, 2])),
        ("cross_entropy", vec![uniform(rng, &[3, 4], -2.0, 2.0)], |t, x| {
            cross_entropy(t, x[0], &[2, 0, 3])
        }),
    ];
    let mut checks = Vec::with_capacity(2 * cases.len());
    for (name, inputs, build) in cases {
        let mut probe = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| probe.leaf(x.clone())).collect();
        let out_shape = build(&mut probe, &vars).map(|v| probe.shape(v).to_vec()).expect("valid primitive");
        let r = rand_t(rng, &out_shape);
        let first = {
            let r = r.clone();
            Box::new(move |t: &mut Tape, x: &[Var]| {
                let y = build(t, x)?;
                project(t, y, &r)
            }) as Objective
        };
        // Gradient of a projection of the gradient: exercises the
        // differentiability of every vector-Jacobian product.
        let weights: Vec<Tensor> = inputs.iter().map(|x| rand_t(rng, x.shape())).collect();
        let second = Box::new(move |t: &mut Tape, x: &[Var]| {
            let y = build(t, x)?;
            let y = project(t, y, &r)?;
            let grads = t.grad(y, x, true)?;
            let mut total = None;
            for (g, w) in grads.into_iter().zip(&weights) {
                let term = project(t, g, w)?;
                total = Some(match total {
                    None => term,
                    Some(acc) => t.add(acc, term)?,
                });
            }
            Ok(total.expect("at least one input"))
        }) as Objective;
        checks.push(check("primitives", name, inputs.clone(), LAYER_TOLERANCE, first));
        checks.push(check("primitives", &format!("{name}/second_order"), inputs, LAYER_TOLERANCE, second));
    }
    checks
}

fn linear_check(rng: &mut ChaCha8Rng) -> Check {
    let inputs = vec![rand_t(rng, &[BATCH, F1]), rand_t(rng, &[F2, F1]), rand_t(rng, &[F2])];
    let r = rand_t(rng, &[BATCH, F2]);
    check(
        "linear",
        "linear",
        inputs,
        LAYER_TOLERANCE,
        Box::new(move |t, x| {
            let y = LinearParams {
                weight: x[1],
                bias: x[2],
            }
            .forward(t, x[0])?;
            project(t, y, &r)
        }),
    )
}

fn lstm_shapes() -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for _ in 0..4 {
        shapes.push(vec![H, F1]);
        shapes.push(vec![H, H]);
        shapes.push(vec![H]);
    }
    shapes
}

fn lstm_params(x: &[Var]) -> LstmCellParams {
    LstmCellParams {
        w_f: x[0],
        u_f: x[1],
        b_f: x[2],
        w_i: x[3],
        u_i: x[4],
        b_i: x[5],
        w_o: x[6],
        u_o: x[7],
        b_o: x[8],
        w_c: x[9],
        u_c: x[10],
        b_c: x[11],
    }
}

fn lstm_check(rng: &mut ChaCha8Rng) -> Check {
    let mut inputs: Vec<Tensor> = lstm_shapes().iter().map(|s| rand_t(rng, s)).collect();
    inputs.push(rand_t(rng, &[BATCH, F1]));
    inputs.push(rand_t(rng, &[BATCH, H]));
    inputs.push(rand_t(rng, &[BATCH, H]));
    let r = projections(rng, &[&[BATCH, H], &[BATCH, H]]);
    check(
        "lstm",
        "cell",
        inputs,
        LAYER_TOLERANCE,
        Box::new(move |t, x| {
            let (h, c) = lstm_cell(t, &lstm_params(&x[..12]), x[12], x[13], x[14])?;
            let a = project(t, h, &r[0])?;
            let b = project(t, c, &r[1])?;
            Ok(t.add(a, b)?)
        }),
    )
}

fn bilstm_check(rng: &mut ChaCha8Rng) -> Check {
    let shapes = lstm_shapes();
    let mut inputs: Vec<Tensor> = shapes.iter().chain(&shapes).map(|s| rand_t(rng, s)).collect();
    for _ in 0..M {
        inputs.push(rand_t(rng, &[BATCH, F1]));
    }
    let r: Vec<Tensor> = (0..M).map(|_| rand_t(rng, &[BATCH, F2])).collect();
    check(
        "bilstm",
        "aggregate",
        inputs,
        LAYER_TOLERANCE,
        Box::new(move |t, x| {
            let (fwd, bwd) = (lstm_params(&x[..12]), lstm_params(&x[12..24]));
            let hs = iterative_aggregate(t, &fwd, &bwd, &x[24..]).map_err(|e| HetError::stage("bilstm", e))?;
            sum_projections(t, &hs, &r)
        }),
    )
}

fn sum_projections(t: &mut Tape, ys: &[Var], rs: &[Tensor]) -> Result<Var, HetError> {
    let mut total = project(t, ys[0], &rs[0])?;
    for (&y, r) in ys.iter().zip(rs).skip(1) {
        let term = project(t, y, r)?;
        total = t.add(total, term)?;
    }
    Ok(total)
}

fn attention_check(rng: &mut ChaCha8Rng) -> Check {
    let mut inputs = vec![rand_t(rng, &[F3]), rand_t(rng, &[F3, F2 + F3]), rand_t(rng, &[F3])];
    for _ in 0..M {
        inputs.push(rand_t(rng, &[BATCH, F2]));
    }
    let r = projections(rng, &[&[BATCH, F2], &[BATCH, M]]);
    check(
        "attention",
        "pooling",
        inputs,
        LAYER_TOLERANCE,
        Box::new(move |t, x| {
            let (pooled, coeffs) =
                attention_aggregate(t, x[0], x[1], &x[3..], x[2]).map_err(|e| HetError::stage("attention", e))?;
            sum_projections(t, &[pooled, coeffs], &r)
        }),
    )
}

fn head_check(rng: &mut ChaCha8Rng) -> Check {
    let inputs = vec![
        rand_t(rng, &[BATCH, F2]),
        rand_t(rng, &[F2, F2]),
        rand_t(rng, &[F2]),
        rand_t(rng, &[N_WAY, F2]),
        rand_t(rng, &[N_WAY]),
    ];
    let labels: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..N_WAY)).collect();
    check(
        "head",
        "logits_loss",
        inputs,
        LAYER_TOLERANCE,
        Box::new(move |t, x| {
            let head = HeadParams {
                layers: vec![
                    LinearParams {
                        weight: x[1],
                        bias: x[2],
                    },
                    LinearParams {
                        weight: x[3],
                        bias: x[4],
                    },
                ],
            };
            let logits = head_forward(t, &head, x[0])?;
            Ok(cross_entropy(t, logits, &labels)?)
        }),
    )
}

/// A random non-empty configuration vector.
fn random_config(rng: &mut ChaCha8Rng) -> ConfigVector {
    loop {
        let c: Vec<bool> = (0..M).map(|_| rng.random_bool(0.5)).collect();
        if c.iter().any(|&b| b) {
            return ConfigVector(c);
        }
    }
}

fn random_task(rng: &mut ChaCha8Rng, config: &ConfigVector, per_class: usize) -> TaskInstance {
    let draw = |rng: &mut ChaCha8Rng| -> Vec<LabeledSample> {
        (0..N_WAY)
            .flat_map(|label| (0..per_class).map(move |_| label))
            .map(|label| LabeledSample {
                modalities: DIMS
                    .iter()
                    .zip(config.as_slice())
                    .map(|(&d, &on)| (0..d).map(|_| if on { rng.random_range(-1.5..1.5) } else { 0.0 }).collect())
                    .collect(),
                label,
            })
            .collect()
    };
    let support = draw(rng);
    let query = draw(rng);
    TaskInstance {
        support,
        query,
        config: config.clone(),
        type_id: 0,
    }
}

fn hetnet() -> Network {
    Network::HetNet(Architecture::new(DIMS.to_vec(), F1, F2, F3, N_WAY))
}

fn padded_mlp() -> Network {
    Network::PaddedMlp(PaddedMlp::new(DIMS.to_vec(), vec![F1, F2], N_WAY))
}

fn network_values(network: &Network, seed: u64) -> Vec<Tensor> {
    network.init(seed).expect("valid tiny network").values()
}

fn forward_checks(rng: &mut ChaCha8Rng, seed: u64) -> Vec<Check> {
    [("hetnet", hetnet()), ("padded_mlp", padded_mlp())]
        .into_iter()
        .map(|(name, network)| {
            let config = random_config(rng);
            let task = random_task(rng, &config, 2);
            let inputs = network_values(&network, seed);
            check(
                "forward",
                name,
                inputs,
                LAYER_TOLERANCE,
                Box::new(move |t, x| {
                    let batch = task.support_batch();
                    let logits = network.forward(t, x, &batch, &task.config)?;
                    Ok(cross_entropy(t, logits, &batch.labels)?)
                }),
            )
        })
        .collect()
}

/// Gradient of the support loss with respect to the internal parameters,
/// which is the direction of every inner-loop step.
fn inner_check(rng: &mut ChaCha8Rng, seed: u64) -> Check {
    let network = hetnet();
    let params = network.init(seed).expect("valid tiny network");
    let internal = params.group_indices(Group::Internal);
    let all = params.values();
    let inputs: Vec<Tensor> = internal.iter().map(|&i| all[i].clone()).collect();
    let config = random_config(rng);
    let task = random_task(rng, &config, 2);
    check(
        "inner",
        "support_gradient",
        inputs,
        LAYER_TOLERANCE,
        Box::new(move |t, x| {
            let mut vars: Vec<Var> = all.iter().map(|v| t.constant(v.clone())).collect();
            for (&i, &v) in internal.iter().zip(x) {
                vars[i] = v;
            }
            let batch = task.support_batch();
            let logits = network.forward(t, &vars, &batch, &task.config)?;
            Ok(cross_entropy(t, logits, &batch.labels)?)
        }),
    )
}

/// Query loss after one second-order inner step, differentiated with
/// respect to the initial internal and the external parameters.
fn meta_checks(rng: &mut ChaCha8Rng, seed: u64) -> Vec<Check> {
    let cfg = TrainConfig {
        alpha: 0.5,
        inner_steps: 1,
        second_order: true,
        ..TrainConfig::default()
    };
    [("hetnet", hetnet()), ("padded_mlp", padded_mlp())]
        .into_iter()
        .map(|(name, network)| {
            let params = network.init(seed).expect("valid tiny network");
            let internal = params.group_indices(Group::Internal);
            let config = random_config(rng);
            let task = random_task(rng, &config, 2);
            let cfg = cfg.clone();
            check(
                "meta",
                name,
                params.values(),
                META_TOLERANCE,
                Box::new(move |t, x| Ok(bilevel_objective(&network, t, x, &internal, &task, &cfg)?.0)),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(only: &str) -> GradcheckOptions {
        GradcheckOptions {
            seeds: 2,
            only: vec![only.into()],
            ..GradcheckOptions::default()
        }
    }

    #[test]
    fn only_filters_to_one_suite() {
        let report = run(&quick("lstm")).unwrap();
        assert!(report.checks.iter().all(|c| c.suite == "lstm"));
        assert_eq!(report.checks.len(), 1);
        assert_eq!(report.checks[0].seeds, 2);
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(matches!(run(&quick("conv")), Err(GradcheckError::UnknownSuite(_))));
    }

    #[test]
    fn perturbed_backward_is_reported() {
        let wrong: &AnalyticGrad = &|tape, out, wrt| {
            let mut g = tape.grad_values(out, wrt)?;
            g[0].data_mut()[0] *= 1.01;
            Ok(g)
        };
        let report = run_with(&quick("linear"), wrong).unwrap();
        assert!(!report.passed());
        assert!(report.to_string().contains("FAIL linear/linear"));
    }

    #[test]
    fn zero_backward_is_reported() {
        let zero: &AnalyticGrad = &|tape, _, wrt| Ok(wrt.iter().map(|&v| Tensor::zeros(tape.shape(v))).collect());
        assert!(!run_with(&quick("attention"), zero).unwrap().passed());
    }

    #[test]
    fn every_suite_builds_checks() {
        for suite in SUITES {
            assert!(!build_suite(suite, 0).is_empty(), "{suite}");
        }
    }
}

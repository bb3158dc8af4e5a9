use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{cross_entropy, Tape, Tensor};
use crate::nn::Architecture;
use crate::tasks::{
    make_class_bank, parse_task_types, ConfigVector, HtdSpec, LabeledSample, PrototypeMode, SampleBatch, Split,
    TaskInstance, TaskSampler,
};

fn spec() -> HtdSpec {
    HtdSpec::new(vec![3, 2], parse_task_types("X1,X2,X1+X2", 2).unwrap(), 3, 2, 2).unwrap()
}

fn arch() -> Architecture {
    Architecture::new(vec![3, 2], 4, 4, 3, 3)
}

fn model(seed: u64) -> MetaModel {
    MetaModel::new(Network::HetNet(arch()), seed).unwrap()
}

fn sampler(seed: u64) -> TaskSampler {
    let bank = make_class_bank(&[3, 2], 12, 1.0, PrototypeMode::Independent, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    TaskSampler::new(spec(), bank, Split::Train, 0.3, 0.1, seed).unwrap()
}

fn tasks(seed: u64, n: usize) -> Vec<TaskInstance> {
    let mut s = sampler(seed);
    (0..n).map(|_| s.sample().unwrap()).collect()
}

fn task_of_type(seed: u64, ty: usize) -> TaskInstance {
    sampler(seed).sample_of_type(ty).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        alpha: 0.3,
        beta: 0.05,
        inner_steps: 2,
        meta_batch: 3,
        iterations: 4,
        ..TrainConfig::default()
    }
}

fn support_loss(model: &MetaModel, params: &ParamSet, task: &TaskInstance) -> f64 {
    let mut t = Tape::new();
    let vars = params.bind_constant(&mut t);
    let batch = task.support_batch();
    let logits = model.network.forward(&mut t, &vars, &batch, &task.config).unwrap();
    let loss = cross_entropy(&mut t, logits, &batch.labels).unwrap();
    t.value(loss).item()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn external_values(p: &ParamSet) -> Vec<&Tensor> {
    p.entries().iter().filter(|e| e.group == Group::External).map(|e| &e.value).collect()
}

#[test]
fn groups_partition_as_declared() {
    let m = model(0);
    for e in m.params.entries() {
        let internal = e.name.starts_with("tfan.fwd.") || e.name.starts_with("tfan.bwd.") || e.name.starts_with("head.");
        assert_eq!(e.group == Group::Internal, internal, "{}", e.name);
    }
    let mlp = MetaModel::new(Network::PaddedMlp(PaddedMlp::new(vec![3, 2], vec![4, 4], 3)), 0).unwrap();
    assert!(mlp.params.entries().iter().all(|e| e.group == Group::Internal));
}

#[test]
fn zero_parameters_give_uniform_prediction() {
    let mut m = model(0);
    m.params = m.params.with_values(m.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect());
    let task = task_of_type(1, 2);
    let mut t = Tape::new();
    let vars = m.params.bind_constant(&mut t);
    let logits = m.network.forward(&mut t, &vars, &task.query_batch(), &task.config).unwrap();
    assert!(t.value(logits).data().iter().all(|&x| x == 0.0));
}

/// Straight-line evaluation of the whole network on one sample.
fn oracle_logits(p: &ParamSet, x: &[Vec<f64>], config: &[bool]) -> Vec<f64> {
    let get = |n: &str| p.get(n).unwrap();
    let mv = |w: &Tensor, x: &[f64]| -> Vec<f64> {
        w.data().chunks(x.len()).map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    };
    let affine = |pre: &str, x: &[f64]| -> Vec<f64> {
        let y = mv(get(&format!("{pre}.weight")), x);
        y.iter().zip(get(&format!("{pre}.bias")).data()).map(|(a, b)| a + b).collect()
    };
    let tanh = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(f64::tanh).collect() };
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let f1 = get("backbone.0.l1.bias").numel();
    let z: Vec<Vec<f64>> = (0..config.len())
        .map(|m| {
            if config[m] {
                affine(&format!("backbone.{m}.l1"), &tanh(affine(&format!("backbone.{m}.l0"), &x[m])))
            } else {
                vec![0.0; f1]
            }
        })
        .collect();
    let cell = |dir: &str, z: &[f64], h: &[f64], c: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let pre = |g: &str| -> Vec<f64> {
            let a = mv(get(&format!("tfan.{dir}.W_{g}")), z);
            let b = mv(get(&format!("tfan.{dir}.U_{g}")), h);
            let bias = get(&format!("tfan.{dir}.b_{g}")).data();
            (0..bias.len()).map(|k| a[k] + b[k] + bias[k]).collect()
        };
        let (f, i, o, g) = (pre("f"), pre("i"), pre("o"), pre("c"));
        let c2: Vec<f64> = (0..f.len()).map(|k| sig(f[k]) * c[k] + sig(i[k]) * g[k].tanh()).collect();
        ((0..f.len()).map(|k| sig(o[k]) * c2[k].tanh()).collect(), c2)
    };
    let hidden = get("tfan.fwd.b_f").numel();
    let m_count = z.len();
    let mut fwd = Vec::new();
    let (mut h, mut c) = (vec![0.0; hidden], vec![0.0; hidden]);
    for zm in &z {
        (h, c) = cell("fwd", zm, &h, &c);
        fwd.push(h.clone());
    }
    let mut bwd = vec![Vec::new(); m_count];
    let (mut h, mut c) = (vec![0.0; hidden], vec![0.0; hidden]);
    for m in (0..m_count).rev() {
        (h, c) = cell("bwd", &z[m], &h, &c);
        bwd[m] = h.clone();
    }
    let hs: Vec<Vec<f64>> = (0..m_count).map(|m| [fwd[m].clone(), bwd[m].clone()].concat()).collect();
    let cv: Vec<f64> = config.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let tau = affine("tfan.embed.l1", &tanh(affine("tfan.embed.l0", &cv)));
    let v = get("tfan.attn.v").data();
    let scores: Vec<f64> = hs
        .iter()
        .map(|h| {
            let joined = [h.clone(), tau.clone()].concat();
            tanh(mv(get("tfan.attn.W_h"), &joined)).iter().zip(v).map(|(a, b)| a * b).sum()
        })
        .collect();
    let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
    let total: f64 = e.iter().sum();
    let pooled: Vec<f64> = (0..hs[0].len()).map(|k| hs.iter().zip(&e).map(|(h, a)| a / total * h[k]).sum()).collect();
    affine("head.l1", &tanh(affine("head.l0", &pooled)))
}

#[test]
fn composed_forward_matches_oracle() {
    let m = MetaModel::new(Network::HetNet(Architecture::new(vec![3, 2], 4, 4, 3, 2)), 5).unwrap();
    let x = vec![vec![0.4, -0.9, 1.2], vec![-0.3, 0.8]];
    for config in [[true, true], [true, false], [false, true]] {
        let batch = SampleBatch::from_samples(&[LabeledSample {
            modalities: x.clone(),
            label: 0,
        }]);
        let mut t = Tape::new();
        let vars = m.params.bind_constant(&mut t);
        let logits = m.network.forward(&mut t, &vars, &batch, &ConfigVector(config.to_vec())).unwrap();
        let expect = oracle_logits(&m.params, &x, &config);
        for (a, b) in t.value(logits).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-13, "{config:?}: {a} vs {b}");
        }
    }
}

#[test]
fn single_modality_model_collapses() {
    let m = MetaModel::new(Network::HetNet(Architecture::new(vec![3], 4, 4, 3, 2)), 2).unwrap();
    let x = vec![vec![0.1, 0.2, -0.7]];
    let batch = SampleBatch::from_samples(&[LabeledSample {
        modalities: x.clone(),
        label: 1,
    }]);
    let mut t = Tape::new();
    let vars = m.params.bind_constant(&mut t);
    let logits = m.network.forward(&mut t, &vars, &batch, &ConfigVector(vec![true])).unwrap();
    let expect = oracle_logits(&m.params, &x, &[true]);
    for (a, b) in t.value(logits).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn split_forward_merges_groups() {
    let m = model(3);
    let task = task_of_type(2, 2);
    let mut t = Tape::new();
    let all = m.params.bind_constant(&mut t);
    let internal: Vec<_> = m.params.group_indices(Group::Internal).into_iter().map(|i| all[i]).collect();
    let external: Vec<_> = m.params.group_indices(Group::External).into_iter().map(|i| all[i]).collect();
    let batch = task.query_batch();
    let a = forward(&m, &mut t, &internal, &external, &batch, &task.config).unwrap();
    let b = m.network.forward(&mut t, &all, &batch, &task.config).unwrap();
    assert_eq!(t.value(a), t.value(b));
    assert!(forward(&m, &mut t, &internal[1..], &external, &batch, &task.config).is_err());
}

#[test]
fn dimension_errors_name_the_stage() {
    let m = model(0);
    let mut task = task_of_type(0, 2);
    for s in &mut task.query {
        s.modalities[1].push(0.0);
    }
    let mut t = Tape::new();
    let vars = m.params.bind_constant(&mut t);
    let err = m.network.forward(&mut t, &vars, &task.query_batch(), &task.config).unwrap_err();
    assert!(err.to_string().starts_with("backbone:"), "{err}");
}

#[test]
fn zero_step_size_or_steps_keep_parameters() {
    let m = model(1);
    let task = task_of_type(3, 2);
    let mut c = cfg();
    c.alpha = 0.0;
    assert_eq!(inner_adapt(&m, &task, &c).unwrap(), m.params);
    let mut c = cfg();
    c.inner_steps = 0;
    assert_eq!(inner_adapt(&m, &task, &c).unwrap(), m.params);
}

#[test]
fn one_inner_step_follows_support_gradient() {
    let m = model(4);
    let task = task_of_type(5, 2);
    let c = TrainConfig {
        inner_steps: 1,
        ..cfg()
    };
    let adapted = inner_adapt(&m, &task, &c).unwrap();
    let h = 1e-6;
    for (k, (before, after)) in m.params.entries().iter().zip(adapted.entries()).enumerate() {
        for j in 0..before.value.numel() {
            let moved = (before.value.data()[j] - after.value.data()[j]) / c.alpha;
            let numeric = if before.group == Group::Internal {
                let shift = |d: f64| {
                    let mut p = m.params.clone();
                    p.entries_mut()[k].value.data_mut()[j] += d;
                    support_loss(&m, &p, &task)
                };
                (shift(h) - shift(-h)) / (2.0 * h)
            } else {
                0.0
            };
            assert!(rel_err(moved, numeric) < 1e-5, "{}[{j}]: {moved} vs {numeric}", before.name);
        }
    }
}

#[test]
fn second_order_meta_gradient_matches_differences() {
    let m = model(6);
    let task = task_of_type(7, 2);
    let c = TrainConfig {
        inner_steps: 1,
        alpha: 0.5,
        ..cfg()
    };
    let outcome = task_meta_gradient(&m, &task, &c).unwrap();
    let objective = |p: &ParamSet| {
        let probe = MetaModel {
            network: m.network.clone(),
            params: p.clone(),
        };
        let adapted = inner_adapt(&probe, &task, &c).unwrap();
        let mut t = Tape::new();
        let vars = adapted.bind_constant(&mut t);
        let batch = task.query_batch();
        let logits = m.network.forward(&mut t, &vars, &batch, &task.config).unwrap();
        let loss = cross_entropy(&mut t, logits, &batch.labels).unwrap();
        t.value(loss).item()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, g) in outcome.grads.iter().enumerate() {
        for j in 0..g.numel() {
            let shift = |d: f64| {
                let mut p = m.params.clone();
                p.entries_mut()[k].value.data_mut()[j] += d;
                objective(&p)
            };
            worst = worst.max(rel_err(g.data()[j], (shift(h) - shift(-h)) / (2.0 * h)));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn first_order_drops_curvature() {
    let m = model(6);
    let task = task_of_type(7, 2);
    let second = task_meta_gradient(&m, &task, &TrainConfig { inner_steps: 1, alpha: 0.5, ..cfg() }).unwrap();
    let first = task_meta_gradient(
        &m,
        &task,
        &TrainConfig {
            inner_steps: 1,
            alpha: 0.5,
            second_order: false,
            ..cfg()
        },
    )
    .unwrap();
    assert_eq!(first.query_loss, second.query_loss);
    assert_ne!(first.grads, second.grads);
}

#[test]
fn zero_inner_steps_is_joint_gradient_descent() {
    let m = model(8);
    let batch = tasks(9, 3);
    let base = TrainConfig {
        inner_steps: 0,
        ..cfg()
    };
    let mut so = m.clone();
    outer_step(&mut so, &batch, &base, &mut OptimizerState::default(), 3).unwrap();
    let mut fo = m.clone();
    let first_order = TrainConfig {
        second_order: false,
        ..base.clone()
    };
    outer_step(&mut fo, &batch, &first_order, &mut OptimizerState::default(), 3).unwrap();
    assert_eq!(so.params, fo.params);

    // Summed query-loss gradient over all parameters, taken directly.
    let mut total: Vec<Tensor> = m.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for task in &batch {
        let mut t = Tape::new();
        let vars = m.params.bind(&mut t);
        let q = task.query_batch();
        let logits = m.network.forward(&mut t, &vars, &q, &task.config).unwrap();
        let loss = cross_entropy(&mut t, logits, &q.labels).unwrap();
        for (acc, g) in total.iter_mut().zip(t.grad_values(loss, &vars).unwrap()) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for ((e, g), new) in m.params.entries().iter().zip(&total).zip(so.params.entries()) {
        for ((p, d), q) in e.value.data().iter().zip(g.data()).zip(new.value.data()) {
            assert!((p - base.beta * d - q).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_outer_rate_keeps_parameters() {
    for optimizer in [OuterOptimizer::Sgd, OuterOptimizer::Adam] {
        let mut m = model(2);
        let c = TrainConfig {
            beta: 0.0,
            optimizer,
            ..cfg()
        };
        outer_step(&mut m, &tasks(1, 3), &c, &mut OptimizerState::default(), 3).unwrap();
        assert_eq!(m.params, model(2).params);
    }
}

#[test]
fn absent_channel_gets_no_update() {
    for optimizer in [OuterOptimizer::Sgd, OuterOptimizer::Adam] {
        let mut m = model(3);
        let batch: Vec<_> = (0..3).map(|s| task_of_type(s, 1)).collect();
        let c = TrainConfig { optimizer, ..cfg() };
        let mut state = OptimizerState::default();
        for _ in 0..2 {
            outer_step(&mut m, &batch, &c, &mut state, 3).unwrap();
        }
        let before = model(3);
        for (a, b) in before.params.entries().iter().zip(m.params.entries()) {
            if a.name.starts_with("backbone.0.") {
                assert_eq!(a.value, b.value, "{}", a.name);
            } else if a.name.starts_with("backbone.1.") {
                assert_ne!(a.value, b.value, "{}", a.name);
            }
        }
    }
}

#[test]
fn absent_channel_meta_gradient_is_exactly_zero() {
    let m = model(4);
    for seed in 0..5 {
        let task = task_of_type(seed, 0);
        let out = task_meta_gradient(&m, &task, &cfg()).unwrap();
        for (e, g) in m.params.entries().iter().zip(&out.grads) {
            if e.name.starts_with("backbone.1.") {
                assert!(g.data().iter().all(|&x| x == 0.0), "{}", e.name);
            }
        }
    }
}

#[test]
fn empty_config_tasks_are_skipped() {
    let mut m = model(5);
    let mut dead = task_of_type(0, 2);
    dead.config = ConfigVector(vec![false, false]);
    let report = outer_step(&mut m, std::slice::from_ref(&dead), &cfg(), &mut OptimizerState::default(), 3).unwrap();
    assert_eq!(report.skipped, 1);
    assert!(report.metrics.mean_query_acc.is_nan());
    assert_eq!(m.params, model(5).params);

    let live = task_of_type(1, 2);
    let report = outer_step(&mut m, &[dead, live], &cfg(), &mut OptimizerState::default(), 3).unwrap();
    assert_eq!(report.skipped, 1);
    assert!(report.metrics.mean_query_acc.is_finite());
    assert!(matches!(
        outer_step(&mut m, &[], &cfg(), &mut OptimizerState::default(), 3),
        Err(HetError::EmptyBatch)
    ));
}

#[test]
fn zero_iterations_return_initialisation() {
    let mut m = model(6);
    let c = TrainConfig {
        iterations: 0,
        ..cfg()
    };
    let log = meta_train(&mut m, &mut sampler(0), &c).unwrap();
    assert!(log.iterations.is_empty());
    assert_eq!(m, model(6));
}

#[test]
fn training_is_deterministic_across_worker_counts() {
    let run = |workers| {
        let mut m = model(7);
        let c = TrainConfig { workers, ..cfg() };
        let log = meta_train(&mut m, &mut sampler(11), &c).unwrap();
        (m, log)
    };
    let (a, log_a) = run(1);
    let (b, log_b) = run(1);
    let (c, log_c) = run(4);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a, log_c);
    assert_eq!(log_a.iterations.len(), 4);
    assert_ne!(a, model(7));
}

#[test]
fn identical_tasks_adapt_identically() {
    let m = model(8);
    let task = task_of_type(4, 2);
    let copy = task.clone();
    assert_eq!(inner_adapt(&m, &task, &cfg()).unwrap(), inner_adapt(&m, &copy, &cfg()).unwrap());
}

#[test]
fn evaluation_trace_shape_and_recombination() {
    let m = model(9);
    let test = tasks(12, 30);
    let c = TrainConfig {
        inner_steps: 4,
        ..cfg()
    };
    let trace = evaluate(&m, &test, &c, 3).unwrap();
    assert_eq!(trace.steps(), 5);
    assert!(trace.tasks.iter().all(|t| t.acc.len() == 5 && t.loss.len() == 5));
    assert_eq!(trace.type_counts.iter().sum::<usize>(), 30);
    for s in 0..5 {
        let weighted: f64 = trace
            .type_acc
            .iter()
            .zip(&trace.type_counts)
            .filter_map(|(a, &n)| a.as_ref().map(|a| a[s] * n as f64))
            .sum::<f64>()
            / 30.0;
        assert!((weighted - trace.mean_acc[s]).abs() < 1e-9);
    }
    let parallel = evaluate(&m, &test, &TrainConfig { workers: 3, ..c }, 3).unwrap();
    assert_eq!(parallel, trace);
}

#[test]
fn untrained_model_is_at_chance() {
    let m = MetaModel::new(Network::HetNet(Architecture::new(vec![3, 2], 4, 4, 3, 5)), 0).unwrap();
    let s = HtdSpec::new(vec![3, 2], parse_task_types("X1,X2,X1+X2", 2).unwrap(), 5, 1, 6).unwrap();
    let bank = make_class_bank(&[3, 2], 40, 1.0, PrototypeMode::Independent, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut sampler = TaskSampler::new(s, bank, Split::Test, 0.3, 0.1, 1).unwrap();
    let test: Vec<_> = (0..200).map(|_| sampler.sample().unwrap()).collect();
    let trace = evaluate(&m, &test, &TrainConfig { inner_steps: 0, ..cfg() }, 3).unwrap();
    assert!((trace.mean_acc[0] - 0.2).abs() < 0.06, "{}", trace.mean_acc[0]);
}

#[test]
fn padding_and_summing() {
    let p = PaddedMlp::new(vec![3, 2], vec![4], 2);
    let big = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
    let small = Tensor::matrix(1, 2, vec![5.0, 7.0]).unwrap();
    let zeros = |d| Tensor::zeros(&[1, d]);
    assert_eq!(p.homogenize(&[big.clone(), zeros(2)]).unwrap(), big);
    assert_eq!(p.homogenize(&[zeros(3), small.clone()]).unwrap().data(), &[5.0, 7.0, 0.0]);
    assert_eq!(p.homogenize(&[big, small]).unwrap().data(), &[6.0, 9.0, 3.0]);
    assert!(p.homogenize(&[zeros(2), zeros(2)]).is_err());
}

#[test]
fn padded_baseline_adapts_every_parameter() {
    let m = MetaModel::new(Network::PaddedMlp(PaddedMlp::new(vec![3, 2], vec![4, 4], 3)), 1).unwrap();
    let adapted = inner_adapt(&m, &task_of_type(0, 2), &cfg()).unwrap();
    for (a, b) in m.params.entries().iter().zip(adapted.entries()) {
        assert_ne!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn bf_ensemble_is_disjoint_and_larger() {
    let types = spec().task_types;
    let pair = multi_maml_bf_models(&arch(), &types[..2], 0).unwrap();
    assert_eq!(pair.models.len(), 2);
    assert!(pair.models[0].params.get("backbone.1.l0.weight").is_none());
    assert!(pair.models[1].params.get("backbone.0.l0.weight").is_none());
    let full = multi_maml_bf_models(&arch(), &types, 0).unwrap();
    assert!(full.param_count() > model(0).params.count());
}

#[test]
fn bf_models_only_see_their_own_type() {
    let mut ensemble = multi_maml_bf_models(&arch(), &spec().task_types, 0).unwrap();
    let mut mixed: Vec<Box<dyn TaskSource>> = (0..3).map(|s| Box::new(sampler(s)) as Box<dyn TaskSource>).collect();
    let mut streams: Vec<&mut dyn TaskSource> = mixed.iter_mut().map(|s| &mut **s as &mut dyn TaskSource).collect();
    assert!(multi_maml_bf_train(&mut ensemble, &mut streams, &[4, 4, 4], &cfg()).is_err());

    let mut typed: Vec<TypedSampler> = (0..3).map(|r| TypedSampler::new(sampler(r as u64), r)).collect();
    let mut streams: Vec<&mut dyn TaskSource> = typed.iter_mut().map(|s| s as &mut dyn TaskSource).collect();
    let log = multi_maml_bf_train(&mut ensemble, &mut streams, &[3, 1, 2], &cfg()).unwrap();
    assert_eq!(log.iterations.len(), 3);
    assert!(log.iterations[0].type_acc.iter().all(Option::is_some));
    assert!(log.iterations[2].type_acc[1].is_none());
}

#[test]
fn iteration_budget_split() {
    assert_eq!(split_iterations(9, &[1.0 / 3.0; 3]), [3, 3, 3]);
    assert_eq!(split_iterations(10, &[0.5, 0.25, 0.25]), [5, 3, 3]);
}

#[test]
fn dataset_source_filters_by_type() {
    let all = Arc::new(tasks(3, 20));
    let mut only = DatasetSource::of_type(all.clone(), 1, 3, 0).unwrap();
    for _ in 0..10 {
        assert_eq!(only.next_task().unwrap().type_id, 1);
    }
    let none = Arc::new(all.iter().filter(|t| t.type_id != 1).cloned().collect::<Vec<_>>());
    assert!(DatasetSource::of_type(none, 1, 3, 0).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig { meta_batch: 0, ..cfg() }.validate().is_err());
    assert!(TrainConfig { alpha: -1.0, ..cfg() }.validate().is_err());
    assert!(TrainConfig { workers: 0, ..cfg() }.validate().is_err());
    assert!(cfg().validate().is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn inner_loop_freezes_external_parameters(seed in 0u64..1000, ty in 0usize..3) {
        let m = model(seed);
        let adapted = inner_adapt(&m, &task_of_type(seed, ty), &cfg()).unwrap();
        prop_assert_eq!(external_values(&m.params), external_values(&adapted));
    }
}

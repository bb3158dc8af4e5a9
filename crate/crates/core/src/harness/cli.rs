use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::gradcheck::{self, GradcheckOptions};
use crate::tasks::{save_meta_dataset, type_label, Split, TaskSampler};

use super::config::{ExperimentConfig, ModelKind};
use super::experiment::{
    derive_seed, prepare_data, synthetic_parts, train, write_curve_csv, write_metrics_csv, Stream, TrainedModel,
    META_TEST_DIR, META_TRAIN_DIR,
};
use super::{load_checkpoint, save_checkpoint, HarnessError};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.hmck";
pub const CONFIG_FILE: &str = "config.json";
pub const CURVE_FILE: &str = "adaptation_curve.csv";

/// Meta-learning over heterogeneous multimodal few-shot tasks.
#[derive(Debug, Parser)]
#[command(name = "hetmeta", version)]
pub struct Cli {
    /// JSON experiment configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic meta-train/meta-test feature dataset.
    GenData(GenDataArgs),
    /// Meta-train a model; writes metrics.csv, checkpoint.hmck and config.json.
    Train(TrainArgs),
    /// Adapt a checkpoint on meta-test tasks; writes adaptation_curve.csv.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub modalities: Option<usize>,
    /// Feature dimension per modality, e.g. `16,12`.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Task types, e.g. `X1,X2,X1+X2`.
    #[arg(long)]
    pub types: Option<String>,
    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub k_query: Option<usize>,
    /// Meta-train tasks.
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Meta-test tasks.
    #[arg(long)]
    pub test_tasks: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Directory written by `gen-data`; episodes are generated on the fly otherwise.
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Worker threads for the tasks of a meta-batch. Results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub meta_batch: Option<usize>,
    /// Drop second-order terms from the meta-gradient.
    #[arg(long)]
    pub first_order: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Defaults to `<out>/checkpoint.hmck`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated suites to run.
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    #[arg(long)]
    pub seeds: Option<usize>,
}

/// Runs one parsed command line, printing a short summary to stdout.
pub fn run_cli(cli: Cli) -> Result<(), HarnessError> {
    if let Command::Gradcheck(args) = &cli.command {
        return cmd_gradcheck(args);
    }
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(cfg, args),
        Command::Train(args) => cmd_train(cfg, args),
        Command::Eval(args) => cmd_eval(cfg, args),
        Command::Gradcheck(_) => unreachable!(),
    }
}

fn apply_model_args(cfg: &mut ExperimentConfig, args: &ModelArgs) {
    if let Some(m) = args.model {
        cfg.model = m;
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = Some(d.clone());
        cfg.synthetic = None;
    }
    if let Some(v) = args.inner_steps {
        cfg.train.inner_steps = v;
    }
    if let Some(v) = args.alpha {
        cfg.train.alpha = v;
    }
    if let Some(v) = args.workers {
        cfg.train.workers = v;
    }
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn cmd_gen_data(mut cfg: ExperimentConfig, args: &GenDataArgs) -> Result<(), HarnessError> {
    if cfg.dataset.is_some() {
        return Err(HarnessError::Config("gen-data needs synthetic parameters, not a dataset path".into()));
    }
    let mut syn = cfg.synthetic.clone().unwrap_or_default();
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(syn.classes, args.classes);
    set!(syn.tasks, args.tasks);
    set!(syn.test_tasks, args.test_tasks);
    set!(syn.separation, args.separation);
    set!(syn.noise, args.noise);
    set!(cfg.htd.modality_dims, args.dims);
    set!(cfg.htd.task_types, args.types);
    set!(cfg.htd.n_way, args.n_way);
    set!(cfg.htd.k_shot, args.k_shot);
    set!(cfg.htd.k_query, args.k_query);
    if let Some(m) = args.modalities {
        if m != cfg.htd.modality_dims.len() {
            return Err(HarnessError::Usage(format!(
                "--modalities {m} disagrees with {} modality dims {:?}; pass --dims",
                cfg.htd.modality_dims.len(),
                cfg.htd.modality_dims
            )));
        }
    }
    cfg.synthetic = Some(syn.clone());
    let cfg = cfg.resolve()?;
    let spec = cfg.htd.spec()?;

    let (bank, test) = synthetic_parts(&cfg, &spec)?;
    let mut sampler = TaskSampler::new(
        spec.clone(),
        bank.clone(),
        Split::Train,
        syn.noise,
        cfg.htd.epsilon,
        derive_seed(cfg.train.seed, Stream::MetaTrain),
    )?;
    let train_tasks = (0..syn.tasks).map(|_| sampler.sample()).collect::<Result<Vec<_>, _>>()?;
    create_dir(&cfg.out)?;
    save_meta_dataset(&cfg.out.join(META_TRAIN_DIR), &spec, &train_tasks)?;
    save_meta_dataset(&cfg.out.join(META_TEST_DIR), &spec, &test)?;

    let types: Vec<String> = spec.task_types.iter().map(type_label).collect();
    println!(
        "classes {}/{} (meta-train/meta-test), task types {}",
        bank.classes(Split::Train).len(),
        bank.classes(Split::Test).len(),
        types.join(",")
    );
    println!(
        "wrote {} meta-train and {} meta-test tasks to {}",
        train_tasks.len(),
        test.len(),
        cfg.out.display()
    );
    Ok(())
}

fn cmd_train(mut cfg: ExperimentConfig, args: &TrainArgs) -> Result<(), HarnessError> {
    apply_model_args(&mut cfg, &args.model);
    if let Some(v) = args.iterations {
        cfg.train.iterations = v;
    }
    if let Some(v) = args.beta {
        cfg.train.beta = v;
    }
    if let Some(v) = args.meta_batch {
        cfg.train.meta_batch = v;
    }
    if args.first_order {
        cfg.train.second_order = false;
    }
    let mut cfg = cfg.resolve()?;
    let data = prepare_data(&mut cfg)?;
    let (model, log) = train(&cfg, &data)?;

    create_dir(&cfg.out)?;
    let metrics = cfg.out.join(METRICS_FILE);
    write_metrics_csv(&metrics, &log, data.spec.n_types())?;
    save_checkpoint(&cfg.out.join(CHECKPOINT_FILE), &model.params())?;
    let config_path = cfg.out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_json() + "\n").map_err(|e| HarnessError::io(&config_path, e))?;

    println!(
        "trained {} for {} iterations ({} parameters)",
        cfg.model.name(),
        cfg.train.iterations,
        model.param_count()
    );
    if let Some(last) = log.iterations.last() {
        println!(
            "last iteration: query loss {:.4}, query acc {:.4}",
            last.mean_query_loss, last.mean_query_acc
        );
    }
    if log.skipped_tasks > 0 {
        println!("skipped {} tasks with no present modality", log.skipped_tasks);
    }
    println!("wrote {}", cfg.out.display());
    Ok(())
}

fn cmd_eval(mut cfg: ExperimentConfig, args: &EvalArgs) -> Result<(), HarnessError> {
    apply_model_args(&mut cfg, &args.model);
    let mut cfg = cfg.resolve()?;
    let data = prepare_data(&mut cfg)?;
    let path = args.checkpoint.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
    let mut model = TrainedModel::init(&cfg, &data.spec)?;
    model.load(&load_checkpoint(&path)?)?;
    let trace = model.evaluate(&data.test, &cfg.train, data.spec.n_types())?;

    create_dir(&cfg.out)?;
    write_curve_csv(&cfg.out.join(CURVE_FILE), &trace)?;
    let first = trace.mean_acc.first().copied().unwrap_or(f64::NAN);
    println!(
        "{} meta-test tasks: accuracy {:.4} at step 0, {:.4} after {} steps",
        trace.tasks.len(),
        first,
        trace.final_acc(),
        trace.steps().saturating_sub(1)
    );
    for (k, ty) in data.spec.task_types.iter().enumerate() {
        if let Some(acc) = trace.final_type_acc(k) {
            println!("  {:<12} {:.4} ({} tasks)", type_label(ty), acc, trace.type_counts[k]);
        }
    }
    println!("wrote {}", cfg.out.join(CURVE_FILE).display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), HarnessError> {
    let mut options = GradcheckOptions {
        only: args.only.clone(),
        ..GradcheckOptions::default()
    };
    if let Some(s) = args.seeds {
        options.seeds = s;
    }
    let report = gradcheck::run(&options)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(HarnessError::CheckFailed(format!(
            "{} gradient checks failed",
            report.failures().count()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_anywhere() {
        let cli = Cli::try_parse_from([
            "hetmeta", "train", "--seed", "3", "--model", "multi-maml-bf", "--first-order", "--workers", "2",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(3));
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.model.model, Some(ModelKind::MultiMamlBf));
        assert!(t.first_order);
        assert_eq!(t.model.workers, Some(2));
    }

    #[test]
    fn only_splits_on_commas() {
        let cli = Cli::try_parse_from(["hetmeta", "gradcheck", "--only", "lstm,meta"]).unwrap();
        let Command::Gradcheck(g) = cli.command else { panic!() };
        assert_eq!(g.only, ["lstm", "meta"]);
    }

    #[test]
    fn unknown_model_is_a_usage_error() {
        assert!(Cli::try_parse_from(["hetmeta", "train", "--model", "nope"]).is_err());
    }

    #[test]
    fn modalities_must_match_dims() {
        let cli = Cli::try_parse_from(["hetmeta", "gen-data", "--modalities", "3", "--out", "/nonexistent/x"]).unwrap();
        let err = run_cli(cli).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn single_type_rejected_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        let cli =
            Cli::try_parse_from(["hetmeta", "gen-data", "--types", "X1", "--out", out.to_str().unwrap()]).unwrap();
        let err = run_cli(cli).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(!out.exists());
    }

}

//! `fog-appo` command line: dataset generation, training, evaluation, the
//! exhaustive oracle and experiment specs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fog_appo::actor::{evaluate, EvalMode};
use fog_appo::dag::ServiceDag;
use fog_appo::env::ScenarioConfig;
use fog_appo::harness::{run_experiment, ExperimentSpec, SEED_ENV};
use fog_appo::learner::{Learner, LearnerCheckpoint};
use fog_appo::nn::{Mlp, MlpCheckpoint};
use fog_appo::oracle::{exhaustive_best, run_baseline, Baseline, OracleConfig};
use fog_appo::train::{run_training, run_training_from, RunConfig, TrainingInputs};
use fog_appo::workload::{build_dataset, load_dataset, read_json, DatasetSpec};

#[derive(Parser)]
#[command(name = "fog-appo", version, about = "DAG service offloading in a simulated fog environment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a dataset spec JSON.
    Gen {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a policy or a baseline on the eval split.
    Eval(EvalArgs),
    /// Solve one DAG exactly and print the result as JSON.
    Oracle {
        dag: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 10_000_000)]
        budget: u64,
    },
    /// Run an experiment spec; exits non-zero if any of its checks fail.
    Experiment {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        gnuplot: bool,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario JSON; defaults to the 51-server template.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Use the template scaled to this many servers instead.
    #[arg(long, conflicts_with = "scenario")]
    servers: Option<usize>,
    #[arg(long, default_value_t = 0)]
    scenario_seed: u64,
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig> {
        Ok(match (&self.scenario, self.servers) {
            (Some(p), _) => read_json(p).with_context(|| format!("reading scenario {}", p.display()))?,
            (None, Some(m)) => ScenarioConfig::scaled(m, self.scenario_seed),
            (None, None) => ScenarioConfig::standard(self.scenario_seed),
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Base run configuration JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    actors: Option<usize>,
    /// Experience batch length N.
    #[arg(long)]
    rollout: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    serial: bool,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Resume from a learner checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Hidden width of both networks.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    train_log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Random,
    Greedy,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Policy checkpoint (policy.json or a learner checkpoint).
    #[arg(long, required_unless_present = "baseline")]
    policy: Option<PathBuf>,
    #[arg(long, conflicts_with = "policy")]
    baseline: Option<BaselineArg>,
    #[arg(long, value_enum, default_value = "greedy")]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn services(dags: Vec<ServiceDag>) -> Vec<Arc<ServiceDag>> {
    dags.into_iter().map(Arc::new).collect()
}

fn load_policy(path: &Path) -> Result<Mlp> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(c) = serde_json::from_str::<LearnerCheckpoint>(&text) {
        return Ok(Mlp::from_checkpoint(&c.policy)?);
    }
    let c: MlpCheckpoint = serde_json::from_str(&text).context("not a policy checkpoint")?;
    Ok(Mlp::from_checkpoint(&c)?)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.actors {
        cfg.actors = v;
    }
    if let Some(v) = a.rollout {
        cfg.hyper.rollout_len = v;
    }
    if let Some(v) = a.steps {
        cfg.total_steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v.trim().parse().with_context(|| format!("{SEED_ENV}={v}"))?;
    }
    cfg.serial |= a.serial;
    if a.checkpoint_dir.is_some() {
        cfg.checkpoint_dir = a.checkpoint_dir;
    }
    if a.checkpoint_every.is_some() {
        cfg.checkpoint_every = a.checkpoint_every;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if a.eval_limit.is_some() {
        cfg.eval_limit = a.eval_limit;
    }
    if let Some(h) = a.hidden {
        cfg.hidden = h;
    }
    if a.metrics.is_some() {
        cfg.metrics_path = a.metrics;
    }
    if a.train_log.is_some() {
        cfg.train_log_path = a.train_log;
    }
    let scenario = a.scenario.load()?;
    let ds = load_dataset(&a.dataset)?;
    let inputs = TrainingInputs {
        train: Arc::new(services(ds.train)),
        eval: services(ds.eval),
        pool: Arc::new(scenario.build_pool()?),
        env: scenario.env_config(),
    };
    let report = match &a.resume {
        Some(p) => {
            let c: LearnerCheckpoint = read_json(p)?;
            let mut learner = Learner::from_checkpoint(&c)?;
            learner.hyper = cfg.hyper;
            run_training_from(&cfg, &inputs, learner)?
        }
        None => run_training(&cfg, &inputs)?,
    };
    let summary = serde_json::json!({
        "version": report.learner.version,
        "env_steps": report.env_steps,
        "collection_time_s": report.collection_time_s,
        "wall_time_s": report.wall_time_s,
        "final_eval": report.final_eval,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let scenario = a.scenario.load()?;
    let ds = load_dataset(&a.dataset)?;
    let eval = services(ds.eval);
    let pool = Arc::new(scenario.build_pool()?);
    let stats = match (a.baseline, &a.policy) {
        (Some(b), _) => {
            let b = match b {
                BaselineArg::Random => Baseline::Random,
                BaselineArg::Greedy => Baseline::Greedy,
            };
            run_baseline(b, &eval, pool, scenario.env_config(), a.seed)?
        }
        (None, Some(p)) => {
            let policy = load_policy(p)?;
            let mode = match a.mode {
                Mode::Greedy => EvalMode::Greedy,
                Mode::Sample => EvalMode::Sample,
            };
            evaluate(&policy, &eval, pool, scenario.env_config(), mode, a.seed)?
        }
        (None, None) => bail!("need --policy or --baseline"),
    };
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn run() -> Result<bool> {
    match Cli::parse().command {
        Command::Gen { spec, out } => {
            let spec: DatasetSpec = read_json(&spec)?;
            let ds = build_dataset(&spec, &out)?;
            log::info!("wrote {} train and {} eval services", ds.train.len(), ds.eval.len());
            println!("{}", out.join("manifest.json").display());
        }
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Oracle { dag, scenario, budget } => {
            let dag: ServiceDag = read_json(&dag)?;
            let pool = scenario.load()?.build_pool()?;
            let r = exhaustive_best(&dag, &pool, &OracleConfig { budget, prune: true })?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Experiment { spec, out, gnuplot } => {
            let mut spec: ExperimentSpec = read_json(&spec)?;
            spec.apply_env_seed()?;
            if out.is_some() {
                spec.out_dir = out;
            }
            spec.gnuplot |= gnuplot;
            let outcome = run_experiment(&spec)?;
            for c in &outcome.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(outcome.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

//! Experiment driver: convergence curves, system-size sweeps, actor speedup,
//! decision-time overhead and optimality gap, written as CSV.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{sample_action, ActorError};
use crate::dag::ServiceDag;
use crate::env::{EnvError, FogEnv, ScenarioConfig, ServerPool};
use crate::nn::{Mlp, MlpCheckpoint};
use crate::oracle::{exhaustive_best, run_baseline, Baseline, OracleConfig, OracleError};
use crate::train::{run_training, RunConfig, TrainError, TrainingInputs};
use crate::workload::{generate_dataset, read_json, stream_rng, DatasetSpec, WorkloadError};

/// Environment variable that overrides the seed of any experiment spec.
pub const SEED_ENV: &str = "FOG_APPO_SEED";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("times must be positive, got reference {time_r} s and candidate {time_t} s")]
    NonPositiveTime { time_r: f64, time_t: f64 },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentKind {
    Convergence,
    SystemSize {
        #[serde(default = "default_server_counts")]
        server_counts: Vec<usize>,
    },
    Speedup {
        #[serde(default = "default_actor_counts")]
        actor_counts: Vec<usize>,
        #[serde(default = "default_speedup_steps")]
        steps: u64,
    },
    Dto {
        #[serde(default = "default_dto_tasks")]
        task_counts: Vec<usize>,
        #[serde(default = "default_dto_servers")]
        server_counts: Vec<usize>,
        #[serde(default = "default_dto_services")]
        services: usize,
        /// Policy checkpoint; a freshly initialised network is timed when absent.
        #[serde(default)]
        policy: Option<PathBuf>,
    },
    Optimality {
        #[serde(default = "default_opt_servers")]
        servers: usize,
        #[serde(default = "default_opt_rounds")]
        rounds: u64,
        #[serde(default = "default_opt_instances")]
        instances: usize,
    },
}

fn default_server_counts() -> Vec<usize> {
    vec![25, 50, 75, 100]
}
fn default_actor_counts() -> Vec<usize> {
    vec![1, 2, 4]
}
fn default_speedup_steps() -> u64 {
    150_000
}
fn default_dto_tasks() -> Vec<usize> {
    vec![20, 40]
}
fn default_dto_servers() -> Vec<usize> {
    vec![25, 100]
}
fn default_dto_services() -> usize {
    100
}
fn default_opt_servers() -> usize {
    4
}
fn default_opt_rounds() -> u64 {
    50
}
fn default_opt_instances() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(flatten)]
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Defaults depend on the experiment kind; see [`ExperimentSpec::dataset_for`].
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub scenario: Option<ScenarioConfig>,
    #[serde(default)]
    pub run: Option<RunConfig>,
    #[serde(default)]
    pub gnuplot: bool,
}

/// Desk-scale leave-one-L-out dataset: 10 topologies x 10 weightings, L=15 held out.
pub fn desk_dataset(seed: u64) -> DatasetSpec {
    DatasetSpec {
        task_counts: vec![10, 15, 20, 25, 30],
        fats: vec![0.4, 0.8],
        densities: vec![0.6],
        topologies_per_point: 1,
        weightings_per_topology: 10,
        train_fraction: 0.8,
        ranges: Default::default(),
        seed,
        holdout_tasks: Some(15),
    }
}

/// Small services the exhaustive oracle can solve: L in 3..=6.
pub fn small_dataset(seed: u64) -> DatasetSpec {
    DatasetSpec {
        task_counts: vec![3, 4, 5, 6],
        fats: vec![0.5, 0.8],
        densities: vec![0.5, 0.8],
        topologies_per_point: 2,
        weightings_per_topology: 8,
        train_fraction: 0.8,
        ranges: Default::default(),
        seed,
        holdout_tasks: None,
    }
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, seed: u64) -> Self {
        ExperimentSpec {
            kind,
            seed,
            out_dir: None,
            dataset: None,
            scenario: None,
            run: None,
            gnuplot: false,
        }
    }

    /// Replaces the seed with `FOG_APPO_SEED` when it is set.
    pub fn apply_env_seed(&mut self) -> Result<(), HarnessError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Invalid(format!("{SEED_ENV}={v} is not an integer")))?;
        }
        Ok(())
    }

    pub fn dataset_for(&self) -> DatasetSpec {
        let mut d = self.dataset.clone().unwrap_or_else(|| match self.kind {
            ExperimentKind::Optimality { .. } => small_dataset(self.seed),
            _ => desk_dataset(self.seed),
        });
        d.seed = self.seed;
        d
    }

    pub fn scenario_for(&self, servers: Option<usize>) -> ScenarioConfig {
        let mut s = match (servers, &self.scenario) {
            (Some(m), _) => ScenarioConfig::scaled(m, self.seed),
            (None, Some(s)) => s.clone(),
            (None, None) => ScenarioConfig::standard(self.seed),
        };
        s.seed = self.seed;
        s
    }

    pub fn run_for(&self) -> RunConfig {
        let mut r = self.run.clone().unwrap_or_else(|| RunConfig {
            total_steps: 200 * 512,
            serial: true,
            ..RunConfig::default()
        });
        r.seed = self.seed;
        r
    }
}

/// One CSV line. Columns that do not apply to an experiment are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub variant: String,
    pub version: u64,
    pub env_steps: u64,
    pub wall_time: f64,
    pub eval_mean_exec_time_s: Option<f64>,
    pub deadline_hit_rate: Option<f64>,
    pub speedup: Option<f64>,
    pub dto_ms: Option<f64>,
    pub oracle_mean_exec_time_s: Option<f64>,
    pub gap_pct: Option<f64>,
}

impl ResultRow {
    fn new(experiment: &str, variant: impl Into<String>) -> Self {
        ResultRow {
            experiment: experiment.to_string(),
            variant: variant.into(),
            version: 0,
            env_steps: 0,
            wall_time: 0.0,
            eval_mean_exec_time_s: None,
            deadline_hit_rate: None,
            speedup: None,
            dto_ms: None,
            oracle_mean_exec_time_s: None,
            gap_pct: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub checks: Vec<Check>,
}

impl ExperimentOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn compute_speedup(time_r: f64, time_t: f64) -> Result<f64, HarnessError> {
    if !(time_r > 0.0 && time_t > 0.0) {
        return Err(HarnessError::NonPositiveTime { time_r, time_t });
    }
    Ok(time_r / time_t)
}

/// Mean milliseconds per service to pre-schedule and place every task greedily.
pub fn measure_dto(
    policy: &Mlp,
    services: &[Arc<ServiceDag>],
    pool: Arc<ServerPool>,
    scenario: &ScenarioConfig,
    seed: u64,
) -> Result<f64, HarnessError> {
    if services.is_empty() {
        return Err(HarnessError::Invalid("no services to time".into()));
    }
    let cfg = scenario.env_config();
    let mut env = FogEnv::new(pool, cfg);
    let mut rng = stream_rng(seed, 0xd70);
    let start = Instant::now();
    for svc in services {
        let mut state = env.reset(Arc::clone(svc))?;
        loop {
            let mask = if cfg.mask_infeasible {
                Some(env.action_mask()?)
            } else {
                None
            };
            let (a, _) = sample_action(policy, &state.0, mask.as_deref(), &mut rng, true)
                .map_err(ActorError::from)?;
            let out = env.step(a)?;
            if out.done {
                break;
            }
            state = out.next_state;
        }
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / services.len() as f64)
}

struct Prepared {
    inputs: TrainingInputs,
}

fn prepare(dataset: &DatasetSpec, scenario: &ScenarioConfig) -> Result<Prepared, HarnessError> {
    let ds = generate_dataset(dataset)?;
    let pool = Arc::new(scenario.build_pool()?);
    Ok(Prepared {
        inputs: TrainingInputs {
            train: Arc::new(ds.train.into_iter().map(Arc::new).collect()),
            eval: ds.eval.into_iter().map(Arc::new).collect(),
            pool,
            env: scenario.env_config(),
        },
    })
}

fn curve_rows(experiment: &str, variant: &str, report: &crate::train::TrainingReport) -> Vec<ResultRow> {
    report
        .metrics
        .iter()
        .map(|m| ResultRow {
            version: m.version,
            env_steps: m.env_steps,
            wall_time: m.wall_time,
            eval_mean_exec_time_s: Some(m.eval_mean_exec_time_s),
            deadline_hit_rate: Some(m.deadline_hit_rate),
            ..ResultRow::new(experiment, variant)
        })
        .collect()
}

/// Trains once and records the greedy eval curve; L held out per the dataset spec.
pub fn run_convergence(spec: &ExperimentSpec) -> Result<ExperimentOutcome, HarnessError> {
    let p = prepare(&spec.dataset_for(), &spec.scenario_for(None))?;
    let run = spec.run_for();
    let random = run_baseline(
        Baseline::Random,
        eval_subset(&p.inputs.eval, run.eval_limit),
        Arc::clone(&p.inputs.pool),
        p.inputs.env,
        spec.seed,
    )?;
    let report = run_training(&run, &p.inputs)?;
    let mut rows = curve_rows("convergence", "appo", &report);
    rows.push(ResultRow {
        eval_mean_exec_time_s: Some(random.mean_exec_time_s),
        deadline_hit_rate: Some(random.deadline_hit_rate),
        ..ResultRow::new("convergence", "random")
    });
    let first = &report.metrics[0];
    let last = report.metrics.last().expect("final evaluation");
    let checks = vec![
        Check::new(
            "untrained policy matches random",
            (first.eval_mean_exec_time_s - random.mean_exec_time_s).abs() <= 0.05 * random.mean_exec_time_s,
            format!("{:.5} s vs random {:.5} s", first.eval_mean_exec_time_s, random.mean_exec_time_s),
        ),
        Check::new(
            "final mean execution time <= 70% of round 0",
            last.eval_mean_exec_time_s <= 0.7 * first.eval_mean_exec_time_s,
            format!(
                "{:.5} s -> {:.5} s ({:.1}%)",
                first.eval_mean_exec_time_s,
                last.eval_mean_exec_time_s,
                100.0 * last.eval_mean_exec_time_s / first.eval_mean_exec_time_s
            ),
        ),
        Check::new(
            "deadline hit rate increases",
            last.deadline_hit_rate > first.deadline_hit_rate,
            format!("{:.4} -> {:.4}", first.deadline_hit_rate, last.deadline_hit_rate),
        ),
    ];
    Ok(ExperimentOutcome { rows, checks })
}

fn eval_subset(eval: &[Arc<ServiceDag>], limit: Option<usize>) -> &[Arc<ServiceDag>] {
    &eval[..limit.map_or(eval.len(), |k| k.min(eval.len()))]
}

pub fn run_system_size(spec: &ExperimentSpec, server_counts: &[usize]) -> Result<ExperimentOutcome, HarnessError> {
    let dataset = spec.dataset_for();
    let mut out = ExperimentOutcome::default();
    for &m in server_counts {
        let p = prepare(&dataset, &spec.scenario_for(Some(m)))?;
        let report = run_training(&spec.run_for(), &p.inputs)?;
        let first = report.metrics[0];
        let last = *report.metrics.last().expect("final evaluation");
        out.rows.extend(curve_rows("system_size", &format!("M={m}"), &report));
        out.checks.push(Check::new(
            &format!("M={m}: final <= round 0"),
            last.eval_mean_exec_time_s <= first.eval_mean_exec_time_s,
            format!("{:.5} s -> {:.5} s", first.eval_mean_exec_time_s, last.eval_mean_exec_time_s),
        ));
    }
    Ok(out)
}

/// Collection wall time for each actor count, relative to the first entry.
pub fn run_speedup(spec: &ExperimentSpec, actor_counts: &[usize], steps: u64) -> Result<ExperimentOutcome, HarnessError> {
    if actor_counts.first() != Some(&1) {
        return Err(HarnessError::Invalid("speedup needs A=1 first as reference".into()));
    }
    let p = prepare(&spec.dataset_for(), &spec.scenario_for(None))?;
    let mut out = ExperimentOutcome::default();
    let mut time_r = None;
    let mut sp = Vec::new();
    for &a in actor_counts {
        let run = RunConfig {
            actors: a,
            total_steps: steps,
            serial: false,
            eval_every: 0,
            eval_limit: Some(1),
            ..spec.run_for()
        };
        let report = run_training(&run, &p.inputs)?;
        let t = report.collection_time_s;
        let r = *time_r.get_or_insert(t);
        let s = compute_speedup(r, t)?;
        log::info!("A={a}: {:.2} s for {} steps, SP {:.2}", t, report.env_steps, s);
        out.rows.push(ResultRow {
            version: report.learner.version,
            env_steps: report.env_steps,
            wall_time: t,
            speedup: Some(s),
            ..ResultRow::new("speedup", format!("A={a}"))
        });
        sp.push((a, s));
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    for w in sp.windows(2) {
        out.checks.push(Check::new(
            &format!("SP(A={}) > SP(A={})", w[1].0, w[0].0),
            w[1].1 > w[0].1,
            format!("{:.3} vs {:.3} with {cores} host core(s)", w[1].1, w[0].1),
        ));
    }
    if let Some(&(_, s4)) = sp.iter().find(|(a, _)| *a == 4) {
        out.checks.push(Check::new(
            "SP(A=4) >= 2.5",
            s4 >= 2.5,
            format!("{s4:.3} with {cores} host core(s)"),
        ));
    }
    Ok(out)
}

pub fn run_dto(
    spec: &ExperimentSpec,
    task_counts: &[usize],
    server_counts: &[usize],
    services: usize,
    policy: Option<&Path>,
) -> Result<ExperimentOutcome, HarnessError> {
    let mut out = ExperimentOutcome::default();
    let mut grid = Vec::new();
    let loaded = match policy {
        Some(p) => Some(Mlp::from_checkpoint(&read_json::<MlpCheckpoint>(p)?).map_err(ActorError::from)?),
        None => None,
    };
    for &m in server_counts {
        let scenario = spec.scenario_for(Some(m));
        let pool = Arc::new(scenario.build_pool()?);
        let net = match &loaded {
            Some(n) if n.input_size() == crate::env::state_len(pool.len()) => n.clone(),
            Some(_) => return Err(HarnessError::Invalid(format!("policy does not fit M={m}"))),
            None => {
                let mut rng = stream_rng(spec.seed, 0xd70_0000 + m as u64);
                Mlp::init(crate::env::state_len(pool.len()), spec.run_for().hidden, pool.len(), &mut rng)
            }
        };
        for &l in task_counts {
            let ds = generate_dataset(&DatasetSpec {
                task_counts: vec![l],
                fats: vec![0.4, 0.6, 0.8],
                densities: vec![0.4, 0.6, 0.8],
                topologies_per_point: 1,
                weightings_per_topology: services.div_ceil(9).max(1),
                train_fraction: 0.5,
                ranges: Default::default(),
                seed: spec.seed,
                holdout_tasks: None,
            })?;
            let svcs: Vec<Arc<ServiceDag>> = ds.train.into_iter().chain(ds.eval).take(services).map(Arc::new).collect();
            // One untimed pass to warm caches.
            measure_dto(&net, &svcs[..svcs.len().min(5)], Arc::clone(&pool), &scenario, spec.seed)?;
            let ms = measure_dto(&net, &svcs, Arc::clone(&pool), &scenario, spec.seed)?;
            out.rows.push(ResultRow {
                dto_ms: Some(ms),
                ..ResultRow::new("dto", format!("M={m},L={l}"))
            });
            grid.push((m, l, ms));
        }
    }
    let get = |m: usize, l: usize| grid.iter().find(|g| g.0 == m && g.1 == l).map(|g| g.2);
    if let (Some(&m), true) = (server_counts.first(), task_counts.contains(&20) && task_counts.contains(&40)) {
        let r = get(m, 40).unwrap() / get(m, 20).unwrap();
        out.checks.push(Check::new(
            "DTO(L=40)/DTO(L=20) in [1.6, 2.4]",
            (1.6..=2.4).contains(&r),
            format!("ratio {r:.3} at M={m}"),
        ));
    }
    if let (Some(&l), Some(&lo), Some(&hi)) = (task_counts.first(), server_counts.iter().min(), server_counts.iter().max()) {
        if lo != hi {
            let (a, b) = (get(lo, l).unwrap(), get(hi, l).unwrap());
            out.checks.push(Check::new(
                &format!("DTO(M={hi}) > DTO(M={lo})"),
                b > a,
                format!("{b:.4} ms vs {a:.4} ms at L={l}"),
            ));
        }
    }
    Ok(out)
}

/// Trains on small instances and tracks the gap to the exhaustive optimum.
pub fn run_optimality(
    spec: &ExperimentSpec,
    servers: usize,
    rounds: u64,
    instances: usize,
) -> Result<ExperimentOutcome, HarnessError> {
    let dataset = spec.dataset_for();
    let scenario = spec.scenario_for(Some(servers));
    let mut p = prepare(&dataset, &scenario)?;
    p.inputs.eval.truncate(instances);
    if p.inputs.eval.len() < instances {
        return Err(HarnessError::Invalid(format!(
            "dataset has {} eval services, need {instances}",
            p.inputs.eval.len()
        )));
    }
    let oracle_cfg = OracleConfig::default();
    let mut oracle_sum = 0.0;
    for svc in &p.inputs.eval {
        oracle_sum += exhaustive_best(svc, &p.inputs.pool, &oracle_cfg)?.objective();
    }
    let oracle_mean = oracle_sum / instances as f64;
    let base = spec.run_for();
    let run = RunConfig {
        total_steps: rounds * base.hyper.train_batch as u64,
        eval_every: 1,
        eval_limit: None,
        ..base
    };
    let report = run_training(&run, &p.inputs)?;
    let gap = |x: f64| 100.0 * (x - oracle_mean) / oracle_mean;
    let rows: Vec<ResultRow> = curve_rows("optimality", &format!("M={servers}"), &report)
        .into_iter()
        .map(|mut r| {
            r.oracle_mean_exec_time_s = Some(oracle_mean);
            r.gap_pct = r.eval_mean_exec_time_s.map(gap);
            r
        })
        .collect();
    let g0 = rows[0].gap_pct.expect("gap");
    let last = rows.last().expect("final row");
    let gl = last.gap_pct.expect("gap");
    let checks = vec![
        Check::new(
            "final gap <= 5%",
            gl <= 5.0,
            format!("{gl:.2}% after {} rounds (oracle {oracle_mean:.5} s)", last.version),
        ),
        Check::new("gap shrinks", gl < g0, format!("{g0:.2}% -> {gl:.2}%")),
    ];
    Ok(ExperimentOutcome { rows, checks })
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome, HarnessError> {
    let out = match &spec.kind {
        ExperimentKind::Convergence => run_convergence(spec)?,
        ExperimentKind::SystemSize { server_counts } => run_system_size(spec, server_counts)?,
        ExperimentKind::Speedup { actor_counts, steps } => run_speedup(spec, actor_counts, *steps)?,
        ExperimentKind::Dto {
            task_counts,
            server_counts,
            services,
            policy,
        } => run_dto(spec, task_counts, server_counts, *services, policy.as_deref())?,
        ExperimentKind::Optimality {
            servers,
            rounds,
            instances,
        } => run_optimality(spec, *servers, *rounds, *instances)?,
    };
    if let Some(dir) = &spec.out_dir {
        write_outcome(dir, &out, spec.gnuplot)?;
    }
    Ok(out)
}

pub fn write_csv<W: std::io::Write>(w: W, rows: &[ResultRow]) -> Result<(), HarnessError> {
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

/// Writes `results.csv`, `checks.json` and optionally a gnuplot script.
pub fn write_outcome(dir: &Path, out: &ExperimentOutcome, gnuplot: bool) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_csv(std::fs::File::create(dir.join("results.csv"))?, &out.rows)?;
    crate::workload::write_json(&dir.join("checks.json"), &out.checks)?;
    if gnuplot {
        std::fs::write(dir.join("plot.gp"), GNUPLOT)?;
    }
    Ok(())
}

const GNUPLOT: &str = r#"set datafile separator ","
set key autotitle columnhead
set xlabel "policy version"
set ylabel "mean execution time (s)"
set terminal pngcairo size 900,600
set output "results.png"
plot "results.csv" using 3:6 with linespoints title "eval mean"
"#;

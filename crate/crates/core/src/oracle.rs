//! Reference schedulers: exhaustive branch-and-bound, uniform random and a
//! one-step greedy placement.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{ActorError, EvalStats};
use crate::dag::{RankedPlan, ServiceDag, Topology};
use crate::env::{
    critical_sum, task_exec_time, Assignment, EnvConfig, EnvError, FogEnv, RawState, ServerId,
    ServerPool,
};
use crate::workload::stream_rng;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("search space {servers}^{tasks} exceeds the budget of {budget} leaves")]
    BudgetExceeded { servers: usize, tasks: usize, budget: u64 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dag(#[from] crate::dag::DagError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Largest `M^L` the search accepts.
    pub budget: u64,
    pub prune: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            budget: 10_000_000,
            prune: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Best assignment satisfying every constraint, if any exists.
    pub best_feasible: Option<(Vec<ServerId>, f64)>,
    /// Best assignment by objective alone.
    pub best_any: (Vec<ServerId>, f64),
    pub nodes: u64,
}

impl OracleResult {
    pub fn feasible(&self) -> bool {
        self.best_feasible.is_some()
    }

    /// Objective of the best feasible assignment, falling back to the unconstrained one.
    pub fn objective(&self) -> f64 {
        self.best_feasible.as_ref().map_or(self.best_any.1, |b| b.1)
    }
}

struct Search<'a> {
    dag: &'a ServiceDag,
    topo: &'a Topology,
    plan: &'a RankedPlan,
    pool: &'a ServerPool,
    prune: bool,
    assign: Assignment,
    exec: Vec<f64>,
    residual: Vec<f64>,
    best_feasible: Option<(Vec<ServerId>, f64)>,
    best_any: Option<(Vec<ServerId>, f64)>,
    nodes: u64,
}

impl Search<'_> {
    fn snapshot(&self) -> Vec<ServerId> {
        self.assign.0.iter().map(|s| s.expect("complete")).collect()
    }

    fn dfs(&mut self, depth: usize, partial: f64, feasible: bool) -> Result<(), EnvError> {
        if self.prune {
            if let Some((_, b)) = &self.best_feasible {
                if partial > *b {
                    return Ok(());
                }
            }
            if !feasible {
                if let Some((_, b)) = &self.best_any {
                    if partial > *b {
                        return Ok(());
                    }
                }
            }
        }
        if depth == self.plan.order.len() {
            let total = critical_sum(self.plan, &self.exec);
            if self.best_any.as_ref().is_none_or(|b| total < b.1) {
                self.best_any = Some((self.snapshot(), total));
            }
            if feasible && self.best_feasible.as_ref().is_none_or(|b| total < b.1) {
                self.best_feasible = Some((self.snapshot(), total));
            }
            return Ok(());
        }
        let j = self.plan.order[depth];
        let task = &self.dag.tasks[j];
        for s in 0..self.pool.len() {
            self.nodes += 1;
            let t = task_exec_time(self.dag, self.topo, j, s, &self.assign, self.pool)?;
            let ok = feasible && t <= task.deadline_s && self.residual[s] >= task.ram_bytes;
            self.assign.0[j] = Some(s);
            self.exec[j] = t;
            self.residual[s] -= task.ram_bytes;
            let add = if self.plan.cp_indicator[j] { t } else { 0.0 };
            self.dfs(depth + 1, partial + add, ok)?;
            self.residual[s] += task.ram_bytes;
            self.exec[j] = 0.0;
            self.assign.0[j] = None;
        }
        Ok(())
    }
}

/// Enumerates every assignment in execution order and returns the optimum.
///
/// Bounding keeps the result identical to the unpruned search: partial
/// objectives never decrease as tasks are added, and ties keep the first
/// assignment found.
pub fn exhaustive_best(
    dag: &ServiceDag,
    pool: &ServerPool,
    cfg: &OracleConfig,
) -> Result<OracleResult, OracleError> {
    let m = pool.len();
    let l = dag.len();
    let leaves = u32::try_from(l)
        .ok()
        .and_then(|l| (m as u64).checked_pow(l));
    if leaves.is_none_or(|n| n > cfg.budget) {
        return Err(OracleError::BudgetExceeded {
            servers: m,
            tasks: l,
            budget: cfg.budget,
        });
    }
    let (topo, plan) = RankedPlan::build(dag, &pool.cost_averages())?;
    let mut search = Search {
        dag,
        topo: &topo,
        plan: &plan,
        pool,
        prune: cfg.prune,
        assign: Assignment::empty(l),
        exec: vec![0.0; l],
        residual: pool.servers().iter().map(|s| s.ram_bytes).collect(),
        best_feasible: None,
        best_any: None,
        nodes: 0,
    };
    search.dfs(0, 0.0, true)?;
    Ok(OracleResult {
        best_feasible: search.best_feasible,
        best_any: search.best_any.expect("at least one leaf"),
        nodes: search.nodes,
    })
}

/// Uniformly random server per task.
pub fn random_assignment<R: Rng + ?Sized>(dag: &ServiceDag, pool: &ServerPool, rng: &mut R) -> Assignment {
    Assignment((0..dag.len()).map(|_| Some(rng.gen_range(0..pool.len()))).collect())
}

/// Server with the smallest execution time for the pending task among those
/// with enough residual RAM; lowest id on ties. Ignores RAM when nothing fits.
pub fn greedy_step(raw: &RawState, pool: &ServerPool) -> ServerId {
    let need = raw.task[1];
    let cycles = raw.task[0];
    let time = |s: usize| cycles / pool.server(s).freq_hz + raw.input_ready[s];
    let pick = |fits: &dyn Fn(usize) -> bool| {
        (0..pool.len())
            .filter(|&s| fits(s))
            .fold(None, |best: Option<(usize, f64)>, s| {
                let t = time(s);
                match best {
                    Some((_, bt)) if bt <= t => best,
                    _ => Some((s, t)),
                }
            })
            .map(|(s, _)| s)
    };
    pick(&|s| raw.servers[s][5] >= need).or_else(|| pick(&|_| true)).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Random,
    Greedy,
}

/// Schedules each service with a baseline through the environment.
pub fn run_baseline(
    baseline: Baseline,
    services: &[Arc<ServiceDag>],
    pool: Arc<ServerPool>,
    cfg: EnvConfig,
    seed: u64,
) -> Result<EvalStats, ActorError> {
    if services.is_empty() {
        return Err(ActorError::NoServices);
    }
    let mut env = FogEnv::new(Arc::clone(&pool), cfg);
    let mut rng = stream_rng(seed, 0xba5e);
    let (mut total, mut tasks, mut hits, mut ok) = (0.0, 0usize, 0usize, 0usize);
    for svc in services {
        env.reset(Arc::clone(svc))?;
        loop {
            let a = match baseline {
                Baseline::Random => rng.gen_range(0..pool.len()),
                Baseline::Greedy => greedy_step(&env.raw_state()?, &pool),
            };
            let out = env.step(a)?;
            tasks += 1;
            hits += usize::from(out.info.deadline_met);
            ok += usize::from(out.info.violation.is_none());
            if out.done {
                total += out.info.total.expect("final step reports total");
                break;
            }
        }
    }
    Ok(EvalStats {
        services: services.len(),
        mean_exec_time_s: total / services.len() as f64,
        deadline_hit_rate: hits as f64 / tasks as f64,
        success_rate: ok as f64 / tasks as f64,
    })
}

//! Simulated fog computing environment.
//!
//! Holds the server pool and the analytic execution-time model (processing
//! time, propagation latency, input-ready time and the critical-path service
//! time), the CS1-CS4 constraint checks, and the episodic MDP surface used by
//! actors: one episode places every task of one service, in upward-rank order.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{CostAverages, DagError, RankedPlan, ServiceDag, TaskId, TaskSpec, Topology};
use crate::workload::{stream_rng, Range};

pub type ServerId = usize;

/// Per-server features in the state vector.
pub const SERVER_FEATURES: usize = 8;
/// Scalar task features in the state vector (followed by one input-ready time per server).
pub const TASK_SCALAR_FEATURES: usize = 7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error("invalid server pool: {0}")]
    InvalidPool(String),
    #[error("no episode in progress; call reset first")]
    NoEpisode,
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("action {action} out of range for {servers} servers")]
    InvalidAction { action: usize, servers: usize },
    #[error("predecessor {pred} of task {task} is not assigned")]
    UnassignedPredecessor { task: TaskId, pred: TaskId },
    #[error("task {0} has no server assigned")]
    IncompleteAssignment(TaskId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerKind {
    Iot,
    Fog,
    Cloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Server {
    pub kind: ServerKind,
    /// Index within its kind.
    pub index: usize,
    pub cores: u32,
    pub freq_hz: f64,
    pub ram_bytes: f64,
    pub position: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServerPool {
    servers: Vec<Server>,
    /// Row-major `M x M` bytes/second; the diagonal is unused.
    bandwidth: Vec<f64>,
    propagation_speed: f64,
    #[serde(skip)]
    latency: Vec<f64>,
}

impl ServerPool {
    pub fn new(
        servers: Vec<Server>,
        bandwidth: Vec<Vec<f64>>,
        propagation_speed: f64,
    ) -> Result<Self, EnvError> {
        let m = servers.len();
        if m == 0 {
            return Err(EnvError::InvalidPool("need at least one server".into()));
        }
        if !(propagation_speed.is_finite() && propagation_speed > 0.0) {
            return Err(EnvError::InvalidPool("propagation speed must be positive".into()));
        }
        for (i, s) in servers.iter().enumerate() {
            if !(s.freq_hz > 0.0 && s.freq_hz.is_finite() && s.ram_bytes > 0.0 && s.cores >= 1) {
                return Err(EnvError::InvalidPool(format!("server {i} has invalid resources")));
            }
        }
        if bandwidth.len() != m || bandwidth.iter().any(|r| r.len() != m) {
            return Err(EnvError::InvalidPool("bandwidth matrix must be M x M".into()));
        }
        for a in 0..m {
            for b in 0..m {
                if a != b {
                    let x = bandwidth[a][b];
                    if !(x.is_finite() && x > 0.0) || x != bandwidth[b][a] {
                        return Err(EnvError::InvalidPool(format!(
                            "bandwidth between {a} and {b} must be positive and symmetric"
                        )));
                    }
                }
            }
        }
        let mut pool = ServerPool {
            servers,
            bandwidth: bandwidth.into_iter().flatten().collect(),
            propagation_speed,
            latency: Vec::new(),
        };
        pool.fill_latency();
        Ok(pool)
    }

    fn fill_latency(&mut self) {
        let m = self.servers.len();
        self.latency = (0..m * m)
            .map(|k| {
                let (a, b) = (&self.servers[k / m], &self.servers[k % m]);
                let (dx, dy) = (a.position.0 - b.position.0, a.position.1 - b.position.1);
                (dx * dx + dy * dy).sqrt() / self.propagation_speed
            })
            .collect();
    }

    pub fn len(&self) -> usize {
        self.servers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.servers.is_empty()
    }

    pub fn servers(&self) -> &[Server] {
        &self.servers
    }

    pub fn server(&self, id: ServerId) -> &Server {
        &self.servers[id]
    }

    pub fn propagation_speed(&self) -> f64 {
        self.propagation_speed
    }

    pub fn bandwidth(&self, a: ServerId, b: ServerId) -> f64 {
        self.bandwidth[a * self.servers.len() + b]
    }

    pub fn latency(&self, a: ServerId, b: ServerId) -> f64 {
        self.latency[a * self.servers.len() + b]
    }

    /// Transfer time of `bytes` from `a` to `b`; zero on the same server.
    pub fn transfer_time(&self, bytes: f64, a: ServerId, b: ServerId) -> f64 {
        if a == b {
            0.0
        } else {
            bytes / self.bandwidth(a, b) + self.latency(a, b)
        }
    }

    /// The IoT device that originates service requests (first IoT server, else server 0).
    pub fn source(&self) -> ServerId {
        self.servers
            .iter()
            .position(|s| s.kind == ServerKind::Iot)
            .unwrap_or(0)
    }

    /// Averages over all servers and all `M^2` ordered server pairs.
    pub fn cost_averages(&self) -> CostAverages {
        let m = self.servers.len() as f64;
        let n = self.servers.len();
        let mut inv_bw = 0.0;
        let mut lat = 0.0;
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    inv_bw += 1.0 / self.bandwidth(a, b);
                    lat += self.latency(a, b);
                }
            }
        }
        CostAverages {
            mean_inv_freq: self.servers.iter().map(|s| 1.0 / s.freq_hz).sum::<f64>() / m,
            mean_inv_bandwidth: inv_bw / (m * m),
            mean_latency: lat / (m * m),
        }
    }

    fn mean_bandwidth_to_others(&self, a: ServerId) -> f64 {
        let n = self.servers.len();
        if n == 1 {
            return 0.0;
        }
        (0..n).filter(|&b| b != a).map(|b| self.bandwidth(a, b)).sum::<f64>() / (n - 1) as f64
    }
}

/// Task placement: `0[task] = Some(server)` once the task is offloaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment(pub Vec<Option<ServerId>>);

impl Assignment {
    pub fn empty(tasks: usize) -> Self {
        Assignment(vec![None; tasks])
    }

    pub fn full(servers: &[ServerId]) -> Self {
        Assignment(servers.iter().copied().map(Some).collect())
    }

    pub fn get(&self, task: TaskId) -> Option<ServerId> {
        self.0.get(task).copied().flatten()
    }

    pub fn is_complete(&self) -> bool {
        self.0.iter().all(Option::is_some)
    }
}

pub fn proc_time(task: &TaskSpec, server: &Server) -> f64 {
    task.cpu_cycles / server.freq_hz
}

pub fn latency(a: ServerId, b: ServerId, pool: &ServerPool) -> f64 {
    pool.latency(a, b)
}

/// Time for all predecessor outputs of `task` to reach `server`.
pub fn input_ready_time(
    dag: &ServiceDag,
    topo: &Topology,
    task: TaskId,
    server: ServerId,
    partial: &Assignment,
    pool: &ServerPool,
) -> Result<f64, EnvError> {
    let mut ready = 0.0_f64;
    for &(pred, k) in &topo.parents[task] {
        let from = partial
            .get(pred)
            .ok_or(EnvError::UnassignedPredecessor { task, pred })?;
        ready = ready.max(pool.transfer_time(dag.edges[k].data_bytes, from, server));
    }
    Ok(ready)
}

pub fn task_exec_time(
    dag: &ServiceDag,
    topo: &Topology,
    task: TaskId,
    server: ServerId,
    partial: &Assignment,
    pool: &ServerPool,
) -> Result<f64, EnvError> {
    let input = input_ready_time(dag, topo, task, server, partial, pool)?;
    Ok(proc_time(&dag.tasks[task], pool.server(server)) + input)
}

/// Per-task execution times under a complete assignment.
pub fn exec_times(
    dag: &ServiceDag,
    topo: &Topology,
    assignment: &Assignment,
    pool: &ServerPool,
) -> Result<Vec<f64>, EnvError> {
    (0..dag.len())
        .map(|j| {
            let s = assignment.get(j).ok_or(EnvError::IncompleteAssignment(j))?;
            task_exec_time(dag, topo, j, s, assignment, pool)
        })
        .collect()
}

/// Sum of critical-path task execution times in task-id order.
pub fn critical_sum(plan: &RankedPlan, exec: &[f64]) -> f64 {
    exec.iter()
        .zip(&plan.cp_indicator)
        .filter(|(_, &cp)| cp)
        .map(|(t, _)| *t)
        .sum()
}

/// Service execution time under a complete assignment: the critical-path sum.
pub fn service_exec_time(
    dag: &ServiceDag,
    topo: &Topology,
    assignment: &Assignment,
    plan: &RankedPlan,
    pool: &ServerPool,
) -> Result<f64, EnvError> {
    Ok(critical_sum(plan, &exec_times(dag, topo, assignment, pool)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "constraint")]
pub enum Violation {
    /// CS1: the task is not placed on exactly one server.
    Unassigned { task: TaskId },
    /// CS2: a task would complete before one of its predecessors.
    Precedence { pred: TaskId, task: TaskId },
    /// CS3: RAM demand on a server exceeds its capacity.
    Ram { server: ServerId, demand: f64, capacity: f64 },
    /// CS4: execution time exceeds the tolerable delay.
    Deadline { task: TaskId, exec_time: f64, deadline: f64 },
}

pub fn check_constraints(
    dag: &ServiceDag,
    topo: &Topology,
    assignment: &Assignment,
    pool: &ServerPool,
    exec_times: &[f64],
) -> Vec<Violation> {
    let mut out = Vec::new();
    for j in 0..dag.len() {
        if assignment.get(j).is_none_or(|s| s >= pool.len()) {
            out.push(Violation::Unassigned { task: j });
        }
    }
    if !out.is_empty() {
        return out;
    }
    // Completion time: own execution plus the latest predecessor completion.
    let order = crate::dag::execution_order_with(topo, &vec![0.0; dag.len()]);
    let mut completion = vec![0.0_f64; dag.len()];
    for &v in &order {
        let start = topo.parents[v]
            .iter()
            .map(|&(p, _)| completion[p])
            .fold(0.0, f64::max);
        completion[v] = start + exec_times[v];
    }
    for e in &dag.edges {
        if !(completion[e.dst] >= completion[e.src]) {
            out.push(Violation::Precedence {
                pred: e.src,
                task: e.dst,
            });
        }
    }
    let mut demand = vec![0.0; pool.len()];
    for (j, t) in dag.tasks.iter().enumerate() {
        demand[assignment.get(j).unwrap_or_default()] += t.ram_bytes;
    }
    for (s, &d) in demand.iter().enumerate() {
        let capacity = pool.server(s).ram_bytes;
        if d > capacity {
            out.push(Violation::Ram {
                server: s,
                demand: d,
                capacity,
            });
        }
    }
    for (j, t) in dag.tasks.iter().enumerate() {
        if exec_times[j] > t.deadline_s {
            out.push(Violation::Deadline {
                task: j,
                exec_time: exec_times[j],
                deadline: t.deadline_s,
            });
        }
    }
    out
}

/// Inclusive min-max bounds of one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub const fn new(min: f64, max: f64) -> Self {
        Bounds { min, max }
    }

    pub fn scale(&self, x: f64) -> f64 {
        if self.max <= self.min {
            return 0.0;
        }
        ((x - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormBounds {
    pub position_m: Bounds,
    pub freq_hz: Bounds,
    pub cores: Bounds,
    pub ram_bytes: Bounds,
    pub bandwidth: Bounds,
    pub latency_s: Bounds,
    pub task_cycles: Bounds,
    pub task_ram_bytes: Bounds,
    pub deadline_s: Bounds,
    pub input_bytes: Bounds,
    pub predecessors: Bounds,
    pub input_ready_s: Bounds,
}

impl Default for NormBounds {
    fn default() -> Self {
        NormBounds {
            position_m: Bounds::new(-5.1e5, 5.1e5),
            freq_hz: Bounds::new(1e9, 3e9),
            cores: Bounds::new(1.0, 8.0),
            ram_bytes: Bounds::new(0.0, 24e9),
            bandwidth: Bounds::new(0.0, 12e6),
            latency_s: Bounds::new(0.0, 3e-3),
            task_cycles: Bounds::new(0.0, 3e8),
            task_ram_bytes: Bounds::new(0.0, 100e6),
            deadline_s: Bounds::new(0.0, 0.1),
            input_bytes: Bounds::new(0.0, 20e6),
            predecessors: Bounds::new(0.0, 50.0),
            input_ready_s: Bounds::new(0.0, 1.0),
        }
    }
}

/// Unnormalised observation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawState {
    pub servers: Vec<[f64; SERVER_FEATURES]>,
    pub task: [f64; TASK_SCALAR_FEATURES],
    pub input_ready: Vec<f64>,
}

/// Normalised observation: `M * 8` server features then `7 + M` task features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState(pub Vec<f64>);

impl EnvState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn state_len(servers: usize) -> usize {
    servers * SERVER_FEATURES + TASK_SCALAR_FEATURES + servers
}

pub fn normalize_features(raw: &RawState, b: &NormBounds) -> EnvState {
    let server_bounds = [
        b.position_m,
        b.position_m,
        b.freq_hz,
        b.cores,
        b.ram_bytes,
        b.ram_bytes,
        b.bandwidth,
        b.latency_s,
    ];
    let unit = Bounds::new(0.0, 1.0);
    let task_bounds = [
        b.task_cycles,
        b.task_ram_bytes,
        b.deadline_s,
        unit,
        b.input_bytes,
        b.predecessors,
        unit,
    ];
    let mut v = Vec::with_capacity(state_len(raw.servers.len()));
    for s in &raw.servers {
        v.extend(s.iter().zip(&server_bounds).map(|(x, bd)| bd.scale(*x)));
    }
    v.extend(raw.task.iter().zip(&task_bounds).map(|(x, bd)| bd.scale(*x)));
    v.extend(raw.input_ready.iter().map(|&x| b.input_ready_s.scale(x)));
    EnvState(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepViolation {
    Deadline,
    Ram,
    DeadlineAndRam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub task: TaskId,
    pub server: ServerId,
    pub exec_time: f64,
    pub deadline_met: bool,
    pub violation: Option<StepViolation>,
    /// Service execution time, present on the final step of an episode.
    pub total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Appends one step outcome to a JSON-lines trace.
pub fn write_trace_line<W: Write>(w: &mut W, outcome: &StepOutcome) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, outcome)?;
    w.write_all(b"\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierSpec {
    pub kind: ServerKind,
    pub count: usize,
    pub cores: u32,
    pub freq_hz: Range,
    pub ram_bytes: Range,
    pub placement: Placement,
}

/// Where servers of a tier are placed; coordinates are metres around the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Placement {
    /// Uniform in a square of side `side_m` centred at the origin.
    Square { side_m: f64 },
    /// Uniform angle, uniform radius in `[min_m, max_m]`.
    Ring { min_m: f64, max_m: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthRanges {
    /// Between non-cloud servers.
    pub edge: Range,
    /// Any link with a cloud server at one end.
    pub cloud: Range,
}

/// Scenario description; `build_pool` draws a concrete pool from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub servers: Vec<TierSpec>,
    pub bandwidth: BandwidthRanges,
    pub propagation_speed: f64,
    #[serde(default = "default_phi")]
    pub phi: f64,
    /// Hide servers without enough residual RAM from the policy instead of penalising.
    #[serde(default)]
    pub mask_infeasible: bool,
    #[serde(default)]
    pub normalization: NormBounds,
    pub seed: u64,
}

fn default_phi() -> f64 {
    -1.0
}

const MB: f64 = 1e6;
const GB: f64 = 1e9;

impl ScenarioConfig {
    /// One IoT device, 30 fog servers and 20 cloud servers.
    pub fn standard(seed: u64) -> Self {
        Self::with_counts(30, 20, seed)
    }

    /// `total` servers: one IoT device, the rest split 3:2 between fog and cloud.
    pub fn scaled(total: usize, seed: u64) -> Self {
        let rest = total.saturating_sub(1).max(1);
        let fog = ((rest as f64) * 0.6).round() as usize;
        Self::with_counts(fog, rest - fog, seed)
    }

    fn with_counts(fog: usize, cloud: usize, seed: u64) -> Self {
        let square = Placement::Square { side_m: 1000.0 };
        ScenarioConfig {
            servers: vec![
                TierSpec {
                    kind: ServerKind::Iot,
                    count: 1,
                    cores: 1,
                    freq_hz: Range::new(1.0 * GB, 1.0 * GB),
                    ram_bytes: Range::new(1.0 * GB, 1.0 * GB),
                    placement: square,
                },
                TierSpec {
                    kind: ServerKind::Fog,
                    count: fog,
                    cores: 4,
                    freq_hz: Range::new(1.5 * GB, 2.0 * GB),
                    ram_bytes: Range::new(1.0 * GB, 4.0 * GB),
                    placement: square,
                },
                TierSpec {
                    kind: ServerKind::Cloud,
                    count: cloud,
                    cores: 8,
                    freq_hz: Range::new(2.0 * GB, 3.0 * GB),
                    ram_bytes: Range::new(16.0 * GB, 24.0 * GB),
                    placement: Placement::Ring {
                        min_m: 100e3,
                        max_m: 500e3,
                    },
                },
            ],
            bandwidth: BandwidthRanges {
                edge: Range::new(10.0 * MB, 12.0 * MB),
                cloud: Range::new(4.0 * MB, 8.0 * MB),
            },
            propagation_speed: 2e8,
            phi: default_phi(),
            mask_infeasible: false,
            normalization: NormBounds::default(),
            seed,
        }
    }

    pub fn num_servers(&self) -> usize {
        self.servers.iter().map(|t| t.count).sum()
    }

    pub fn build_pool(&self) -> Result<ServerPool, EnvError> {
        let mut rng = stream_rng(self.seed, 0x5eed_0001);
        let mut servers = Vec::new();
        for tier in &self.servers {
            for index in 0..tier.count {
                let position = match tier.placement {
                    Placement::Square { side_m } => (
                        rng.gen_range(-0.5..=0.5) * side_m,
                        rng.gen_range(-0.5..=0.5) * side_m,
                    ),
                    Placement::Ring { min_m, max_m } => {
                        let r = Range::new(min_m, max_m).sample(&mut rng);
                        let a = rng.gen_range(0.0..std::f64::consts::TAU);
                        (r * a.cos(), r * a.sin())
                    }
                };
                servers.push(Server {
                    kind: tier.kind,
                    index,
                    cores: tier.cores,
                    freq_hz: tier.freq_hz.sample(&mut rng),
                    ram_bytes: tier.ram_bytes.sample(&mut rng),
                    position,
                });
            }
        }
        let m = servers.len();
        let mut bw = vec![vec![0.0; m]; m];
        for a in 0..m {
            for b in a + 1..m {
                let cloud = servers[a].kind == ServerKind::Cloud || servers[b].kind == ServerKind::Cloud;
                let r = if cloud { self.bandwidth.cloud } else { self.bandwidth.edge };
                let x = r.sample(&mut rng);
                bw[a][b] = x;
                bw[b][a] = x;
            }
        }
        ServerPool::new(servers, bw, self.propagation_speed)
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            phi: self.phi,
            mask_infeasible: self.mask_infeasible,
            normalization: self.normalization,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Failure penalty.
    pub phi: f64,
    pub mask_infeasible: bool,
    pub normalization: NormBounds,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            phi: default_phi(),
            mask_infeasible: false,
            normalization: NormBounds::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct Episode {
    dag: Arc<ServiceDag>,
    topo: Topology,
    plan: RankedPlan,
    cursor: usize,
    assignment: Assignment,
    residual_ram: Vec<f64>,
    exec: Vec<f64>,
    success: Vec<bool>,
}

impl Episode {
    fn done(&self) -> bool {
        self.cursor >= self.plan.order.len()
    }
}

/// Summary of a finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub assignment: Assignment,
    pub exec_times: Vec<f64>,
    pub total: f64,
    pub successes: usize,
    pub tasks: usize,
}

/// One environment instance; owned by a single actor.
#[derive(Debug, Clone)]
pub struct FogEnv {
    pool: Arc<ServerPool>,
    cfg: EnvConfig,
    costs: CostAverages,
    /// Raw server features with the residual-RAM slot left at capacity.
    server_raw: Vec<[f64; SERVER_FEATURES]>,
    episode: Option<Episode>,
}

impl FogEnv {
    pub fn new(pool: Arc<ServerPool>, cfg: EnvConfig) -> Self {
        let src = pool.source();
        let server_raw = (0..pool.len())
            .map(|k| {
                let s = pool.server(k);
                [
                    s.position.0,
                    s.position.1,
                    s.freq_hz,
                    f64::from(s.cores),
                    s.ram_bytes,
                    s.ram_bytes,
                    pool.mean_bandwidth_to_others(k),
                    pool.latency(k, src),
                ]
            })
            .collect();
        let costs = pool.cost_averages();
        FogEnv {
            pool,
            cfg,
            costs,
            server_raw,
            episode: None,
        }
    }

    pub fn pool(&self) -> &Arc<ServerPool> {
        &self.pool
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn num_servers(&self) -> usize {
        self.pool.len()
    }

    pub fn state_len(&self) -> usize {
        state_len(self.pool.len())
    }

    pub fn plan(&self) -> Option<&RankedPlan> {
        self.episode.as_ref().map(|e| &e.plan)
    }

    pub fn is_done(&self) -> bool {
        self.episode.as_ref().is_none_or(Episode::done)
    }

    /// Starts an episode for `service`: pre-schedules it and returns the initial state.
    pub fn reset(&mut self, service: Arc<ServiceDag>) -> Result<EnvState, EnvError> {
        let (topo, plan) = RankedPlan::build(&service, &self.costs)?;
        let n = service.len();
        self.episode = Some(Episode {
            dag: service,
            topo,
            plan,
            cursor: 0,
            assignment: Assignment::empty(n),
            residual_ram: self.pool.servers().iter().map(|s| s.ram_bytes).collect(),
            exec: vec![0.0; n],
            success: vec![false; n],
        });
        self.observe()
    }

    pub fn raw_state(&self) -> Result<RawState, EnvError> {
        let ep = self.episode.as_ref().ok_or(EnvError::NoEpisode)?;
        let mut servers = self.server_raw.clone();
        for (f, r) in servers.iter_mut().zip(&ep.residual_ram) {
            f[5] = *r;
        }
        let placed = ep.cursor as f64 / ep.plan.order.len() as f64;
        if ep.done() {
            let mut task = [0.0; TASK_SCALAR_FEATURES];
            task[6] = placed;
            return Ok(RawState {
                servers,
                task,
                input_ready: vec![0.0; self.pool.len()],
            });
        }
        let j = ep.plan.order[ep.cursor];
        let t = &ep.dag.tasks[j];
        let parents = &ep.topo.parents[j];
        let input_bytes: f64 = parents.iter().map(|&(_, k)| ep.dag.edges[k].data_bytes).sum();
        let input_ready = (0..self.pool.len())
            .map(|s| input_ready_time(&ep.dag, &ep.topo, j, s, &ep.assignment, &self.pool))
            .collect::<Result<_, _>>()?;
        Ok(RawState {
            servers,
            task: [
                t.cpu_cycles,
                t.ram_bytes,
                t.deadline_s,
                if ep.plan.cp_indicator[j] { 1.0 } else { 0.0 },
                input_bytes,
                parents.len() as f64,
                placed,
            ],
            input_ready,
        })
    }

    pub fn observe(&self) -> Result<EnvState, EnvError> {
        Ok(normalize_features(&self.raw_state()?, &self.cfg.normalization))
    }

    /// Servers that can still host the current task's RAM. All true when no task is pending.
    pub fn action_mask(&self) -> Result<Vec<bool>, EnvError> {
        let ep = self.episode.as_ref().ok_or(EnvError::NoEpisode)?;
        if ep.done() {
            return Ok(vec![true; self.pool.len()]);
        }
        let need = ep.dag.tasks[ep.plan.order[ep.cursor]].ram_bytes;
        let mask: Vec<bool> = ep.residual_ram.iter().map(|&r| r >= need).collect();
        // With nothing feasible the placement is penalised anyway; leave all open.
        Ok(if mask.iter().any(|&m| m) {
            mask
        } else {
            vec![true; mask.len()]
        })
    }

    pub fn step(&mut self, action: ServerId) -> Result<StepOutcome, EnvError> {
        let servers = self.pool.len();
        let pool = Arc::clone(&self.pool);
        let phi = self.cfg.phi;
        let ep = self.episode.as_mut().ok_or(EnvError::NoEpisode)?;
        if ep.done() {
            return Err(EnvError::EpisodeFinished);
        }
        if action >= servers {
            return Err(EnvError::InvalidAction { action, servers });
        }
        let j = ep.plan.order[ep.cursor];
        let exec = task_exec_time(&ep.dag, &ep.topo, j, action, &ep.assignment, &pool)?;
        let task = &ep.dag.tasks[j];
        let deadline_met = exec <= task.deadline_s;
        let ram_ok = ep.residual_ram[action] >= task.ram_bytes;
        let violation = match (deadline_met, ram_ok) {
            (true, true) => None,
            (false, true) => Some(StepViolation::Deadline),
            (true, false) => Some(StepViolation::Ram),
            (false, false) => Some(StepViolation::DeadlineAndRam),
        };
        let reward = if violation.is_none() {
            ep.residual_ram[action] -= task.ram_bytes;
            -exec
        } else {
            phi
        };
        ep.assignment.0[j] = Some(action);
        ep.exec[j] = exec;
        ep.success[j] = violation.is_none();
        ep.cursor += 1;
        let done = ep.done();
        let total = done.then(|| critical_sum(&ep.plan, &ep.exec));
        let next_state = self.observe()?;
        Ok(StepOutcome {
            next_state,
            reward,
            done,
            info: StepInfo {
                task: j,
                server: action,
                exec_time: exec,
                deadline_met,
                violation,
                total,
            },
        })
    }

    /// Summary of the current episode once every task is placed.
    pub fn summary(&self) -> Option<EpisodeSummary> {
        let ep = self.episode.as_ref().filter(|e| e.done())?;
        Some(EpisodeSummary {
            assignment: ep.assignment.clone(),
            exec_times: ep.exec.clone(),
            total: critical_sum(&ep.plan, &ep.exec),
            successes: ep.success.iter().filter(|&&s| s).count(),
            tasks: ep.exec.len(),
        })
    }

    pub fn service(&self) -> Option<&Arc<ServiceDag>> {
        self.episode.as_ref().map(|e| &e.dag)
    }

    pub fn topology(&self) -> Option<&Topology> {
        self.episode.as_ref().map(|e| &e.topo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{validate_dag, DagEdge};

    fn server(freq: f64, ram: f64, pos: (f64, f64)) -> Server {
        Server {
            kind: ServerKind::Fog,
            index: 0,
            cores: 1,
            freq_hz: freq,
            ram_bytes: ram,
            position: pos,
        }
    }

    fn task(id: usize, cycles: f64, ram: f64, deadline: f64) -> TaskSpec {
        TaskSpec {
            id,
            cpu_cycles: cycles,
            ram_bytes: ram,
            deadline_s: deadline,
        }
    }

    fn two_server_pool(bw: f64, distance: f64, prop: f64) -> ServerPool {
        ServerPool::new(
            vec![server(2e9, 1e9, (0.0, 0.0)), server(2e9, 1e9, (distance, 0.0))],
            vec![vec![0.0, bw], vec![bw, 0.0]],
            prop,
        )
        .unwrap()
    }

    #[test]
    fn proc_time_examples() {
        assert!((proc_time(&task(0, 2e8, 1.0, 1.0), &server(2e9, 1.0, (0.0, 0.0))) - 0.1).abs() < 1e-15);
        assert!((proc_time(&task(0, 1e7, 1.0, 1.0), &server(1e9, 1.0, (0.0, 0.0))) - 0.01).abs() < 1e-15);
        assert!(proc_time(&task(0, f64::MIN_POSITIVE, 1.0, 1.0), &server(3e9, 1.0, (0.0, 0.0))) > 0.0);
    }

    #[test]
    fn latency_examples() {
        let p = two_server_pool(1e6, 1000.0, 2e8);
        assert_eq!(latency(0, 0, &p), 0.0);
        assert!((latency(0, 1, &p) - 5e-6).abs() < 1e-18);
        let q = ServerPool::new(
            vec![server(1e9, 1.0, (0.0, 3.0)), server(1e9, 1.0, (4.0, 0.0))],
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            1.0,
        )
        .unwrap();
        assert_eq!(latency(0, 1, &q), 5.0);
    }

    #[test]
    fn rejects_asymmetric_bandwidth() {
        let r = ServerPool::new(
            vec![server(1e9, 1.0, (0.0, 0.0)), server(1e9, 1.0, (0.0, 0.0))],
            vec![vec![0.0, 1.0], vec![2.0, 0.0]],
            1.0,
        );
        assert!(matches!(r, Err(EnvError::InvalidPool(_))));
    }

    // Two servers at 2 GHz, 10 MB/s link with 1 ms latency.
    fn chain_setup() -> (ServiceDag, Topology, ServerPool) {
        let pool = two_server_pool(10e6, 2e5, 2e8);
        let dag = ServiceDag {
            id: 0,
            tasks: vec![task(0, 2e8, 1.0, 1.0), task(1, 1e7, 1.0, 1.0)],
            edges: vec![DagEdge {
                src: 0,
                dst: 1,
                data_bytes: 1e6,
            }],
        };
        let topo = validate_dag(&dag).unwrap();
        (dag, topo, pool)
    }

    #[test]
    fn input_ready_examples() {
        let (dag, topo, pool) = chain_setup();
        let partial = Assignment(vec![Some(0), None]);
        assert_eq!(input_ready_time(&dag, &topo, 0, 1, &partial, &pool).unwrap(), 0.0);
        assert_eq!(input_ready_time(&dag, &topo, 1, 0, &partial, &pool).unwrap(), 0.0);
        let cross = input_ready_time(&dag, &topo, 1, 1, &partial, &pool).unwrap();
        assert!((cross - 0.101).abs() < 1e-12, "{cross}");
        let none = Assignment::empty(2);
        assert_eq!(
            input_ready_time(&dag, &topo, 1, 1, &none, &pool),
            Err(EnvError::UnassignedPredecessor { task: 1, pred: 0 })
        );
    }

    #[test]
    fn task_and_service_exec_examples() {
        let (dag, topo, pool) = chain_setup();
        let partial = Assignment(vec![Some(0), None]);
        assert!((task_exec_time(&dag, &topo, 0, 0, &partial, &pool).unwrap() - 0.1).abs() < 1e-15);
        assert!((task_exec_time(&dag, &topo, 1, 0, &partial, &pool).unwrap() - 0.005).abs() < 1e-15);
        assert!((task_exec_time(&dag, &topo, 1, 1, &partial, &pool).unwrap() - 0.106).abs() < 1e-12);
        let (_, plan) = RankedPlan::build(&dag, &pool.cost_averages()).unwrap();
        let same = Assignment::full(&[0, 0]);
        assert!((service_exec_time(&dag, &topo, &same, &plan, &pool).unwrap() - 0.105).abs() < 1e-15);
        assert_eq!(
            service_exec_time(&dag, &topo, &partial, &plan, &pool),
            Err(EnvError::IncompleteAssignment(1))
        );
    }

    #[test]
    fn off_path_task_does_not_move_objective() {
        // 0 -> {1, 2} -> 3 with task 2 light enough to stay off the critical path.
        // Servers 1 and 2 share position and links; server 1 is very slow.
        let mut servers = vec![server(2e9, 1e9, (0.0, 0.0)); 3];
        servers[1].freq_hz = 1e6;
        let bw = vec![vec![0.0, 1e7, 1e7], vec![1e7, 0.0, 1e7], vec![1e7, 1e7, 0.0]];
        let pool = ServerPool::new(servers, bw, 2e8).unwrap();
        let dag = ServiceDag {
            id: 0,
            tasks: vec![
                task(0, 1e8, 1.0, 1.0),
                task(1, 3e8, 1.0, 1.0),
                task(2, 1e7, 1.0, 1.0),
                task(3, 1e8, 1.0, 1.0),
            ],
            edges: [(0, 1), (0, 2), (1, 3), (2, 3)]
                .iter()
                .map(|&(s, d)| DagEdge {
                    src: s,
                    dst: d,
                    data_bytes: 1e3,
                })
                .collect(),
        };
        let topo = validate_dag(&dag).unwrap();
        let (_, plan) = RankedPlan::build(&dag, &pool.cost_averages()).unwrap();
        assert_eq!(plan.critical_path, vec![0, 1, 3]);
        let fast = Assignment::full(&[0, 0, 2, 0]);
        let slow = Assignment::full(&[0, 0, 1, 0]);
        let t_slow = exec_times(&dag, &topo, &slow, &pool).unwrap();
        assert!(t_slow[2] > 5.0, "task 2 is huge on the slow server");
        let a = service_exec_time(&dag, &topo, &fast, &plan, &pool).unwrap();
        let b = service_exec_time(&dag, &topo, &slow, &plan, &pool).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constraint_examples() {
        let pool = ServerPool::new(
            vec![server(1e9, 100e6, (0.0, 0.0)), server(3e9, 24e9, (0.0, 0.0))],
            vec![vec![0.0, 1e7], vec![1e7, 0.0]],
            2e8,
        )
        .unwrap();
        let dag = ServiceDag {
            id: 0,
            tasks: vec![task(0, 1e7, 60e6, 0.1), task(1, 1e7, 60e6, 0.1)],
            edges: vec![],
        };
        let topo = validate_dag(&dag).unwrap();
        let on_cloud = Assignment::full(&[1, 1]);
        let t = exec_times(&dag, &topo, &on_cloud, &pool).unwrap();
        assert!(check_constraints(&dag, &topo, &on_cloud, &pool, &t).is_empty());

        let crowded = Assignment::full(&[0, 0]);
        let t = exec_times(&dag, &topo, &crowded, &pool).unwrap();
        let v = check_constraints(&dag, &topo, &crowded, &pool, &t);
        assert_eq!(
            v,
            vec![Violation::Ram {
                server: 0,
                demand: 120e6,
                capacity: 100e6
            }]
        );

        let v = check_constraints(&dag, &topo, &on_cloud, &pool, &[0.12, 0.01]);
        assert_eq!(
            v,
            vec![Violation::Deadline {
                task: 0,
                exec_time: 0.12,
                deadline: 0.1
            }]
        );
        let v = check_constraints(&dag, &topo, &Assignment(vec![Some(0), None]), &pool, &[0.0, 0.0]);
        assert_eq!(v, vec![Violation::Unassigned { task: 1 }]);
    }

    #[test]
    fn normalization_examples() {
        let b = Bounds::new(1e9, 3e9);
        assert_eq!(b.scale(1e9), 0.0);
        assert_eq!(b.scale(3e9), 1.0);
        assert!((b.scale(1.5e9) - 0.25).abs() < 1e-15);
        assert_eq!(b.scale(9e9), 1.0);
        assert_eq!(b.scale(-1.0), 0.0);
    }

    fn chain_env(deadlines: (f64, f64)) -> (FogEnv, Arc<ServiceDag>) {
        let (mut dag, _, pool) = chain_setup();
        dag.tasks[0].deadline_s = deadlines.0;
        dag.tasks[1].deadline_s = deadlines.1;
        (FogEnv::new(Arc::new(pool), EnvConfig::default()), Arc::new(dag))
    }

    #[test]
    fn reset_shape_and_determinism() {
        let (mut env, dag) = chain_env((1.0, 1.0));
        let s0 = env.reset(Arc::clone(&dag)).unwrap();
        assert_eq!(s0.len(), 2 * 8 + 7 + 2);
        assert_eq!(s0.0[2 * 8 + 6], 0.0, "fraction placed");
        assert!(s0.0.iter().all(|x| (0.0..=1.0).contains(x)));
        let s1 = env.reset(dag).unwrap();
        assert_eq!(s0, s1);
    }

    #[test]
    fn step_rewards_follow_deadlines() {
        let (mut env, dag) = chain_env((0.2, 0.1));
        env.reset(dag).unwrap();
        let o = env.step(0).unwrap();
        assert_eq!(o.reward, -0.1);
        assert!(!o.done);
        // Cross-server child: 0.106 s > 0.1 s deadline.
        let o = env.step(1).unwrap();
        assert_eq!(o.reward, -1.0);
        assert_eq!(o.info.violation, Some(StepViolation::Deadline));
        assert!(o.done);
        let total = o.info.total.unwrap();
        assert!((total - (0.1 + 0.106)).abs() < 1e-12);
        assert_eq!(env.step(0), Err(EnvError::EpisodeFinished));
    }

    #[test]
    fn step_rejects_bad_action() {
        let (mut env, dag) = chain_env((1.0, 1.0));
        assert_eq!(env.step(0), Err(EnvError::NoEpisode));
        env.reset(dag).unwrap();
        assert_eq!(
            env.step(7),
            Err(EnvError::InvalidAction {
                action: 7,
                servers: 2
            })
        );
    }

    #[test]
    fn ram_failure_penalised_and_not_debited() {
        let pool = ServerPool::new(
            vec![server(2e9, 100e6, (0.0, 0.0)), server(2e9, 1e9, (0.0, 0.0))],
            vec![vec![0.0, 1e7], vec![1e7, 0.0]],
            2e8,
        )
        .unwrap();
        let dag = Arc::new(ServiceDag {
            id: 0,
            tasks: vec![task(0, 1e7, 60e6, 1.0), task(1, 1e7, 60e6, 1.0)],
            edges: vec![],
        });
        let mut env = FogEnv::new(Arc::new(pool), EnvConfig::default());
        env.reset(dag).unwrap();
        assert_eq!(env.step(0).unwrap().reward, -0.005);
        assert_eq!(env.action_mask().unwrap(), vec![false, true]);
        let o = env.step(0).unwrap();
        assert_eq!(o.reward, -1.0);
        assert_eq!(o.info.violation, Some(StepViolation::Ram));
        // Residual RAM of server 0 stays at 40 MB.
        let raw = env.raw_state().unwrap();
        assert!((raw.servers[0][5] - 40e6).abs() < 1e-3);
    }

    #[test]
    fn standard_scenario_shape() {
        let cfg = ScenarioConfig::standard(7);
        let pool = cfg.build_pool().unwrap();
        assert_eq!(pool.len(), 51);
        assert_eq!(pool.source(), 0);
        for a in 0..pool.len() {
            for b in 0..pool.len() {
                if a == b {
                    continue;
                }
                let bw = pool.bandwidth(a, b);
                let cloud = pool.server(a).kind == ServerKind::Cloud || pool.server(b).kind == ServerKind::Cloud;
                if cloud {
                    assert!((4e6..=8e6).contains(&bw));
                } else {
                    assert!((10e6..=12e6).contains(&bw));
                }
            }
        }
        let small = ScenarioConfig::scaled(4, 1);
        assert_eq!(small.num_servers(), 4);
        assert_eq!(ScenarioConfig::scaled(100, 1).num_servers(), 100);
    }
}

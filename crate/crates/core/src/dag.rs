//! Service DAGs: validation, upward ranking, execution order and critical path.
//!
//! Task ids are dense positions: `tasks[i].id == i`. Every algorithm here is
//! a pure function of its inputs.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TaskId = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DagError {
    #[error("service DAG has no tasks")]
    EmptyDag,
    #[error("cycle detected through task {0}")]
    CycleDetected(TaskId),
    #[error("edge {src}->{dst} references a task that does not exist")]
    DanglingEdge { src: TaskId, dst: TaskId },
    #[error("self loop on task {0}")]
    SelfLoop(TaskId),
    #[error("duplicate edge {src}->{dst}")]
    DuplicateEdge { src: TaskId, dst: TaskId },
    #[error("task at position {position} has id {id}; ids must equal their position")]
    NonContiguousId { position: usize, id: TaskId },
    #[error("task {0} has a non-positive or non-finite demand")]
    InvalidTask(TaskId),
    #[error("edge {src}->{dst} has non-positive or non-finite data size")]
    InvalidEdge { src: TaskId, dst: TaskId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub id: TaskId,
    pub cpu_cycles: f64,
    pub ram_bytes: f64,
    pub deadline_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DagEdge {
    pub src: TaskId,
    pub dst: TaskId,
    pub data_bytes: f64,
}

/// A service as a DAG of tasks connected by data dependencies.
///
/// On disk this is `{id, tasks:[{id,cycles,ram,deadline_ms}], edges:[{src,dst,bytes}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "DagRecord", into = "DagRecord")]
pub struct ServiceDag {
    pub id: u64,
    pub tasks: Vec<TaskSpec>,
    pub edges: Vec<DagEdge>,
}

#[derive(Serialize, Deserialize)]
struct DagRecord {
    id: u64,
    tasks: Vec<TaskRecord>,
    edges: Vec<EdgeRecord>,
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    id: TaskId,
    cycles: f64,
    ram: f64,
    deadline_ms: f64,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    src: TaskId,
    dst: TaskId,
    bytes: f64,
}

impl From<DagRecord> for ServiceDag {
    fn from(r: DagRecord) -> Self {
        ServiceDag {
            id: r.id,
            tasks: r
                .tasks
                .into_iter()
                .map(|t| TaskSpec {
                    id: t.id,
                    cpu_cycles: t.cycles,
                    ram_bytes: t.ram,
                    deadline_s: t.deadline_ms / 1e3,
                })
                .collect(),
            edges: r
                .edges
                .into_iter()
                .map(|e| DagEdge {
                    src: e.src,
                    dst: e.dst,
                    data_bytes: e.bytes,
                })
                .collect(),
        }
    }
}

impl From<ServiceDag> for DagRecord {
    fn from(d: ServiceDag) -> Self {
        DagRecord {
            id: d.id,
            tasks: d
                .tasks
                .into_iter()
                .map(|t| TaskRecord {
                    id: t.id,
                    cycles: t.cpu_cycles,
                    ram: t.ram_bytes,
                    deadline_ms: t.deadline_s * 1e3,
                })
                .collect(),
            edges: d
                .edges
                .into_iter()
                .map(|e| EdgeRecord {
                    src: e.src,
                    dst: e.dst,
                    bytes: e.data_bytes,
                })
                .collect(),
        }
    }
}

impl ServiceDag {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Adjacency derived from a validated DAG. Entries are `(task, edge index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub parents: Vec<Vec<(TaskId, usize)>>,
    pub children: Vec<Vec<(TaskId, usize)>>,
}

impl Topology {
    pub fn entries(&self) -> impl Iterator<Item = TaskId> + '_ {
        (0..self.parents.len()).filter(|&v| self.parents[v].is_empty())
    }

    pub fn exits(&self) -> impl Iterator<Item = TaskId> + '_ {
        (0..self.children.len()).filter(|&v| self.children[v].is_empty())
    }
}

pub fn validate_dag(dag: &ServiceDag) -> Result<Topology, DagError> {
    let n = dag.tasks.len();
    if n == 0 {
        return Err(DagError::EmptyDag);
    }
    for (position, t) in dag.tasks.iter().enumerate() {
        if t.id != position {
            return Err(DagError::NonContiguousId { position, id: t.id });
        }
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !(ok(t.cpu_cycles) && ok(t.ram_bytes) && ok(t.deadline_s)) {
            return Err(DagError::InvalidTask(t.id));
        }
    }
    let mut parents = vec![Vec::new(); n];
    let mut children = vec![Vec::new(); n];
    let mut seen = HashSet::new();
    for (k, e) in dag.edges.iter().enumerate() {
        if e.src >= n || e.dst >= n {
            return Err(DagError::DanglingEdge { src: e.src, dst: e.dst });
        }
        if e.src == e.dst {
            return Err(DagError::SelfLoop(e.src));
        }
        if !(e.data_bytes.is_finite() && e.data_bytes > 0.0) {
            return Err(DagError::InvalidEdge { src: e.src, dst: e.dst });
        }
        if !seen.insert((e.src, e.dst)) {
            return Err(DagError::DuplicateEdge { src: e.src, dst: e.dst });
        }
        parents[e.dst].push((e.src, k));
        children[e.src].push((e.dst, k));
    }

    // Kahn's algorithm; any task left with unresolved parents sits on a cycle.
    let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut stack: Vec<TaskId> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut visited = 0;
    while let Some(v) = stack.pop() {
        visited += 1;
        for &(c, _) in &children[v] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                stack.push(c);
            }
        }
    }
    if visited != n {
        let culprit = (0..n).find(|&v| indeg[v] > 0).unwrap_or(0);
        return Err(DagError::CycleDetected(culprit));
    }
    Ok(Topology { parents, children })
}

/// Pool-wide averages used by the ranking heuristics.
///
/// `avg_comp(v) = cycles(v) * mean_inv_freq` and
/// `avg_comm(e) = bytes(e) * mean_inv_bandwidth + mean_latency`, where the
/// communication means run over all ordered server pairs, same-server pairs
/// contributing zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostAverages {
    pub mean_inv_freq: f64,
    pub mean_inv_bandwidth: f64,
    pub mean_latency: f64,
}

impl CostAverages {
    pub fn avg_comp(&self, task: &TaskSpec) -> f64 {
        task.cpu_cycles * self.mean_inv_freq
    }

    pub fn avg_comm(&self, edge: &DagEdge) -> f64 {
        edge.data_bytes * self.mean_inv_bandwidth + self.mean_latency
    }
}

/// Upward rank of every task, indexed by task id.
pub fn upward_rank(dag: &ServiceDag, costs: &CostAverages) -> Result<Vec<f64>, DagError> {
    let topo = validate_dag(dag)?;
    Ok(upward_rank_with(dag, &topo, costs))
}

pub(crate) fn upward_rank_with(dag: &ServiceDag, topo: &Topology, costs: &CostAverages) -> Vec<f64> {
    let n = dag.len();
    let mut rank = vec![f64::NAN; n];
    // Reverse topological order: process a task once all children are ranked.
    let mut pending: Vec<usize> = topo.children.iter().map(Vec::len).collect();
    let mut ready: Vec<TaskId> = (0..n).filter(|&v| pending[v] == 0).collect();
    while let Some(v) = ready.pop() {
        let tail = topo.children[v]
            .iter()
            .map(|&(c, k)| costs.avg_comm(&dag.edges[k]) + rank[c])
            .fold(0.0_f64, f64::max);
        rank[v] = costs.avg_comp(&dag.tasks[v]) + tail;
        for &(p, _) in &topo.parents[v] {
            pending[p] -= 1;
            if pending[p] == 0 {
                ready.push(p);
            }
        }
    }
    rank
}

#[derive(Debug, PartialEq)]
struct Ready {
    rank: f64,
    id: TaskId,
}

impl Eq for Ready {}

impl Ord for Ready {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank
            .total_cmp(&other.rank)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Ready {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Tasks by descending rank, ties by ascending id.
///
/// Implemented as a rank-prioritised topological sort, so the result respects
/// precedence even if rounding collapses a parent's rank onto its child's.
pub fn execution_order(dag: &ServiceDag, rank: &[f64]) -> Result<Vec<TaskId>, DagError> {
    let topo = validate_dag(dag)?;
    Ok(execution_order_with(&topo, rank))
}

pub(crate) fn execution_order_with(topo: &Topology, rank: &[f64]) -> Vec<TaskId> {
    let n = topo.parents.len();
    let mut indeg: Vec<usize> = topo.parents.iter().map(Vec::len).collect();
    let mut heap: BinaryHeap<Ready> = (0..n)
        .filter(|&v| indeg[v] == 0)
        .map(|id| Ready { rank: rank[id], id })
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Ready { id, .. }) = heap.pop() {
        order.push(id);
        for &(c, _) in &topo.children[id] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                heap.push(Ready { rank: rank[c], id: c });
            }
        }
    }
    order
}

/// Returns the critical path (entry to exit, in path order) and the per-task indicator.
pub fn critical_path(
    dag: &ServiceDag,
    rank: &[f64],
    costs: &CostAverages,
) -> Result<(Vec<TaskId>, Vec<bool>), DagError> {
    let topo = validate_dag(dag)?;
    Ok(critical_path_with(dag, &topo, rank, costs))
}

pub(crate) fn critical_path_with(
    dag: &ServiceDag,
    topo: &Topology,
    rank: &[f64],
    costs: &CostAverages,
) -> (Vec<TaskId>, Vec<bool>) {
    // Strictly-greater comparison over ascending ids keeps the lowest id on ties.
    let argmax = |items: &mut dyn Iterator<Item = (TaskId, f64)>| {
        let mut best: Option<(TaskId, f64)> = None;
        for (id, score) in items {
            match best {
                Some((bid, bs)) if score < bs || (score == bs && id > bid) => {}
                _ => best = Some((id, score)),
            }
        }
        best.map(|(id, _)| id)
    };
    let mut indicator = vec![false; dag.len()];
    let mut path = Vec::new();
    let mut current = argmax(&mut topo.entries().map(|v| (v, rank[v])));
    while let Some(v) = current {
        path.push(v);
        indicator[v] = true;
        current = argmax(
            &mut topo.children[v]
                .iter()
                .map(|&(c, k)| (c, costs.avg_comm(&dag.edges[k]) + rank[c])),
        );
    }
    (path, indicator)
}

/// Output of the pre-scheduling pass run at the start of every episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPlan {
    pub order: Vec<TaskId>,
    pub rank: Vec<f64>,
    pub critical_path: Vec<TaskId>,
    pub cp_indicator: Vec<bool>,
}

impl RankedPlan {
    pub fn build(dag: &ServiceDag, costs: &CostAverages) -> Result<(Topology, RankedPlan), DagError> {
        let topo = validate_dag(dag)?;
        let rank = upward_rank_with(dag, &topo, costs);
        let order = execution_order_with(&topo, &rank);
        let (critical_path, cp_indicator) = critical_path_with(dag, &topo, &rank, costs);
        Ok((
            topo,
            RankedPlan {
                order,
                rank,
                critical_path,
                cp_indicator,
            },
        ))
    }
}

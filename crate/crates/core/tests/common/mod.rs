//! Random small instances, independent brute-force evaluators and reference
//! formulas shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use fog_appo::dag::{DagEdge, ServiceDag, TaskSpec};
use fog_appo::env::{EnvConfig, ScenarioConfig, Server, ServerKind, ServerPool};
use fog_appo::harness::small_dataset;
use fog_appo::learner::{clipped_term, ApoHyper, ExperienceBatch, ExperienceTuple, TrainingBatch};
use fog_appo::nn::{log_prob, softmax, Mlp};
use fog_appo::oracle::{run_baseline, Baseline};
use fog_appo::train::TrainingInputs;
use fog_appo::workload::{assign_weights, generate_dataset, generate_topology, TopologyParams, WeightRanges};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_pool<R: Rng>(rng: &mut R, m: usize) -> ServerPool {
    let servers = (0..m)
        .map(|i| Server {
            kind: if i == 0 { ServerKind::Iot } else { ServerKind::Fog },
            index: i,
            cores: rng.gen_range(1..=8),
            freq_hz: rng.gen_range(1e9..3e9),
            ram_bytes: rng.gen_range(100e6..1e9),
            position: (rng.gen_range(-5e5..5e5), rng.gen_range(-5e5..5e5)),
        })
        .collect();
    let mut bw = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in a + 1..m {
            let x = rng.gen_range(1e6..12e6);
            bw[a][b] = x;
            bw[b][a] = x;
        }
    }
    ServerPool::new(servers, bw, 2e8).unwrap()
}

/// Random DAG over ids `0..l` with edges only from lower to higher ids.
pub fn random_dag<R: Rng>(rng: &mut R, l: usize, edge_p: f64) -> ServiceDag {
    let tasks = (0..l)
        .map(|id| TaskSpec {
            id,
            cpu_cycles: rng.gen_range(1e7..3e8),
            ram_bytes: rng.gen_range(25e6..100e6),
            deadline_s: rng.gen_range(0.025..1.0),
        })
        .collect();
    let mut edges = Vec::new();
    for dst in 1..l {
        for src in 0..dst {
            if rng.gen_bool(edge_p) {
                edges.push(DagEdge {
                    src,
                    dst,
                    data_bytes: rng.gen_range(50e3..2e6),
                });
            }
        }
    }
    ServiceDag { id: 0, tasks, edges }
}

fn link_time(pool: &ServerPool, bytes: f64, a: usize, b: usize) -> f64 {
    if a == b {
        return 0.0;
    }
    let (p, q) = (pool.server(a).position, pool.server(b).position);
    let dist = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
    bytes / pool.bandwidth(a, b) + dist / pool.propagation_speed()
}

/// Per-task execution time: processing plus the slowest incoming transfer.
pub fn brute_exec_times(dag: &ServiceDag, pool: &ServerPool, x: &[usize]) -> Vec<f64> {
    dag.tasks
        .iter()
        .map(|t| {
            let proc = t.cpu_cycles / pool.server(x[t.id]).freq_hz;
            let input = dag
                .edges
                .iter()
                .filter(|e| e.dst == t.id)
                .map(|e| link_time(pool, e.data_bytes, x[e.src], x[t.id]))
                .fold(0.0, f64::max);
            proc + input
        })
        .collect()
}

fn node_weight(dag: &ServiceDag, pool: &ServerPool, v: usize) -> f64 {
    let m = pool.len() as f64;
    let inv: f64 = pool.servers().iter().map(|s| 1.0 / s.freq_hz).sum();
    dag.tasks[v].cpu_cycles * inv / m
}

fn edge_weight(pool: &ServerPool, bytes: f64) -> f64 {
    let m = pool.len();
    let mut total = 0.0;
    for a in 0..m {
        for b in 0..m {
            if a != b {
                total += link_time(pool, bytes, a, b);
            }
        }
    }
    total / (m * m) as f64
}

/// Heaviest entry-to-exit path by averaged costs, found by enumerating all paths.
pub fn brute_critical_path(dag: &ServiceDag, pool: &ServerPool) -> Vec<usize> {
    let l = dag.tasks.len();
    let has_parent: Vec<bool> = (0..l).map(|v| dag.edges.iter().any(|e| e.dst == v)).collect();
    let mut best: (f64, Vec<usize>) = (f64::NEG_INFINITY, Vec::new());
    fn walk(
        dag: &ServiceDag,
        pool: &ServerPool,
        path: &mut Vec<usize>,
        w: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        let v = *path.last().unwrap();
        let out: Vec<&DagEdge> = dag.edges.iter().filter(|e| e.src == v).collect();
        if out.is_empty() {
            if w > best.0 {
                *best = (w, path.clone());
            }
            return;
        }
        for e in out {
            path.push(e.dst);
            let nw = w + edge_weight(pool, e.data_bytes) + node_weight(dag, pool, e.dst);
            walk(dag, pool, path, nw, best);
            path.pop();
        }
    }
    for v in (0..l).filter(|&v| !has_parent[v]) {
        let mut path = vec![v];
        walk(dag, pool, &mut path, node_weight(dag, pool, v), &mut best);
    }
    best.1
}

pub fn brute_objective(dag: &ServiceDag, pool: &ServerPool, x: &[usize]) -> f64 {
    let exec = brute_exec_times(dag, pool, x);
    brute_critical_path(dag, pool).iter().map(|&v| exec[v]).sum()
}

/// Every constraint satisfied: RAM summed per server, deadlines per task.
pub fn brute_feasible(dag: &ServiceDag, pool: &ServerPool, x: &[usize]) -> bool {
    let exec = brute_exec_times(dag, pool, x);
    let mut ram = vec![0.0; pool.len()];
    for t in &dag.tasks {
        ram[x[t.id]] += t.ram_bytes;
    }
    ram.iter().enumerate().all(|(s, &r)| r <= pool.server(s).ram_bytes)
        && dag.tasks.iter().all(|t| exec[t.id] <= t.deadline_s)
}

/// All `M^L` assignments in lexicographic order.
pub fn all_assignments(m: usize, l: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = m.pow(l as u32);
    (0..total).map(move |mut k| {
        let mut x = vec![0; l];
        for slot in x.iter_mut().rev() {
            *slot = k % m;
            k /= m;
        }
        x
    })
}

/// Random transitions with occasional episode ends; one source batch per `seg` steps.
pub fn random_batch<R: Rng>(rng: &mut R, len: usize, seg: usize, dim: usize, actions: usize) -> TrainingBatch {
    let mut batches = Vec::new();
    let mut state: Arc<[f64]> = (0..dim).map(|_| rng.gen::<f64>()).collect();
    let mut left = len;
    let mut id = 0;
    while left > 0 {
        let n = seg.min(left);
        let mut tuples = Vec::with_capacity(n);
        for _ in 0..n {
            let next: Arc<[f64]> = (0..dim).map(|_| rng.gen::<f64>()).collect();
            tuples.push(ExperienceTuple {
                state: Arc::clone(&state),
                action: rng.gen_range(0..actions),
                reward: if rng.gen_bool(0.1) { -1.0 } else { -rng.gen_range(0.0..0.5) },
                next_state: Arc::clone(&next),
                behavior_log_prob: -rng.gen_range(0.1..2.5),
                done: rng.gen_bool(0.15),
                mask: None,
            });
            state = next;
        }
        batches.push(ExperienceBatch {
            actor_id: id % 3,
            policy_version: 0,
            tuples,
        });
        id += 1;
        left -= n;
    }
    TrainingBatch::from_batches(batches)
}

/// GAE(lambda) written as the forward sum `sum_l (gamma lambda)^l delta_{t+l}`,
/// stopping after the first cut at or beyond `t`.
pub fn textbook_gae(rewards: &[f64], values: &[f64], next_values: &[f64], dones: &[bool], cuts: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| rewards[t] + if dones[t] { 0.0 } else { gamma * next_values[t] } - values[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut a = 0.0;
            let mut w = 1.0;
            for k in t..n {
                a += w * delta[k];
                if cuts[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            a
        })
        .collect()
}

/// Importance-weighted advantage as an explicit double sum over `k` and the
/// product of trace weights `c_t .. c_{k-1}`.
pub fn double_sum_advantages(delta: &[f64], c: &[f64], cuts: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = delta.len();
    let end_of = |t: usize| (t..n).find(|&k| cuts[k]).unwrap_or(n - 1);
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for k in t..=end_of(t) {
                let mut prod = 1.0;
                for ci in &c[t..k] {
                    prod *= ci;
                }
                total += (lambda * gamma).powi((k - t) as i32) * prod * delta[k];
            }
            total
        })
        .collect()
}

/// Central differences of `f` at `x`.
pub fn finite_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over components.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Small services on an `m`-server generated pool, for quick training runs.
pub fn small_inputs(m: usize, seed: u64) -> TrainingInputs {
    let ds = generate_dataset(&small_dataset(seed)).unwrap();
    let scenario = ScenarioConfig::scaled(m, seed);
    TrainingInputs {
        train: Arc::new(ds.train.into_iter().map(Arc::new).collect()),
        eval: ds.eval.into_iter().map(Arc::new).collect(),
        pool: Arc::new(scenario.build_pool().unwrap()),
        env: scenario.env_config(),
    }
}

/// One instance drawn from the workload and scenario generators with
/// `2 <= M <= 4` servers and `1 <= L <= 6` tasks.
pub fn generated_instance(seed: u64) -> (ServiceDag, ServerPool) {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let m = r.gen_range(2..=4);
    let params = TopologyParams {
        num_tasks: r.gen_range(1..=6),
        fat: r.gen_range(0.3..1.0),
        density: r.gen_range(0.2..0.9),
        seed,
    };
    let skeleton = generate_topology(&params).dag;
    let dag = assign_weights(&skeleton, &WeightRanges::default(), seed);
    let pool = ScenarioConfig::scaled(m, seed).build_pool().unwrap();
    (dag, pool)
}

/// Greedy heuristic objective for one service.
pub fn greedy_objective(dag: &ServiceDag, pool: &ServerPool) -> f64 {
    let services = [Arc::new(dag.clone())];
    run_baseline(Baseline::Greedy, &services, Arc::new(pool.clone()), EnvConfig::default(), 0)
        .unwrap()
        .mean_exec_time_s
}

/// Expected objective of the uniform random policy, by full enumeration.
pub fn mean_random_objective(dag: &ServiceDag, pool: &ServerPool) -> f64 {
    let (m, l) = (pool.len(), dag.len());
    all_assignments(m, l).map(|x| brute_objective(dag, pool, &x)).sum::<f64>() / m.pow(l as u32) as f64
}

/// Server ids relabelled by `perm`: new server `k` is old server `perm[k]`.
pub fn permute_pool(pool: &ServerPool, perm: &[usize]) -> ServerPool {
    let m = pool.len();
    let servers = (0..m).map(|k| pool.server(perm[k]).clone()).collect();
    let bw = (0..m)
        .map(|a| (0..m).map(|b| if a == b { 0.0 } else { pool.bandwidth(perm[a], perm[b]) }).collect())
        .collect();
    ServerPool::new(servers, bw, pool.propagation_speed()).unwrap()
}

/// Sets each behaviour log-prob to `theta`'s, so every ratio is exactly 1.
pub fn on_policy(tb: &mut TrainingBatch, theta: &Mlp) {
    for t in &mut tb.tuples {
        let logits = theta.forward(&t.state).unwrap().output;
        t.behavior_log_prob = log_prob(&logits, None, t.action);
    }
}

/// Clipped surrogate plus entropy bonus, averaged over the batch.
pub fn policy_objective(tb: &TrainingBatch, theta: &Mlp, adv: &[f64], h: &ApoHyper) -> f64 {
    let n = tb.len() as f64;
    tb.tuples
        .iter()
        .zip(adv)
        .map(|(t, &a)| {
            let logits = theta.forward(&t.state).unwrap().output;
            let z = (log_prob(&logits, None, t.action) - t.behavior_log_prob).exp();
            let p = softmax(&logits, None);
            let ent: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
            clipped_term(z, a, h.clip_epsilon) + h.entropy_coef * ent
        })
        .sum::<f64>()
        / n
}

/// Half mean squared error of the value head.
pub fn value_loss(tb: &TrainingBatch, w: &Mlp, targets: &[f64]) -> f64 {
    tb.tuples
        .iter()
        .zip(targets)
        .map(|(t, y)| 0.5 * (w.forward(&t.state).unwrap().output[0] - y).powi(2))
        .sum::<f64>()
        / tb.len() as f64
}

//! Actors: environment rollouts under a policy snapshot, plus greedy and
//! sampled evaluation of a policy on a service set.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_channel::Sender;
use parking_lot::RwLock;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::ServiceDag;
use crate::env::{EnvConfig, EnvError, FogEnv, ServerPool};
use crate::learner::{ExperienceBatch, ExperienceTuple};
use crate::nn::{softmax, Mlp, NnError};
use crate::workload::stream_rng;

#[derive(Debug, Error)]
pub enum ActorError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("no services to schedule")]
    NoServices,
}

/// Immutable policy parameters tagged with the learner version that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub version: u64,
    pub policy: Arc<Mlp>,
}

/// Latest published policy; actors read it at batch boundaries.
#[derive(Debug)]
pub struct SnapshotCell(RwLock<Arc<PolicySnapshot>>);

impl SnapshotCell {
    pub fn new(initial: PolicySnapshot) -> Self {
        SnapshotCell(RwLock::new(Arc::new(initial)))
    }

    /// Replaces the current snapshot unless `snap` is older.
    pub fn publish(&self, snap: PolicySnapshot) {
        let mut cur = self.0.write();
        if snap.version >= cur.version {
            *cur = Arc::new(snap);
        }
    }

    pub fn latest(&self) -> Arc<PolicySnapshot> {
        Arc::clone(&self.0.read())
    }

    pub fn version(&self) -> u64 {
        self.0.read().version
    }
}

/// Endless stream over a service set, reshuffled every pass.
#[derive(Debug, Clone)]
pub struct ServiceQueue {
    services: Arc<Vec<Arc<ServiceDag>>>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl ServiceQueue {
    pub fn new(services: Arc<Vec<Arc<ServiceDag>>>, seed: u64) -> Result<Self, ActorError> {
        if services.is_empty() {
            return Err(ActorError::NoServices);
        }
        let mut q = ServiceQueue {
            order: (0..services.len()).collect(),
            services,
            pos: 0,
            rng: stream_rng(seed, 0x51ce),
        };
        q.order.shuffle(&mut q.rng);
        Ok(q)
    }

    pub fn next_service(&mut self) -> Arc<ServiceDag> {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let s = Arc::clone(&self.services[self.order[self.pos]]);
        self.pos += 1;
        s
    }
}

/// Draws an action from the policy and returns it with its log-probability.
///
/// In greedy mode the most probable feasible action is taken, with exact ties
/// broken uniformly at random.
pub fn sample_action<R: Rng + ?Sized>(
    policy: &Mlp,
    state: &[f64],
    mask: Option<&[bool]>,
    rng: &mut R,
    greedy: bool,
) -> Result<(usize, f64), NnError> {
    let logits = policy.forward(state)?.output;
    let probs = softmax(&logits, mask);
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let action = if greedy {
        let best = (0..logits.len())
            .filter(|&j| allowed(j))
            .map(|j| logits[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> = (0..logits.len())
            .filter(|&j| allowed(j) && logits[j] == best)
            .collect();
        ties[rng.gen_range(0..ties.len())]
    } else {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = None;
        for (j, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                pick = Some(j);
                if u < acc {
                    break;
                }
            }
        }
        pick.expect("softmax has positive mass")
    };
    Ok((action, probs[action].ln()))
}

/// Running counters for one actor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActorStats {
    pub steps: u64,
    pub batches: u64,
    pub episodes: u64,
    /// Tasks across completed episodes.
    pub episode_tasks: u64,
    pub successes: u64,
    pub sum_exec_time: f64,
}

pub struct Actor {
    pub id: usize,
    env: FogEnv,
    queue: ServiceQueue,
    rng: ChaCha8Rng,
    state: Option<(Arc<[f64]>, Option<Arc<[bool]>>)>,
    pub stats: ActorStats,
}

impl Actor {
    pub fn new(id: usize, env: FogEnv, queue: ServiceQueue, seed: u64) -> Self {
        Actor {
            id,
            env,
            queue,
            rng: stream_rng(seed, 0xac70_0000 + id as u64),
            state: None,
            stats: ActorStats::default(),
        }
    }

    pub fn env(&self) -> &FogEnv {
        &self.env
    }

    fn current_mask(&self) -> Result<Option<Arc<[bool]>>, EnvError> {
        Ok(if self.env.config().mask_infeasible {
            Some(Arc::from(self.env.action_mask()?))
        } else {
            None
        })
    }

    fn start_episode(&mut self) -> Result<(), EnvError> {
        let s = self.env.reset(self.queue.next_service())?;
        let mask = self.current_mask()?;
        self.state = Some((Arc::from(s.0), mask));
        Ok(())
    }

    /// Tasks placed so far in the episode still in progress.
    pub fn in_flight_tasks(&self) -> u64 {
        match (self.env.plan(), self.env.is_done()) {
            (Some(plan), false) => {
                let placed = self.env.raw_state().map(|r| r.task[6]).unwrap_or(0.0);
                (placed * plan.order.len() as f64).round() as u64
            }
            _ => 0,
        }
    }

    /// Runs `n` steps under `snap`; episodes continue across calls.
    pub fn collect(&mut self, snap: &PolicySnapshot, n: usize) -> Result<ExperienceBatch, ActorError> {
        let mut tuples = Vec::with_capacity(n);
        for _ in 0..n {
            if self.state.is_none() {
                self.start_episode()?;
            }
            let (state, mask) = self.state.take().expect("episode started");
            let (action, logp) =
                sample_action(&snap.policy, &state, mask.as_deref(), &mut self.rng, false)?;
            let out = self.env.step(action)?;
            let next_state: Arc<[f64]> = Arc::from(out.next_state.0);
            tuples.push(ExperienceTuple {
                state,
                action,
                reward: out.reward,
                next_state: Arc::clone(&next_state),
                behavior_log_prob: logp,
                done: out.done,
                mask,
            });
            self.stats.steps += 1;
            if out.done {
                let sum = self.env.summary().expect("episode finished");
                self.stats.episodes += 1;
                self.stats.episode_tasks += sum.tasks as u64;
                self.stats.successes += sum.successes as u64;
                self.stats.sum_exec_time += sum.total;
            } else {
                let mask = self.current_mask()?;
                self.state = Some((next_state, mask));
            }
        }
        self.stats.batches += 1;
        Ok(ExperienceBatch {
            actor_id: self.id,
            policy_version: snap.version,
            tuples,
        })
    }
}

/// Shared cap on environment steps across all actors.
#[derive(Debug)]
pub struct StepBudget {
    total: u64,
    claimed: AtomicU64,
    produced: AtomicU64,
}

impl StepBudget {
    pub fn new(total: u64) -> Self {
        StepBudget {
            total,
            claimed: AtomicU64::new(0),
            produced: AtomicU64::new(0),
        }
    }

    /// Reserves up to `n` steps and returns how many were granted; 0 once the
    /// budget is used up.
    pub fn claim(&self, n: u64) -> u64 {
        let prev = self.claimed.fetch_add(n, Ordering::Relaxed);
        self.total.saturating_sub(prev).min(n)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn record(&self, n: u64) {
        self.produced.fetch_add(n, Ordering::Relaxed);
    }

    /// Steps actually collected so far.
    pub fn produced(&self) -> u64 {
        self.produced.load(Ordering::Relaxed)
    }
}

/// Collects batches until the budget runs out or the learner hangs up.
pub fn actor_loop(
    actor: &mut Actor,
    cell: &SnapshotCell,
    outbox: &Sender<ExperienceBatch>,
    rollout_len: usize,
    budget: &StepBudget,
) -> Result<(), ActorError> {
    loop {
        let n = budget.claim(rollout_len as u64) as usize;
        if n == 0 {
            break;
        }
        let snap = cell.latest();
        let eb = actor.collect(&snap, n)?;
        budget.record(eb.tuples.len() as u64);
        if outbox.send(eb).is_err() {
            break;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub services: usize,
    pub mean_exec_time_s: f64,
    /// Fraction of placed tasks that met their deadline.
    pub deadline_hit_rate: f64,
    /// Fraction of placed tasks that met every constraint.
    pub success_rate: f64,
}

/// Schedules every service once with `policy` and averages the outcome.
pub fn evaluate(
    policy: &Mlp,
    services: &[Arc<ServiceDag>],
    pool: Arc<ServerPool>,
    cfg: EnvConfig,
    mode: EvalMode,
    seed: u64,
) -> Result<EvalStats, ActorError> {
    if services.is_empty() {
        return Err(ActorError::NoServices);
    }
    let mut env = FogEnv::new(pool, cfg);
    let mut rng = stream_rng(seed, 0xe7a1);
    let (mut total, mut tasks, mut hits, mut ok) = (0.0, 0usize, 0usize, 0usize);
    for svc in services {
        let mut state = env.reset(Arc::clone(svc))?;
        loop {
            let mask = if cfg.mask_infeasible {
                Some(env.action_mask()?)
            } else {
                None
            };
            let (a, _) = sample_action(policy, &state.0, mask.as_deref(), &mut rng, mode == EvalMode::Greedy)?;
            let out = env.step(a)?;
            tasks += 1;
            hits += usize::from(out.info.deadline_met);
            ok += usize::from(out.info.violation.is_none());
            if out.done {
                total += out.info.total.expect("final step reports total");
                break;
            }
            state = out.next_state;
        }
    }
    Ok(EvalStats {
        services: services.len(),
        mean_exec_time_s: total / services.len() as f64,
        deadline_hit_rate: hits as f64 / tasks as f64,
        success_rate: ok as f64 / tasks as f64,
    })
}

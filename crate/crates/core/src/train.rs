//! Training runs: wires actors, the master buffer and the learner together,
//! either on threads or round-robin on the calling thread.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{
    actor_loop, evaluate, Actor, ActorError, ActorStats, EvalMode, EvalStats, ServiceQueue,
    SnapshotCell, StepBudget,
};
use crate::dag::ServiceDag;
use crate::env::{state_len, EnvConfig, FogEnv, ServerPool};
use crate::learner::{
    ingest, learner_loop, ApoHyper, Learner, LearnerError, MasterBuffer, RoundStats,
};
use crate::workload::{write_json, WorkloadError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("actor thread panicked")]
    ActorPanicked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub actors: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Round-robin actors on one thread; fully deterministic for a seed.
    pub serial: bool,
    /// Hidden width of the policy and value networks.
    pub hidden: usize,
    pub hyper: ApoHyper,
    /// Evaluate every this many learner rounds; 0 evaluates only at start and end.
    pub eval_every: u64,
    pub eval_mode: EvalMode,
    /// Evaluate on at most this many held-out services.
    pub eval_limit: Option<usize>,
    /// Master buffer capacity in experience batches.
    pub buffer_capacity: usize,
    pub checkpoint_every: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub train_log_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            actors: 1,
            total_steps: 150_000,
            seed: 0,
            serial: false,
            hidden: 64,
            hyper: ApoHyper::default(),
            eval_every: 10,
            eval_mode: EvalMode::Greedy,
            eval_limit: None,
            buffer_capacity: 256,
            checkpoint_every: None,
            checkpoint_dir: None,
            metrics_path: None,
            train_log_path: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.hyper.validate()?;
        if self.actors == 0 {
            return Err(TrainError::Config("need at least one actor".into()));
        }
        if self.hidden == 0 {
            return Err(TrainError::Config("hidden width must be >= 1".into()));
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            return Err(TrainError::Config("checkpoint_every needs checkpoint_dir".into()));
        }
        Ok(())
    }
}

/// Services and infrastructure a run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct TrainingInputs {
    pub train: Arc<Vec<Arc<ServiceDag>>>,
    pub eval: Vec<Arc<ServiceDag>>,
    pub pool: Arc<ServerPool>,
    pub env: EnvConfig,
}

/// One evaluation point of the convergence curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Seconds since the run started; 0 in serial runs so output is reproducible.
    pub wall_time: f64,
    pub env_steps: u64,
    pub version: u64,
    pub eval_mean_exec_time_s: f64,
    pub deadline_hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub wall_time: f64,
    pub env_steps: u64,
    /// Mean version lag of the batches consumed in the round.
    pub mean_policy_lag: f64,
    #[serde(flatten)]
    pub stats: RoundStats,
}

#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub learner: Learner,
    pub metrics: Vec<MetricsRow>,
    pub rounds: Vec<RoundLog>,
    pub actor_stats: Vec<ActorStats>,
    pub env_steps: u64,
    /// Time until the last actor finished collecting.
    pub collection_time_s: f64,
    pub wall_time_s: f64,
    pub final_eval: EvalStats,
}

impl TrainingReport {
    pub fn throughput(&self) -> f64 {
        self.env_steps as f64 / self.collection_time_s
    }
}

struct Recorder<'a> {
    cfg: &'a RunConfig,
    inputs: &'a TrainingInputs,
    eval_set: &'a [Arc<ServiceDag>],
    start: Instant,
    metrics: Vec<MetricsRow>,
    rounds: Vec<RoundLog>,
    metrics_out: Option<BufWriter<File>>,
    log_out: Option<BufWriter<File>>,
    last_eval: Option<(u64, EvalStats)>,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a RunConfig, inputs: &'a TrainingInputs, eval_set: &'a [Arc<ServiceDag>]) -> Result<Self, TrainError> {
        let open = |p: &Option<PathBuf>| -> Result<Option<BufWriter<File>>, TrainError> {
            Ok(match p {
                Some(p) => Some(BufWriter::new(File::create(p)?)),
                None => None,
            })
        };
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Recorder {
            cfg,
            inputs,
            eval_set,
            start: Instant::now(),
            metrics: Vec::new(),
            rounds: Vec::new(),
            metrics_out: open(&cfg.metrics_path)?,
            log_out: open(&cfg.train_log_path)?,
            last_eval: None,
        })
    }

    fn clock(&self) -> f64 {
        if self.cfg.serial {
            0.0
        } else {
            self.start.elapsed().as_secs_f64()
        }
    }

    fn eval(&mut self, learner: &Learner, env_steps: u64) -> Result<EvalStats, TrainError> {
        if let Some((v, s)) = self.last_eval {
            if v == learner.version {
                return Ok(s);
            }
        }
        let stats = evaluate(
            &learner.policy,
            self.eval_set,
            Arc::clone(&self.inputs.pool),
            self.inputs.env,
            self.cfg.eval_mode,
            self.cfg.seed,
        )?;
        let row = MetricsRow {
            wall_time: self.clock(),
            env_steps,
            version: learner.version,
            eval_mean_exec_time_s: stats.mean_exec_time_s,
            deadline_hit_rate: stats.deadline_hit_rate,
        };
        if let Some(w) = &mut self.metrics_out {
            serde_json::to_writer(&mut *w, &row).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        log::info!(
            "version {} steps {} eval mean {:.4}s hit rate {:.3}",
            row.version,
            env_steps,
            row.eval_mean_exec_time_s,
            row.deadline_hit_rate
        );
        self.metrics.push(row);
        self.last_eval = Some((learner.version, stats));
        Ok(stats)
    }

    fn checkpoint(&self, learner: &Learner, name: &str) -> Result<(), TrainError> {
        if let Some(dir) = &self.cfg.checkpoint_dir {
            write_json(&dir.join(name), &learner.checkpoint())?;
            write_json(&dir.join("policy.json"), &learner.policy.to_checkpoint(learner.version))?;
        }
        Ok(())
    }

    fn on_round(&mut self, learner: &Learner, stats: &RoundStats, env_steps: u64) -> Result<(), TrainError> {
        let consumed = learner.version - 1;
        let lag = stats
            .sources
            .iter()
            .map(|s| consumed.saturating_sub(s.policy_version) as f64)
            .sum::<f64>()
            / stats.sources.len().max(1) as f64;
        let entry = RoundLog {
            wall_time: self.clock(),
            env_steps,
            mean_policy_lag: lag,
            stats: stats.clone(),
        };
        if let Some(w) = &mut self.log_out {
            serde_json::to_writer(&mut *w, &entry).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        self.rounds.push(entry);
        if self.cfg.eval_every > 0 && learner.version % self.cfg.eval_every == 0 {
            self.eval(learner, env_steps)?;
        }
        if let Some(k) = self.cfg.checkpoint_every {
            if k > 0 && learner.version % k == 0 {
                self.checkpoint(learner, &format!("checkpoint_v{:06}.json", learner.version))?;
            }
        }
        Ok(())
    }
}

fn build_actors(cfg: &RunConfig, inputs: &TrainingInputs) -> Result<Vec<Actor>, TrainError> {
    (0..cfg.actors)
        .map(|id| {
            let env = FogEnv::new(Arc::clone(&inputs.pool), inputs.env);
            let seed = cfg.seed.wrapping_add(1 + id as u64);
            let queue = ServiceQueue::new(Arc::clone(&inputs.train), seed)?;
            Ok(Actor::new(id, env, queue, seed))
        })
        .collect()
}

/// Trains from scratch until `total_steps` environment steps are collected.
pub fn run_training(cfg: &RunConfig, inputs: &TrainingInputs) -> Result<TrainingReport, TrainError> {
    let learner = Learner::new(
        state_len(inputs.pool.len()),
        inputs.pool.len(),
        cfg.hidden,
        cfg.hyper,
        cfg.seed,
    );
    run_training_from(cfg, inputs, learner)
}

/// Continues training `learner` (e.g. restored from a checkpoint).
pub fn run_training_from(
    cfg: &RunConfig,
    inputs: &TrainingInputs,
    mut learner: Learner,
) -> Result<TrainingReport, TrainError> {
    cfg.validate()?;
    if learner.policy.input_size() != state_len(inputs.pool.len()) {
        return Err(TrainError::Config("policy input does not match the server pool".into()));
    }
    let eval_set = match cfg.eval_limit {
        Some(k) => &inputs.eval[..k.min(inputs.eval.len())],
        None => &inputs.eval[..],
    };
    if eval_set.is_empty() {
        return Err(TrainError::Actor(ActorError::NoServices));
    }
    let mut rec = Recorder::new(cfg, inputs, eval_set)?;
    let mut actors = build_actors(cfg, inputs)?;
    let cell = SnapshotCell::new(learner.snapshot());
    let budget = StepBudget::new(cfg.total_steps);
    let n = cfg.hyper.rollout_len;
    rec.eval(&learner, 0)?;

    let collection_time_s;
    if cfg.serial {
        let mut mb = MasterBuffer::new(cfg.buffer_capacity);
        'outer: loop {
            for actor in actors.iter_mut() {
                let k = budget.claim(n as u64) as usize;
                if k == 0 {
                    break 'outer;
                }
                let eb = actor.collect(&cell.latest(), k)?;
                budget.record(eb.tuples.len() as u64);
                let steps = budget.produced();
                ingest(&mut learner, &mut mb, eb, &cell, &mut |l: &Learner, s: &RoundStats| {
                    rec.on_round(l, s, steps)
                })?;
            }
        }
        collection_time_s = rec.start.elapsed().as_secs_f64();
    } else {
        let (tx, rx) = crossbeam_channel::unbounded();
        let start = rec.start;
        let (learned, finished) = std::thread::scope(|scope| {
            let handles: Vec<_> = actors
                .iter_mut()
                .map(|actor| {
                    let tx = tx.clone();
                    let (cell, budget) = (&cell, &budget);
                    scope.spawn(move || {
                        let r = actor_loop(actor, cell, &tx, n, budget);
                        (r, start.elapsed().as_secs_f64())
                    })
                })
                .collect();
            drop(tx);
            let learned = learner_loop(&mut learner, &rx, cfg.buffer_capacity, &cell, |l: &Learner, s: &RoundStats| {
                rec.on_round(l, s, budget.produced())
            });
            // Unblocks actors if the learner stopped early.
            drop(rx);
            let finished: Vec<_> = handles.into_iter().map(|h| h.join()).collect();
            (learned, finished)
        });
        let exit = learned?;
        log::debug!("learner exit: {exit:?}");
        let mut latest: f64 = 0.0;
        for f in finished {
            let (r, t) = f.map_err(|_| TrainError::ActorPanicked)?;
            r?;
            latest = latest.max(t);
        }
        collection_time_s = latest;
    }

    let env_steps = budget.produced();
    let final_eval = rec.eval(&learner, env_steps)?;
    rec.checkpoint(&learner, "final.json")?;
    if let Some(w) = &mut rec.log_out {
        w.flush()?;
    }
    let wall_time_s = rec.start.elapsed().as_secs_f64();
    Ok(TrainingReport {
        actor_stats: actors.iter().map(|a| a.stats.clone()).collect(),
        metrics: std::mem::take(&mut rec.metrics),
        rounds: std::mem::take(&mut rec.rounds),
        learner,
        env_steps,
        collection_time_s,
        wall_time_s,
        final_eval,
    })
}

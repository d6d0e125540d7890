//! APPO learner: master buffer, V-trace corrected GAE, PPO clipped policy
//! gradient, value regression and policy publication.

use std::collections::VecDeque;
use std::sync::Arc;

use crossbeam_channel::{Receiver, TryRecvError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{PolicySnapshot, SnapshotCell};
use crate::nn::{log_prob, softmax, AdamState, Activations, Mlp, MlpCheckpoint, NnError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearnerError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("importance ratio for transition {0} is not finite")]
    NonFiniteRatio(usize),
    #[error("training batch has {got} transitions, need at least {need}")]
    BatchTooSmall { got: usize, need: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceTuple {
    pub state: Arc<[f64]>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Arc<[f64]>,
    /// `log kappa(a | s)` under the behaviour policy that chose the action.
    pub behavior_log_prob: f64,
    pub done: bool,
    /// Feasible-action mask in effect when the action was sampled.
    pub mask: Option<Arc<[bool]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceBatch {
    pub actor_id: usize,
    pub policy_version: u64,
    pub tuples: Vec<ExperienceTuple>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSource {
    pub actor_id: usize,
    pub policy_version: u64,
    pub len: usize,
}

/// Transitions concatenated FIFO from whole experience batches.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingBatch {
    pub tuples: Vec<ExperienceTuple>,
    /// True on the last transition of each source batch.
    pub segment_end: Vec<bool>,
    pub sources: Vec<BatchSource>,
}

impl TrainingBatch {
    pub fn from_batches(batches: impl IntoIterator<Item = ExperienceBatch>) -> Self {
        let mut tb = TrainingBatch::default();
        for eb in batches {
            let len = eb.tuples.len();
            if len == 0 {
                continue;
            }
            tb.sources.push(BatchSource {
                actor_id: eb.actor_id,
                policy_version: eb.policy_version,
                len,
            });
            tb.segment_end.extend((0..len).map(|i| i + 1 == len));
            tb.tuples.extend(eb.tuples);
        }
        tb
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Where the advantage recursion must stop: episode ends and batch ends.
    pub fn cuts(&self) -> Vec<bool> {
        self.tuples
            .iter()
            .zip(&self.segment_end)
            .map(|(t, &end)| t.done || end)
            .collect()
    }
}

/// FIFO queue of experience batches awaiting training.
///
/// Bounded by `capacity` batches; when full, the oldest batch is evicted.
#[derive(Debug, Clone, Default)]
pub struct MasterBuffer {
    queue: VecDeque<ExperienceBatch>,
    transitions: usize,
    capacity: usize,
    evicted: usize,
}

impl MasterBuffer {
    pub fn new(capacity: usize) -> Self {
        MasterBuffer {
            capacity: capacity.max(1),
            ..Default::default()
        }
    }

    pub fn push(&mut self, eb: ExperienceBatch) {
        self.transitions += eb.tuples.len();
        self.queue.push_back(eb);
        while self.queue.len() > self.capacity {
            let old = self.queue.pop_front().expect("non-empty");
            self.transitions -= old.tuples.len();
            self.evicted += 1;
        }
    }

    pub fn transitions(&self) -> usize {
        self.transitions
    }

    pub fn batches(&self) -> usize {
        self.queue.len()
    }

    /// Batches dropped for capacity or staleness.
    pub fn evicted(&self) -> usize {
        self.evicted
    }

    /// Drops batches whose policy lags `current` by more than `max_lag` versions.
    pub fn drop_stale(&mut self, current: u64, max_lag: u64) {
        let before = self.queue.len();
        let mut kept = 0;
        self.queue.retain(|eb| {
            let keep = current.saturating_sub(eb.policy_version) <= max_lag;
            if keep {
                kept += eb.tuples.len();
            }
            keep
        });
        self.transitions = kept;
        self.evicted += before - self.queue.len();
    }

    /// Pops whole batches FIFO until at least `size` transitions are gathered.
    pub fn build_train_batch(&mut self, size: usize) -> Option<TrainingBatch> {
        if self.transitions < size || self.queue.is_empty() {
            return None;
        }
        let mut taken = Vec::new();
        let mut n = 0;
        while n < size {
            let eb = self.queue.pop_front()?;
            n += eb.tuples.len();
            taken.push(eb);
        }
        self.transitions -= n;
        Some(TrainingBatch::from_batches(taken))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApoHyper {
    pub lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip_epsilon: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
    pub gradient_steps: usize,
    pub rollout_len: usize,
    pub train_batch: usize,
    pub entropy_coef: f64,
    /// Batches whose policy lags by more than this many versions are dropped.
    pub max_version_lag: Option<u64>,
}

impl Default for ApoHyper {
    fn default() -> Self {
        ApoHyper {
            lr: 0.01,
            gamma: 0.99,
            lambda: 0.95,
            clip_epsilon: 0.2,
            rho_bar: 1.0,
            c_bar: 1.0,
            gradient_steps: 2,
            rollout_len: 64,
            train_batch: 512,
            entropy_coef: 0.0,
            max_version_lag: None,
        }
    }
}

impl ApoHyper {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::InvalidHyper(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1]");
        }
        if !(self.clip_epsilon > 0.0) {
            return bad("clip epsilon must be positive");
        }
        if !(self.c_bar > 0.0 && self.rho_bar >= self.c_bar) {
            return bad("need rho_bar >= c_bar > 0");
        }
        if self.rollout_len == 0 || self.train_batch == 0 {
            return bad("rollout length and train batch must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// Clipped importance weights and raw ratios, one entry per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    pub rho: Vec<f64>,
    pub c: Vec<f64>,
    /// Unclipped `pi_t(a|s) / kappa(a|s)`.
    pub ratio: Vec<f64>,
}

struct PolicyPass {
    acts: Vec<Activations>,
    log_probs: Vec<f64>,
}

fn policy_pass(tb: &TrainingBatch, theta: &Mlp) -> Result<PolicyPass, NnError> {
    let mut acts = Vec::with_capacity(tb.len());
    let mut log_probs = Vec::with_capacity(tb.len());
    for t in &tb.tuples {
        let a = theta.forward(&t.state)?;
        log_probs.push(log_prob(&a.output, t.mask.as_deref(), t.action));
        acts.push(a);
    }
    Ok(PolicyPass { acts, log_probs })
}

fn weights_from_log_probs(
    tb: &TrainingBatch,
    log_probs: &[f64],
    hyper: &ApoHyper,
) -> Result<ImportanceWeights, LearnerError> {
    let mut w = ImportanceWeights {
        rho: Vec::with_capacity(tb.len()),
        c: Vec::with_capacity(tb.len()),
        ratio: Vec::with_capacity(tb.len()),
    };
    for (i, (t, &lp)) in tb.tuples.iter().zip(log_probs).enumerate() {
        let z = (lp - t.behavior_log_prob).exp();
        if !z.is_finite() || !t.behavior_log_prob.is_finite() {
            return Err(LearnerError::NonFiniteRatio(i));
        }
        w.rho.push(hyper.rho_bar.min(z));
        w.c.push(hyper.c_bar.min(z));
        w.ratio.push(z);
    }
    Ok(w)
}

pub fn is_weights(
    tb: &TrainingBatch,
    theta: &Mlp,
    hyper: &ApoHyper,
) -> Result<ImportanceWeights, LearnerError> {
    let pass = policy_pass(tb, theta)?;
    weights_from_log_probs(tb, &pass.log_probs, hyper)
}

/// Importance-sampled TD errors; `next_values` is ignored at episode ends.
pub fn vtrace_td(
    tb: &TrainingBatch,
    values: &[f64],
    next_values: &[f64],
    rho: &[f64],
    gamma: f64,
) -> Vec<f64> {
    tb.tuples
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let next = if t.done { 0.0 } else { next_values[i] };
            rho[i] * (t.reward + gamma * next - values[i])
        })
        .collect()
}

/// `A_t = delta_t + lambda * gamma * c_t * A_{t+1}`, restarting after every cut.
pub fn vtrace_gae(delta: &[f64], c: &[f64], cuts: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let mut adv = vec![0.0; delta.len()];
    let mut acc = 0.0;
    for t in (0..delta.len()).rev() {
        if cuts[t] {
            acc = 0.0;
        }
        acc = delta[t] + lambda * gamma * c[t] * acc;
        adv[t] = acc;
    }
    adv
}

/// Clipped surrogate term for one transition.
pub fn clipped_term(ratio: f64, adv: f64, epsilon: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * adv)
}

/// Whether the unclipped branch is the minimum, i.e. the ratio carries gradient.
fn unclipped_active(ratio: f64, adv: f64, epsilon: f64) -> bool {
    ratio * adv <= ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * adv
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub grad: Vec<f64>,
    /// Objective (policy) or loss (value) at the evaluated parameters.
    pub value: f64,
}

fn policy_gradient_from_pass(
    tb: &TrainingBatch,
    theta: &Mlp,
    pass: &PolicyPass,
    adv: &[f64],
    hyper: &ApoHyper,
) -> Result<Gradient, LearnerError> {
    let n = tb.len() as f64;
    let mut grad = vec![0.0; theta.num_params()];
    let mut objective = 0.0;
    for (i, t) in tb.tuples.iter().enumerate() {
        let z = (pass.log_probs[i] - t.behavior_log_prob).exp();
        if !z.is_finite() {
            return Err(LearnerError::NonFiniteRatio(i));
        }
        objective += clipped_term(z, adv[i], hyper.clip_epsilon);
        let probs = softmax(&pass.acts[i].output, t.mask.as_deref());
        let mut g_out = vec![0.0; probs.len()];
        if unclipped_active(z, adv[i], hyper.clip_epsilon) {
            // d(Z * A)/d logits = A * Z * (onehot(a) - pi)
            let k = adv[i] * z / n;
            for (j, p) in probs.iter().enumerate() {
                g_out[j] = k * (f64::from(u8::from(j == t.action)) - p);
            }
        }
        if hyper.entropy_coef != 0.0 {
            let h = entropy(&probs);
            objective += hyper.entropy_coef * h;
            for (j, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    g_out[j] -= hyper.entropy_coef / n * p * (p.ln() + h);
                }
            }
        }
        theta.backward(&t.state, &pass.acts[i], &g_out, &mut grad)?;
    }
    Ok(Gradient {
        grad,
        value: objective / n,
    })
}

/// Ascent direction of the clipped objective, with advantages held constant.
pub fn ppo_policy_gradient(
    tb: &TrainingBatch,
    theta: &Mlp,
    adv: &[f64],
    hyper: &ApoHyper,
) -> Result<Gradient, LearnerError> {
    let pass = policy_pass(tb, theta)?;
    policy_gradient_from_pass(tb, theta, &pass, adv, hyper)
}

/// Gradient of `(1/|TB|) * sum 0.5 * (V_w(s) - target)^2`.
pub fn value_gradient(tb: &TrainingBatch, w: &Mlp, targets: &[f64]) -> Result<Gradient, LearnerError> {
    let n = tb.len() as f64;
    let mut grad = vec![0.0; w.num_params()];
    let mut loss = 0.0;
    for (t, &target) in tb.tuples.iter().zip(targets) {
        let act = w.forward(&t.state)?;
        let residual = act.output[0] - target;
        loss += 0.5 * residual * residual;
        w.backward(&t.state, &act, &[residual / n], &mut grad)?;
    }
    Ok(Gradient { grad, value: loss / n })
}

/// `V(s_i)` and `V(s_{i+1})` for every transition; the latter is 0 at episode ends.
pub fn state_values(tb: &TrainingBatch, w: &Mlp) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    let values: Vec<f64> = tb
        .tuples
        .iter()
        .map(|t| Ok(w.forward(&t.state)?.output[0]))
        .collect::<Result<_, NnError>>()?;
    let mut next = Vec::with_capacity(tb.len());
    for (i, t) in tb.tuples.iter().enumerate() {
        next.push(if t.done {
            0.0
        } else if i + 1 < tb.len() && Arc::ptr_eq(&t.next_state, &tb.tuples[i + 1].state) {
            values[i + 1]
        } else {
            w.forward(&t.next_state)?.output[0]
        });
    }
    Ok((values, next))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub version: u64,
    pub transitions: usize,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    /// Negated clipped objective at the first gradient step.
    pub policy_loss: f64,
    pub value_loss: f64,
    pub sources: Vec<BatchSource>,
}

/// Learner-owned parameters and optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub policy: Mlp,
    pub value: Mlp,
    pub policy_adam: AdamState,
    pub value_adam: AdamState,
    pub hyper: ApoHyper,
    pub version: u64,
}

impl Learner {
    /// Fresh networks; the policy head starts at zero so version 0 is uniform.
    pub fn new(state_len: usize, actions: usize, hidden: usize, hyper: ApoHyper, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = Mlp::init(state_len, hidden, actions, &mut rng);
        policy.zero_output_layer();
        let value = Mlp::init(state_len, hidden, 1, &mut rng);
        Self::from_parts(policy, value, hyper)
    }

    pub fn from_parts(policy: Mlp, value: Mlp, hyper: ApoHyper) -> Self {
        Learner {
            policy_adam: AdamState::new(policy.num_params(), hyper.lr),
            value_adam: AdamState::new(value.num_params(), hyper.lr),
            policy,
            value,
            hyper,
            version: 0,
        }
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            version: self.version,
            policy: Arc::new(self.policy.clone()),
        }
    }

    /// Runs the configured number of gradient steps on `tb` and bumps the version.
    pub fn optimize_model(&mut self, tb: &TrainingBatch) -> Result<RoundStats, LearnerError> {
        if tb.len() < self.hyper.train_batch {
            return Err(LearnerError::BatchTooSmall {
                got: tb.len(),
                need: self.hyper.train_batch,
            });
        }
        let h = self.hyper;
        let cuts = tb.cuts();
        let mut stats = RoundStats {
            version: self.version,
            transitions: tb.len(),
            mean_reward: tb.tuples.iter().map(|t| t.reward).sum::<f64>() / tb.len() as f64,
            mean_abs_advantage: f64::NAN,
            policy_loss: f64::NAN,
            value_loss: f64::NAN,
            sources: tb.sources.clone(),
        };
        for step in 0..h.gradient_steps {
            let pass = policy_pass(tb, &self.policy)?;
            let w = weights_from_log_probs(tb, &pass.log_probs, &h)?;
            let (values, next_values) = state_values(tb, &self.value)?;
            let delta = vtrace_td(tb, &values, &next_values, &w.rho, h.gamma);
            let adv = vtrace_gae(&delta, &w.c, &cuts, h.gamma, h.lambda);
            let targets: Vec<f64> = adv.iter().zip(&values).map(|(a, v)| a + v).collect();

            let pg = policy_gradient_from_pass(tb, &self.policy, &pass, &adv, &h)?;
            let vg = value_gradient(tb, &self.value, &targets)?;
            if step == 0 {
                stats.mean_abs_advantage = adv.iter().map(|a| a.abs()).sum::<f64>() / adv.len() as f64;
                stats.policy_loss = -pg.value;
                stats.value_loss = vg.value;
            }
            let ascent: Vec<f64> = pg.grad.iter().map(|g| -g).collect();
            self.policy_adam.step(self.policy.params_mut(), &ascent)?;
            self.value_adam.step(self.value.params_mut(), &vg.grad)?;
        }
        self.version += 1;
        stats.version = self.version;
        Ok(stats)
    }

    pub fn checkpoint(&self) -> LearnerCheckpoint {
        LearnerCheckpoint {
            version: self.version,
            policy: self.policy.to_checkpoint(self.version),
            value: self.value.to_checkpoint(self.version),
            policy_adam: self.policy_adam.clone(),
            value_adam: self.value_adam.clone(),
            hyper: self.hyper,
        }
    }

    pub fn from_checkpoint(c: &LearnerCheckpoint) -> Result<Self, NnError> {
        Ok(Learner {
            policy: Mlp::from_checkpoint(&c.policy)?,
            value: Mlp::from_checkpoint(&c.value)?,
            policy_adam: c.policy_adam.clone(),
            value_adam: c.value_adam.clone(),
            hyper: c.hyper,
            version: c.version,
        })
    }
}

/// Networks, optimiser state and version; written every K rounds and at shutdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerCheckpoint {
    pub version: u64,
    pub policy: MlpCheckpoint,
    pub value: MlpCheckpoint,
    pub policy_adam: AdamState,
    pub value_adam: AdamState,
    pub hyper: ApoHyper,
}

/// Pushes `eb` and trains while the buffer holds a full training batch.
/// Publishes a snapshot after every round and hands the stats to `on_round`.
pub fn ingest<F, E>(
    learner: &mut Learner,
    mb: &mut MasterBuffer,
    eb: ExperienceBatch,
    publish: &SnapshotCell,
    on_round: &mut F,
) -> Result<(), E>
where
    F: FnMut(&Learner, &RoundStats) -> Result<(), E>,
    E: From<LearnerError>,
{
    mb.push(eb);
    train_ready(learner, mb, publish, on_round)
}

fn train_ready<F, E>(
    learner: &mut Learner,
    mb: &mut MasterBuffer,
    publish: &SnapshotCell,
    on_round: &mut F,
) -> Result<(), E>
where
    F: FnMut(&Learner, &RoundStats) -> Result<(), E>,
    E: From<LearnerError>,
{
    loop {
        if let Some(lag) = learner.hyper.max_version_lag {
            mb.drop_stale(learner.version, lag);
        }
        let Some(tb) = mb.build_train_batch(learner.hyper.train_batch) else {
            return Ok(());
        };
        let stats = learner.optimize_model(&tb)?;
        publish.publish(learner.snapshot());
        on_round(learner, &stats)?;
    }
}

/// How the learner loop ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LearnerExit {
    pub rounds: u64,
    pub batches_received: usize,
    pub evicted: usize,
}

/// Consumes experience batches until every sender hangs up.
///
/// New batches are drained from the inbox before each training round so the
/// buffer reflects everything that has arrived.
pub fn learner_loop<F, E>(
    learner: &mut Learner,
    inbox: &Receiver<ExperienceBatch>,
    buffer_capacity: usize,
    publish: &SnapshotCell,
    mut on_round: F,
) -> Result<LearnerExit, E>
where
    F: FnMut(&Learner, &RoundStats) -> Result<(), E>,
    E: From<LearnerError>,
{
    let mut mb = MasterBuffer::new(buffer_capacity);
    let start_version = learner.version;
    let mut received = 0;
    while let Ok(eb) = inbox.recv() {
        received += 1;
        mb.push(eb);
        loop {
            match inbox.try_recv() {
                Ok(eb) => {
                    received += 1;
                    mb.push(eb);
                }
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
            }
        }
        train_ready(learner, &mut mb, publish, &mut on_round)?;
    }
    Ok(LearnerExit {
        rounds: learner.version - start_version,
        batches_received: received,
        evicted: mb.evicted(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tuple(reward: f64, done: bool, logp: f64) -> ExperienceTuple {
        let s: Arc<[f64]> = Arc::from(vec![0.5, 0.5]);
        ExperienceTuple {
            state: s.clone(),
            action: 0,
            reward,
            next_state: s,
            behavior_log_prob: logp,
            done,
            mask: None,
        }
    }

    fn batch(actor: usize, version: u64, n: usize) -> ExperienceBatch {
        ExperienceBatch {
            actor_id: actor,
            policy_version: version,
            tuples: (0..n).map(|_| tuple(-0.1, false, -0.7)).collect(),
        }
    }

    #[test]
    fn td_examples() {
        let tb = TrainingBatch::from_batches([ExperienceBatch {
            actor_id: 0,
            policy_version: 0,
            tuples: vec![tuple(-0.05, false, 0.0)],
        }]);
        let d = vtrace_td(&tb, &[-0.3], &[-0.2], &[1.0], 0.99);
        assert!((d[0] - 0.052).abs() < 1e-12);
        let mut term = tb.clone();
        term.tuples[0].done = true;
        let d = vtrace_td(&term, &[-0.3], &[-0.2], &[1.0], 0.99);
        assert!((d[0] - 0.25).abs() < 1e-12);
        let d = vtrace_td(&tb, &[-0.3], &[-0.2], &[0.0], 0.99);
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn gae_examples() {
        assert_eq!(vtrace_gae(&[0.3], &[0.7], &[true], 0.99, 0.95), vec![0.3]);
        let a = vtrace_gae(&[0.1, 0.2], &[0.5, 0.5], &[false, true], 0.99, 0.95);
        assert!((a[0] - 0.19405).abs() < 1e-12, "{}", a[0]);
        assert!((a[1] - 0.2).abs() < 1e-15);
        // A cut stops propagation.
        let a = vtrace_gae(&[0.1, 0.2], &[1.0, 1.0], &[true, true], 0.99, 0.95);
        assert_eq!(a, vec![0.1, 0.2]);
    }

    #[test]
    fn clip_cases() {
        assert_eq!(clipped_term(1.0, 0.7, 0.2), 0.7);
        assert!((clipped_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!(!unclipped_active(1.5, 1.0, 0.2));
        assert!((clipped_term(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert!(!unclipped_active(0.5, -1.0, 0.2));
        assert!(unclipped_active(0.5, 1.0, 0.2));
    }

    #[test]
    fn is_weight_clipping() {
        let theta = Mlp::zeros(2, 3, 2);
        // Uniform over 2 actions => log pi = ln 0.5.
        let ln_half = 0.5_f64.ln();
        let mk = |behavior: f64| {
            TrainingBatch::from_batches([ExperienceBatch {
                actor_id: 0,
                policy_version: 0,
                tuples: vec![tuple(-0.1, true, behavior)],
            }])
        };
        let h = ApoHyper::default();
        let on = is_weights(&mk(ln_half), &theta, &h).unwrap();
        assert_eq!((on.rho[0], on.c[0]), (1.0, 1.0));
        let two = is_weights(&mk(0.25_f64.ln()), &theta, &h).unwrap();
        assert!((two.ratio[0] - 2.0).abs() < 1e-12);
        assert_eq!(two.rho[0], 1.0);
        let half = is_weights(&mk(0.0), &theta, &h).unwrap();
        assert!((half.rho[0] - 0.5).abs() < 1e-12);
        assert!(matches!(
            is_weights(&mk(f64::NEG_INFINITY), &theta, &h),
            Err(LearnerError::NonFiniteRatio(0))
        ));
    }

    #[test]
    fn master_buffer_fifo_and_threshold() {
        let mut mb = MasterBuffer::new(100);
        for k in 0..7 {
            mb.push(batch(k % 2, 0, 64));
            assert!(mb.build_train_batch(512).is_none());
        }
        mb.push(batch(1, 0, 64));
        let tb = mb.build_train_batch(512).unwrap();
        assert_eq!(tb.len(), 512);
        assert_eq!(tb.sources.len(), 8);
        let actors: Vec<usize> = tb.sources.iter().map(|s| s.actor_id).collect();
        assert_eq!(actors, vec![0, 1, 0, 1, 0, 1, 0, 1]);
        assert_eq!(mb.transitions(), 0);
        assert_eq!(tb.segment_end.iter().filter(|&&e| e).count(), 8);
    }

    #[test]
    fn master_buffer_evicts_oldest() {
        let mut mb = MasterBuffer::new(2);
        mb.push(batch(0, 0, 4));
        mb.push(batch(1, 0, 4));
        mb.push(batch(2, 0, 4));
        assert_eq!(mb.evicted(), 1);
        let tb = mb.build_train_batch(8).unwrap();
        assert_eq!(tb.sources[0].actor_id, 1);
        let mut mb = MasterBuffer::new(10);
        mb.push(batch(0, 0, 4));
        mb.push(batch(0, 5, 4));
        mb.drop_stale(6, 2);
        assert_eq!((mb.batches(), mb.transitions()), (1, 4));
    }

    #[test]
    fn zero_gradient_steps_only_bump_version() {
        let hyper = ApoHyper {
            gradient_steps: 0,
            train_batch: 4,
            ..ApoHyper::default()
        };
        let mut l = Learner::new(2, 2, 4, hyper, 0);
        let before = (l.policy.clone(), l.value.clone());
        let tb = TrainingBatch::from_batches([batch(0, 0, 4)]);
        let s = l.optimize_model(&tb).unwrap();
        assert_eq!(s.version, 1);
        assert_eq!((l.policy.clone(), l.value.clone()), before);
        let tiny = TrainingBatch::from_batches([batch(0, 0, 2)]);
        assert!(matches!(l.optimize_model(&tiny), Err(LearnerError::BatchTooSmall { .. })));
    }

    #[test]
    fn hyper_validation() {
        assert!(ApoHyper::default().validate().is_ok());
        let bad = ApoHyper {
            c_bar: 2.0,
            ..ApoHyper::default()
        };
        assert!(bad.validate().is_err());
    }
}

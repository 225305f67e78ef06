//! Deep deterministic policy gradient: replay buffer, Ornstein-Uhlenbeck
//! exploration, actor/critic updates with slowly tracking target networks,
//! and the episode-based training driver.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::environment::{GridEnv, RewardConfig};
use crate::grid_model::Feeder;
use crate::neural::{Activation, Adam, Gradients, Mlp, Normalizer};
use crate::power_flow::SolverOptions;
use crate::scenario::{Scenario, ScenarioConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// Fixed-capacity FIFO of transitions; the oldest entry is evicted when full.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            storage: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample<'a>(&'a self, batch: usize, rng: &mut impl Rng) -> Vec<&'a Transition> {
        if self.storage.is_empty() {
            return Vec::new();
        }
        (0..batch)
            .map(|_| &self.storage[rng.random_range(0..self.storage.len())])
            .collect()
    }
}

/// Ornstein-Uhlenbeck process `dx = theta (mu - x) dt + sigma sqrt(dt) N(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuNoise {
    pub x: Vec<f64>,
    pub theta: f64,
    pub sigma: f64,
    pub mu: f64,
    pub dt: f64,
}

impl OuNoise {
    pub fn new(dim: usize, theta: f64, sigma: f64, dt: f64) -> Self {
        OuNoise {
            x: vec![0.0; dim],
            theta,
            sigma,
            mu: 0.0,
            dt,
        }
    }

    pub fn reset(&mut self) {
        self.x.iter_mut().for_each(|x| *x = self.mu);
    }

    pub fn step(&mut self, rng: &mut impl Rng) -> &[f64] {
        let diffusion = self.sigma * self.dt.sqrt();
        for x in &mut self.x {
            let xi: f64 = rng.sample(StandardNormal);
            *x += self.theta * (self.mu - *x) * self.dt + diffusion * xi;
        }
        &self.x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgConfig {
    pub gamma: f64,
    pub tau: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: Vec<usize>,
    /// Final-layer init range for the actor (and critic) heads.
    pub final_init: f64,
    pub ou_theta: f64,
    pub ou_sigma: f64,
    pub ou_dt: f64,
    /// Multiplier applied to environment rewards before they enter the
    /// critic target. Does not change the optimal policy.
    pub reward_scale: f64,
    /// Transitions collected before the first network update.
    pub warmup: usize,
    /// Critic-only updates performed before the actor starts following it.
    pub actor_delay: usize,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        DdpgConfig {
            gamma: 0.99,
            tau: 0.001,
            buffer_capacity: 100_000,
            batch_size: 64,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            hidden: vec![64, 64],
            final_init: 3e-3,
            ou_theta: 0.15,
            ou_sigma: 0.2,
            ou_dt: 1.0,
            reward_scale: 1e-3,
            warmup: 64,
            actor_delay: 0,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Parameter(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Parameter(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::Parameter(
                "batch size and buffer capacity must be positive".into(),
            ));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::Parameter("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Live and target actor/critic networks, their optimisers and the state
/// normaliser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub normalizer: Normalizer,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub tau: f64,
    pub gamma: f64,
    pub reward_scale: f64,
}

impl Agent {
    /// Actor `D -> hidden.. -> M` (relu.., tanh); critic `D + M -> hidden.. -> 1`
    /// (relu.., identity) with the action joined at the input layer.
    pub fn new(state_dim: usize, action_dim: usize, cfg: &DdpgConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend(&cfg.hidden);
        actor_sizes.push(action_dim);
        let mut actor_acts = vec![Activation::Relu; cfg.hidden.len()];
        actor_acts.push(Activation::Tanh);

        let mut critic_sizes = vec![state_dim + action_dim];
        critic_sizes.extend(&cfg.hidden);
        critic_sizes.push(1);
        let mut critic_acts = vec![Activation::Relu; cfg.hidden.len()];
        critic_acts.push(Activation::Identity);

        let actor = Mlp::new(&actor_sizes, &actor_acts, Some(cfg.final_init), rng)?;
        let critic = Mlp::new(&critic_sizes, &critic_acts, Some(cfg.final_init), rng)?;
        Ok(Agent {
            actor_opt: Adam::new(&actor, cfg.actor_lr),
            critic_opt: Adam::new(&critic, cfg.critic_lr),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            normalizer: Normalizer::new(state_dim),
            tau: cfg.tau,
            gamma: cfg.gamma,
            reward_scale: cfg.reward_scale,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.normalizer.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.actor.out_dim()
    }

    fn critic_input(&self, norm_state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(norm_state.len() + action.len());
        x.extend_from_slice(norm_state);
        x.extend_from_slice(action);
        x
    }

    /// Deterministic actor output on a raw (unnormalised) state.
    pub fn policy(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.actor.forward(&self.normalizer.normalize(state))
    }

    /// Deterministic policy output, or policy plus one OU sample clamped to
    /// `[-1, 1]` when exploring.
    pub fn act(&self, state: &[f64], explore: bool, noise: &mut OuNoise, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mut a = self.policy(state)?;
        if explore {
            let n = noise.step(rng);
            for (a, n) in a.iter_mut().zip(n) {
                *a = (*a + n).clamp(-1.0, 1.0);
            }
        }
        Ok(a)
    }

    /// Bootstrapped regression targets `y = k r + gamma Q'(s', mu'(s'))`,
    /// evaluated with the target networks only.
    pub fn critic_targets(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|t| {
                let s2 = self.normalizer.normalize(&t.next_state);
                let a2 = self.actor_target.forward(&s2)?;
                let q2 = self.critic_target.forward(&self.critic_input(&s2, &a2))?[0];
                Ok(self.reward_scale * t.reward + self.gamma * q2)
            })
            .collect()
    }

    /// Mean squared TD error and its gradient w.r.t. the live critic.
    pub fn critic_loss_and_grad(&self, batch: &[&Transition]) -> Result<(f64, Gradients)> {
        let targets = self.critic_targets(batch)?;
        let mut grads = self.critic.zero_gradients();
        let inv_n = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (t, y) in batch.iter().zip(targets) {
            let x = self.critic_input(&self.normalizer.normalize(&t.state), &t.action);
            let cache = self.critic.forward_cached(&x)?;
            let err = cache.output()[0] - y;
            loss += err * err * inv_n;
            self.critic.backward(&cache, &[2.0 * err * inv_n], &mut grads)?;
        }
        Ok((loss, grads))
    }

    /// One Adam step on the critic loss; returns the loss before the step.
    pub fn critic_update(&mut self, batch: &[&Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("critic update needs a non-empty batch".into()));
        }
        let (loss, grads) = self.critic_loss_and_grad(batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("critic loss is {loss}")));
        }
        self.critic_opt.update(&mut self.critic, &grads)?;
        Ok(loss)
    }

    /// Mean `Q(s, mu(s))` over the batch and its gradient w.r.t. the actor,
    /// chained through the live critic's action input.
    pub fn actor_objective_and_grad(&self, batch: &[&Transition]) -> Result<(f64, Gradients)> {
        let mut grads = self.actor.zero_gradients();
        let inv_n = 1.0 / batch.len() as f64;
        let sd = self.state_dim();
        let mut objective = 0.0;
        for t in batch {
            let s = self.normalizer.normalize(&t.state);
            let actor_cache = self.actor.forward_cached(&s)?;
            let x = self.critic_input(&s, actor_cache.output());
            let critic_cache = self.critic.forward_cached(&x)?;
            objective += critic_cache.output()[0] * inv_n;
            let mut scratch = self.critic.zero_gradients();
            let dx = self.critic.backward(&critic_cache, &[inv_n], &mut scratch)?;
            self.actor.backward(&actor_cache, &dx[sd..], &mut grads)?;
        }
        Ok((objective, grads))
    }

    /// One Adam ascent step on the actor objective; returns the objective
    /// before the step.
    pub fn actor_update(&mut self, batch: &[&Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("actor update needs a non-empty batch".into()));
        }
        let (objective, mut grads) = self.actor_objective_and_grad(batch)?;
        if !objective.is_finite() {
            return Err(Error::NonFinite(format!("actor objective is {objective}")));
        }
        grads.scale(-1.0);
        self.actor_opt.update(&mut self.actor, &grads)?;
        Ok(objective)
    }

    /// `target <- tau * live + (1 - tau) * target` for both networks.
    pub fn soft_update(&mut self) -> Result<()> {
        self.actor_target.soft_update_from(&self.actor, self.tau)?;
        self.critic_target.soft_update_from(&self.critic, self.tau)
    }

    pub fn observe(&mut self, state: &[f64]) -> Result<()> {
        self.normalizer.update_stats(&[state.to_vec()])
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub agent: Agent,
}

pub fn save_checkpoint(agent: &Agent, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        agent: agent.clone(),
    };
    let text = serde_json::to_string(&ck).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Agent> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            path.display(),
            ck.version
        )));
    }
    Ok(ck.agent)
}

// ---------------------------------------------------------------------------
// Episode termination

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminationConfig {
    /// Convergence is only checked once this many iterations have run.
    pub min_iters_before_check: usize,
    /// Number of consecutive reward differences that must be small.
    pub window: usize,
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for TerminationConfig {
    fn default() -> Self {
        TerminationConfig {
            min_iters_before_check: 200,
            window: 5,
            epsilon: 5.0,
            max_iters: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Converged,
    MaxIterations,
    Aborted,
}

impl fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminationReason::Converged => "converged",
            TerminationReason::MaxIterations => "max_iterations",
            TerminationReason::Aborted => "aborted",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TerminationTracker {
    cfg: TerminationConfig,
    recent: VecDeque<f64>,
    iteration: usize,
}

impl TerminationTracker {
    pub fn new(cfg: TerminationConfig) -> Self {
        TerminationTracker {
            cfg,
            recent: VecDeque::with_capacity(cfg.window + 1),
            iteration: 0,
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Record one iteration's reward and report whether the episode ends.
    pub fn push(&mut self, reward: f64) -> Option<TerminationReason> {
        self.iteration += 1;
        self.recent.push_back(reward);
        while self.recent.len() > self.cfg.window + 1 {
            self.recent.pop_front();
        }
        let settled = self.recent.len() == self.cfg.window + 1
            && self
                .recent
                .iter()
                .zip(self.recent.iter().skip(1))
                .all(|(a, b)| (b - a).abs() < self.cfg.epsilon);
        if self.iteration >= self.cfg.min_iters_before_check && settled {
            Some(TerminationReason::Converged)
        } else if self.iteration >= self.cfg.max_iters {
            Some(TerminationReason::MaxIterations)
        } else {
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Training driver

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub termination: TerminationConfig,
    /// An episode is aborted once more than this fraction of its iterations
    /// (after at least `window` iterations) failed to converge.
    pub max_nonconverged_fraction: f64,
    /// Save a checkpoint every this many episodes (0 disables).
    pub checkpoint_every: usize,
    /// Category mixture that episode scenarios are drawn from.
    pub scenarios: ScenarioConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 1500,
            termination: TerminationConfig::default(),
            max_nonconverged_fraction: 0.5,
            checkpoint_every: 0,
            scenarios: ScenarioConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub scenario: String,
    pub iterations: usize,
    pub mean_reward: f64,
    pub termination: TerminationReason,
    pub nonconverged: usize,
    pub mean_critic_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeRecord>,
}

impl TrainingLog {
    pub fn mean_rewards(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.mean_reward).collect()
    }

    /// One JSON object per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for e in &self.episodes {
            serde_json::to_writer(&mut out, e)?;
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Everything needed to run a training session.
pub struct Trainer {
    pub env: GridEnv,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub noise: OuNoise,
    pub rng: ChaCha8Rng,
    updates: usize,
    ddpg: DdpgConfig,
    train: TrainConfig,
}

impl Trainer {
    /// Build the environment and a freshly initialised agent, seeded.
    pub fn new(
        feeder: Arc<Feeder>,
        solver: SolverOptions,
        reward: RewardConfig,
        ddpg: DdpgConfig,
        train: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let env = GridEnv::new(feeder, solver, reward);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent = Agent::new(env.state_dim(), env.action_dim(), &ddpg, &mut rng)?;
        Ok(Trainer {
            buffer: ReplayBuffer::new(ddpg.buffer_capacity),
            noise: OuNoise::new(env.action_dim(), ddpg.ou_theta, ddpg.ou_sigma, ddpg.ou_dt),
            env,
            agent,
            rng,
            updates: 0,
            ddpg,
            train,
        })
    }

    /// Run one episode on `scenario`.
    pub fn run_episode(&mut self, episode: usize, scenario: Scenario) -> Result<EpisodeRecord> {
        let tag = scenario.tag.clone();
        let mut state = self.env.reset(scenario)?;
        self.agent.observe(&state)?;
        self.noise.reset();
        let mut tracker = TerminationTracker::new(self.train.termination);
        let (mut reward_sum, mut loss_sum, mut updates, mut nonconverged) = (0.0, 0.0, 0usize, 0usize);
        let termination = loop {
            let action = self.agent.act(&state, true, &mut self.noise, &mut self.rng)?;
            let out = self.env.step(&action)?;
            if !out.solution.converged {
                nonconverged += 1;
            }
            self.agent.observe(&out.state)?;
            let r = out.reward.r;
            reward_sum += r;
            self.buffer.push(Transition {
                state: std::mem::take(&mut state),
                action,
                reward: r,
                next_state: out.state.clone(),
            });
            state = out.state;

            if self.buffer.len() >= self.ddpg.warmup.max(1) {
                let batch = self.buffer.sample(self.ddpg.batch_size, &mut self.rng);
                loss_sum += self.agent.critic_update(&batch)?;
                if self.updates >= self.ddpg.actor_delay {
                    self.agent.actor_update(&batch)?;
                }
                self.agent.soft_update()?;
                self.updates += 1;
                updates += 1;
            }

            let it = tracker.iteration() + 1;
            if it >= self.train.termination.window
                && nonconverged as f64 > self.train.max_nonconverged_fraction * it as f64
            {
                tracker.push(r);
                break TerminationReason::Aborted;
            }
            if let Some(reason) = tracker.push(r) {
                break reason;
            }
        };
        let iterations = tracker.iteration();
        if termination == TerminationReason::Aborted {
            log::warn!("episode {episode} aborted: {nonconverged}/{iterations} non-converged power flows");
        }
        Ok(EpisodeRecord {
            episode,
            scenario: tag,
            iterations,
            mean_reward: reward_sum / iterations as f64,
            termination,
            nonconverged,
            mean_critic_loss: (updates > 0).then(|| loss_sum / updates as f64),
        })
    }

    /// Train for the configured number of episodes, drawing each episode's
    /// scenario from `scenarios`. Checkpoints go to `checkpoint_dir` when set.
    pub fn train(
        &mut self,
        mut scenarios: impl FnMut(&mut ChaCha8Rng) -> Scenario,
        checkpoint_dir: Option<&Path>,
    ) -> Result<TrainingLog> {
        let mut log = TrainingLog::default();
        for episode in 0..self.train.episodes {
            let scenario = scenarios(&mut self.rng);
            let record = self.run_episode(episode, scenario)?;
            log::info!(
                "episode {:>5} [{}] iters {:>4} mean reward {:>9.2} ({})",
                record.episode,
                record.scenario,
                record.iterations,
                record.mean_reward,
                record.termination
            );
            log.episodes.push(record);
            if let Some(dir) = checkpoint_dir {
                let every = self.train.checkpoint_every;
                if every > 0 && (episode + 1) % every == 0 {
                    save_checkpoint(&self.agent, dir.join(format!("agent-ep{:05}.json", episode + 1)))?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&self.agent, dir.join("agent-final.json"))?;
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Dense;
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn transition(i: usize) -> Transition {
        Transition {
            state: vec![i as f64],
            action: vec![0.0],
            reward: i as f64,
            next_state: vec![i as f64 + 1.0],
        }
    }

    fn small_agent(seed: u64, state_dim: usize, action_dim: usize) -> Agent {
        let cfg = DdpgConfig {
            hidden: vec![6, 5],
            final_init: 0.3,
            ..Default::default()
        };
        Agent::new(state_dim, action_dim, &cfg, &mut rng(seed)).unwrap()
    }

    fn random_batch(seed: u64, sd: usize, ad: usize, n: usize) -> Vec<Transition> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| Transition {
                state: (0..sd).map(|_| r.random_range(-1.0..1.0)).collect(),
                action: (0..ad).map(|_| r.random_range(-1.0..1.0)).collect(),
                reward: r.random_range(-2.0..1.0),
                next_state: (0..sd).map(|_| r.random_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn buffer_is_fifo() {
        let cap = 5;
        for k in 0..8 {
            let mut buf = ReplayBuffer::new(cap);
            for i in 0..cap + k {
                buf.push(transition(i));
            }
            assert_eq!(buf.len(), cap);
            let kept: Vec<f64> = buf.iter().map(|t| t.reward).collect();
            let expected: Vec<f64> = (k..cap + k).map(|i| i as f64).collect();
            assert_eq!(kept, expected);
        }
    }

    #[test]
    fn buffer_sampling_is_seeded() {
        let mut buf = ReplayBuffer::new(100);
        for i in 0..50 {
            buf.push(transition(i));
        }
        let a: Vec<f64> = buf.sample(10, &mut rng(1)).iter().map(|t| t.reward).collect();
        let b: Vec<f64> = buf.sample(10, &mut rng(1)).iter().map(|t| t.reward).collect();
        assert_eq!(a, b);
        assert!(ReplayBuffer::new(3).sample(4, &mut rng(0)).is_empty());
    }

    #[test]
    fn ou_without_noise_decays_geometrically() {
        let mut ou = OuNoise::new(2, 0.15, 0.0, 1.0);
        ou.x = vec![1.0, -2.0];
        let mut r = rng(0);
        let mut prev = ou.x.clone();
        for _ in 0..100 {
            let next = ou.step(&mut r).to_vec();
            for (p, n) in prev.iter().zip(&next) {
                assert_eq!(*n, p + 0.15 * (0.0 - p) * 1.0);
                assert!(n.abs() < p.abs());
            }
            prev = next;
        }
    }

    #[test]
    fn ou_random_walk_variance() {
        // theta = 0, sigma = 1, dt = 1: x_n is a sum of n standard normals,
        // so Var(x_n) = n. 10^5 steps total, spread over independent walks.
        let (walks, n) = (10_000usize, 10usize);
        let mut r = rng(11);
        let finals: Vec<f64> = (0..walks)
            .map(|_| {
                let mut ou = OuNoise::new(1, 0.0, 1.0, 1.0);
                for _ in 0..n - 1 {
                    ou.step(&mut r);
                }
                ou.step(&mut r)[0]
            })
            .collect();
        let mean = finals.iter().sum::<f64>() / walks as f64;
        let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (walks - 1) as f64;
        assert!((var - n as f64).abs() < 0.05 * n as f64, "{var}");
    }

    #[test]
    fn ou_is_reproducible() {
        let run = || {
            let mut ou = OuNoise::new(3, 0.15, 0.2, 1.0);
            let mut r = rng(5);
            (0..20).map(|_| ou.step(&mut r).to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn act_contracts() {
        let agent = small_agent(0, 4, 3);
        let mut r = rng(2);
        let mut quiet = OuNoise::new(3, 0.15, 0.0, 1.0);
        let s = [0.3, -0.2, 1.0, 0.0];
        let a1 = agent.act(&s, false, &mut quiet, &mut r).unwrap();
        let a2 = agent.act(&s, false, &mut quiet, &mut r).unwrap();
        assert_eq!(a1, a2);
        let a3 = agent.act(&s, true, &mut quiet, &mut r).unwrap();
        assert_eq!(a1, a3);
        let mut loud = OuNoise::new(3, 0.15, 5.0, 1.0);
        for _ in 0..200 {
            let s: Vec<f64> = (0..4).map(|_| r.random_range(-10.0..10.0)).collect();
            for a in agent.act(&s, true, &mut loud, &mut r).unwrap() {
                assert!((-1.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn soft_update_law() {
        let mut agent = small_agent(3, 3, 2);
        // perturb live networks so they differ from targets
        let mut p = agent.actor.flat_params();
        p.iter_mut().enumerate().for_each(|(i, x)| *x += 0.01 * i as f64);
        agent.actor.set_flat_params(&p).unwrap();
        let live = agent.actor.flat_params();
        let before = agent.actor_target.flat_params();
        agent.tau = 0.37;
        agent.soft_update().unwrap();
        for ((t, l), b) in agent.actor_target.flat_params().iter().zip(&live).zip(&before) {
            assert_eq!(*t, 0.37 * l + (1.0 - 0.37) * b);
        }
        agent.tau = 1.0;
        agent.soft_update().unwrap();
        assert_eq!(agent.actor_target, agent.actor);
        assert_eq!(agent.critic_target, agent.critic);

        let mut scalar = Mlp::from_layers(vec![Dense::zeros(1, 1, Activation::Identity)]).unwrap();
        let mut live = scalar.clone();
        live.set_flat_params(&[2.0, 2.0]).unwrap();
        scalar.soft_update_from(&live, 0.5).unwrap();
        assert_eq!(scalar.flat_params(), vec![1.0, 1.0]);
        let frozen = scalar.clone();
        scalar.soft_update_from(&live, 0.0).unwrap();
        assert_eq!(scalar, frozen);
    }

    #[test]
    fn gamma_zero_targets_are_scaled_rewards() {
        let mut agent = small_agent(4, 3, 2);
        agent.gamma = 0.0;
        agent.reward_scale = 1.0;
        let batch = random_batch(1, 3, 2, 8);
        let refs: Vec<&Transition> = batch.iter().collect();
        let y = agent.critic_targets(&refs).unwrap();
        for (y, t) in y.iter().zip(&batch) {
            assert_eq!(*y, t.reward);
        }
    }

    #[test]
    fn targets_ignore_live_networks() {
        let mut agent = small_agent(5, 3, 2);
        agent.tau = 0.0;
        let batch = random_batch(2, 3, 2, 8);
        let refs: Vec<&Transition> = batch.iter().collect();
        let y0 = agent.critic_targets(&refs).unwrap();
        let mut r = rng(77);
        for _ in 0..3 {
            let p: Vec<f64> = (0..agent.critic.param_count())
                .map(|_| r.random_range(-2.0..2.0))
                .collect();
            agent.critic.set_flat_params(&p).unwrap();
            let p: Vec<f64> = (0..agent.actor.param_count())
                .map(|_| r.random_range(-2.0..2.0))
                .collect();
            agent.actor.set_flat_params(&p).unwrap();
            let targets = (agent.actor_target.clone(), agent.critic_target.clone());
            agent.soft_update().unwrap();
            assert_eq!((agent.actor_target.clone(), agent.critic_target.clone()), targets);
            assert_eq!(agent.critic_targets(&refs).unwrap(), y0);
        }
    }

    #[test]
    fn critic_overfits_repeated_transition() {
        let mut agent = small_agent(6, 3, 2);
        agent.gamma = 0.0;
        agent.reward_scale = 1.0;
        agent.critic_opt.lr = 1e-2;
        let t = random_batch(3, 3, 2, 1).pop().unwrap();
        let batch = vec![&t; 16];
        let first = agent.critic_update(&batch).unwrap();
        let mut last = first;
        for _ in 0..300 {
            last = agent.critic_update(&batch).unwrap();
        }
        assert!(last < 1e-4 * first.max(1e-3), "loss {first} -> {last}");
    }

    #[test]
    fn zero_critic_leaves_actor_unchanged() {
        let mut agent = small_agent(7, 3, 2);
        let zero: Vec<f64> = vec![0.0; agent.critic.param_count()];
        agent.critic.set_flat_params(&zero).unwrap();
        let before = agent.actor.clone();
        let batch = random_batch(4, 3, 2, 8);
        let refs: Vec<&Transition> = batch.iter().collect();
        let (j, g) = agent.actor_objective_and_grad(&refs).unwrap();
        assert_eq!(j, 0.0);
        assert!(g.is_zero());
        agent.actor_update(&refs).unwrap();
        assert_eq!(agent.actor, before);
    }

    /// Hand-built critic computing `Q(s, a) = -|a|^2` exactly.
    fn quadratic_critic(sd: usize, ad: usize) -> Mlp {
        let mut pick = Dense::zeros(sd + ad, ad, Activation::Square);
        for i in 0..ad {
            pick.weights[i * (sd + ad) + sd + i] = 1.0;
        }
        let mut sum = Dense::zeros(ad, 1, Activation::Identity);
        sum.weights.iter_mut().for_each(|w| *w = -1.0);
        Mlp::from_layers(vec![pick, sum]).unwrap()
    }

    #[test]
    fn quadratic_critic_is_exact() {
        let critic = quadratic_critic(2, 3);
        assert_eq!(critic.forward(&[5.0, -7.0, 0.5, -1.0, 2.0]).unwrap(), vec![-5.25]);
    }

    #[test]
    fn actor_converges_to_critic_optimum() {
        let (sd, ad) = (3, 2);
        let mut agent = small_agent(8, sd, ad);
        agent.critic = quadratic_critic(sd, ad);
        agent.actor_opt.lr = 1e-2;
        let mut r = rng(9);
        let states: Vec<Transition> = random_batch(5, sd, ad, 64);
        let worst = |agent: &Agent| {
            states
                .iter()
                .flat_map(|t| agent.actor.forward(&agent.normalizer.normalize(&t.state)).unwrap())
                .fold(0.0f64, |m, a| m.max(a.abs()))
        };
        let start = worst(&agent);
        for _ in 0..2000 {
            let batch: Vec<&Transition> = (0..16).map(|_| &states[r.random_range(0..states.len())]).collect();
            agent.actor_update(&batch).unwrap();
        }
        let end = worst(&agent);
        assert!(end < 0.05 && end < start, "max |a| {start} -> {end}");
    }

    fn fd_check(params: Vec<f64>, analytic: Vec<f64>, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let mut p = params.clone();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            let down = f(&p);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4));
        }
        worst
    }

    #[test]
    fn critic_loss_gradient_matches_fd() {
        for seed in 0..5 {
            let mut agent = small_agent(seed, 4, 2);
            agent.reward_scale = 1.0;
            agent
                .normalizer
                .update_stats(
                    &random_batch(seed + 100, 4, 2, 10)
                        .iter()
                        .map(|t| t.state.clone())
                        .collect::<Vec<_>>(),
                )
                .unwrap();
            let batch = random_batch(seed + 50, 4, 2, 6);
            let refs: Vec<&Transition> = batch.iter().collect();
            let (_, g) = agent.critic_loss_and_grad(&refs).unwrap();
            let mut probe = agent.clone();
            let worst = fd_check(agent.critic.flat_params(), g.flatten(), |p| {
                probe.critic.set_flat_params(p).unwrap();
                probe.critic_loss_and_grad(&refs).unwrap().0
            });
            assert!(worst < 1e-4, "seed {seed}: {worst:.3e}");
        }
    }

    #[test]
    fn actor_gradient_matches_fd() {
        for seed in 0..5 {
            let agent = small_agent(seed + 10, 4, 3);
            let batch = random_batch(seed + 60, 4, 3, 6);
            let refs: Vec<&Transition> = batch.iter().collect();
            let (_, g) = agent.actor_objective_and_grad(&refs).unwrap();
            let mut probe = agent.clone();
            let worst = fd_check(agent.actor.flat_params(), g.flatten(), |p| {
                probe.actor.set_flat_params(p).unwrap();
                probe.actor_objective_and_grad(&refs).unwrap().0
            });
            assert!(worst < 1e-4, "seed {seed}: {worst:.3e}");
        }
    }

    #[test]
    fn termination_rules() {
        let cfg = TerminationConfig::default();
        let mut t = TerminationTracker::new(cfg);
        // constant reward: converged exactly at the first check
        for i in 1..200 {
            assert_eq!(t.push(100.0), None, "iteration {i}");
        }
        assert_eq!(t.push(100.0), Some(TerminationReason::Converged));

        // alternating rewards never settle
        let mut t = TerminationTracker::new(cfg);
        let mut reason = None;
        for i in 0..1000 {
            reason = t.push(if i % 2 == 0 { 0.0 } else { 10.0 });
            if i < 999 {
                assert_eq!(reason, None);
            }
        }
        assert_eq!(reason, Some(TerminationReason::MaxIterations));

        // a single big jump inside the window delays convergence
        let mut t = TerminationTracker::new(cfg);
        for _ in 0..197 {
            t.push(0.0);
        }
        assert_eq!(t.push(50.0), None); // 198
        assert_eq!(t.push(50.0), None); // 199
        for _ in 0..3 {
            assert_eq!(t.push(51.0), None);
        }
        assert_eq!(t.push(51.0), Some(TerminationReason::Converged)); // 204: deltas 0,1,0,0,0
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut agent = small_agent(12, 5, 2);
        agent
            .normalizer
            .update_stats(
                &random_batch(3, 5, 2, 9)
                    .iter()
                    .map(|t| t.state.clone())
                    .collect::<Vec<_>>(),
            )
            .unwrap();
        let batch = random_batch(4, 5, 2, 8);
        let refs: Vec<&Transition> = batch.iter().collect();
        agent.critic_update(&refs).unwrap();
        agent.actor_update(&refs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        save_checkpoint(&agent, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, agent);
        for (a, b) in back.actor.flat_params().iter().zip(agent.actor.flat_params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adam_step_size_on_shared_scale() {
        // the critic's first Adam step moves each parameter by about lr
        let mut agent = small_agent(13, 3, 2);
        let before = agent.critic.flat_params();
        let batch = random_batch(6, 3, 2, 4);
        let refs: Vec<&Transition> = batch.iter().collect();
        agent.critic_update(&refs).unwrap();
        let moved = agent
            .critic
            .flat_params()
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_abs_diff_eq!(moved, agent.critic_opt.lr, epsilon = 1e-6);
    }
}

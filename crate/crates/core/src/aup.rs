//! Attainable utility preservation.
//!
//! `R_AUP(s, a) = R_env(s, a) - λ/|ℛ| Σ_i |Q*_i(s, a) - Q*_i(s, ∅)|`, where the
//! `Q*_i` are optimal Q-functions of random auxiliary rewards. The power-penalty
//! variant drops the absolute value.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{check_discount_open, check_len, Error, Result};
use crate::mdp::{optimal_q, policy_iteration, ActionId, Policy, QTable, RewardFunction, StateId, TabularMdp};
use crate::reward::{domain, stream_rng, RewardDistribution};

/// Hyperparameters for AUP agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AupConfig {
    /// Penalty coefficient `λ ≥ 0`.
    pub lambda: f64,
    /// Number of auxiliary reward functions `|ℛ|`.
    pub n_aux: usize,
    pub noop_action: ActionId,
    pub gamma: f64,
    /// Q-learning step size `α`.
    pub learning_rate: f64,
    pub seed: u64,
    pub q_learning: QLearningConfig,
}

impl Default for AupConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            n_aux: 20,
            noop_action: crate::gridworld::NOOP,
            gamma: 0.996,
            learning_rate: 1.0,
            seed: 0,
            q_learning: QLearningConfig::default(),
        }
    }
}

impl AupConfig {
    pub fn validate(&self, mdp: &TabularMdp) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if self.n_aux == 0 {
            return Err(Error::InvalidConfig("n_aux must be at least 1".into()));
        }
        if self.noop_action >= mdp.n_actions() {
            return Err(Error::InvalidConfig(format!("no-op action {} out of range", self.noop_action)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!("learning rate {} outside (0, 1]", self.learning_rate)));
        }
        check_discount_open(self.gamma)
    }
}

/// Episodic tabular Q-learning settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QLearningConfig {
    pub max_episodes: usize,
    /// Stop once the greedy policy is unchanged for this many episodes.
    pub stable_episodes: usize,
    pub episode_len: usize,
    pub epsilon_start: f64,
    /// Reached linearly after half of `max_episodes`.
    pub epsilon_end: f64,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self {
            max_episodes: 100_000,
            stable_episodes: 500,
            episode_len: 20,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
        }
    }
}

/// Auxiliary rewards and their optimal Q-functions.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliarySet {
    rewards: Vec<Vec<f64>>,
    q_stars: Vec<QTable>,
}

impl AuxiliarySet {
    pub fn new(rewards: Vec<Vec<f64>>, q_stars: Vec<QTable>) -> Result<Self> {
        check_len("auxiliary Q-functions", rewards.len(), q_stars.len())?;
        if rewards.is_empty() {
            return Err(Error::InvalidConfig("auxiliary set is empty".into()));
        }
        Ok(Self { rewards, q_stars })
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    pub fn q_stars(&self) -> &[QTable] {
        &self.q_stars
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// `(1/|ℛ|) Σ_i (Q*_i(s, a) - Q*_i(s, ∅))`, optionally with absolute values.
    fn mean_shift(&self, s: StateId, a: ActionId, noop: ActionId, absolute: bool) -> f64 {
        let total: f64 = self
            .q_stars
            .iter()
            .map(|q| {
                let d = q.get(s, a) - q.get(s, noop);
                if absolute { d.abs() } else { d }
            })
            .sum();
        total / self.q_stars.len() as f64
    }
}

/// Draws `n_aux` rewards iid uniform on `[0, 1]` per state and solves each exactly.
pub fn sample_auxiliary_set(mdp: &TabularMdp, config: &AupConfig) -> Result<AuxiliarySet> {
    config.validate(mdp)?;
    let uniform = RewardDistribution::iid_uniform(0.0, 1.0)?;
    let rewards = uniform.sample_many(mdp.n_states(), config.n_aux, config.seed, domain::AUXILIARY)?;
    let q_stars = rewards
        .par_iter()
        .map(|r| optimal_q(mdp, &RewardFunction::State(r.clone()), config.gamma))
        .collect::<Result<Vec<_>>>()?;
    AuxiliarySet::new(rewards, q_stars)
}

/// `R_AUP(s, a)`.
pub fn aup_reward(
    r_env: &RewardFunction,
    aux: &AuxiliarySet,
    config: &AupConfig,
    s: StateId,
    a: ActionId,
) -> f64 {
    r_env.term(s, a) - config.lambda * aux.mean_shift(s, a, config.noop_action, true)
}

/// `R_env(s, a) - λ/|ℛ| Σ_i (Q*_i(s, a) - Q*_i(s, ∅))`.
pub fn power_penalty_reward(
    r_env: &RewardFunction,
    aux: &AuxiliarySet,
    config: &AupConfig,
    s: StateId,
    a: ActionId,
) -> f64 {
    r_env.term(s, a) - config.lambda * aux.mean_shift(s, a, config.noop_action, false)
}

/// Which penalty a reward table applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Penalty {
    Absolute,
    Signed,
}

/// The full `(s, a)` table of the penalized reward.
pub fn penalized_reward_table(
    mdp: &TabularMdp,
    r_env: &RewardFunction,
    aux: &AuxiliarySet,
    config: &AupConfig,
    penalty: Penalty,
) -> Result<RewardFunction> {
    r_env.check_compatible(mdp)?;
    for q in aux.q_stars() {
        check_len("auxiliary Q states", mdp.n_states(), q.n_states())?;
        check_len("auxiliary Q actions", mdp.n_actions(), q.n_actions())?;
    }
    let rows = (0..mdp.n_states())
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| match penalty {
                    Penalty::Absolute => aup_reward(r_env, aux, config, s, a),
                    Penalty::Signed => power_penalty_reward(r_env, aux, config, s, a),
                })
                .collect()
        })
        .collect();
    Ok(RewardFunction::StateAction(rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMethod {
    /// Policy iteration on the reward table.
    Exact,
    QLearning,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("Q-learning did not stabilize within {episodes} episodes")]
    NotConverged { episodes: usize, last_policy: Policy },
}

/// Trains a deterministic policy for a fixed `(s, a)` reward table.
pub fn train_agent(
    mdp: &TabularMdp,
    reward: &RewardFunction,
    config: &AupConfig,
    method: TrainMethod,
) -> Result<Policy, TrainError> {
    check_discount_open(config.gamma)?;
    reward.check_compatible(mdp)?;
    match method {
        TrainMethod::Exact => Ok(policy_iteration(mdp, reward, config.gamma)?.policy),
        TrainMethod::QLearning => q_learning(mdp, reward, config),
    }
}

fn sample_next(row: &[f64], rng: &mut impl Rng) -> StateId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (t, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return t;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn q_learning(mdp: &TabularMdp, reward: &RewardFunction, config: &AupConfig) -> Result<Policy, TrainError> {
    let settings = &config.q_learning;
    if settings.episode_len == 0 || settings.max_episodes == 0 {
        return Err(Error::InvalidConfig("Q-learning needs positive episode length and cap".into()).into());
    }
    let mut rng = stream_rng(config.seed, domain::Q_LEARNING, 0);
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    let mut greedy = q.greedy_policy();
    let mut stable = 0;
    let decay_episodes = (settings.max_episodes / 2).max(1) as f64;
    for episode in 0..settings.max_episodes {
        let frac = (episode as f64 / decay_episodes).min(1.0);
        let epsilon = settings.epsilon_start + frac * (settings.epsilon_end - settings.epsilon_start);
        let mut s = mdp.initial_state();
        for _ in 0..settings.episode_len {
            let a = if rng.random::<f64>() < epsilon {
                rng.random_range(0..mdp.n_actions())
            } else {
                q.greedy_action(s)
            };
            let next = sample_next(mdp.row(s, a), &mut rng);
            let target = reward.term(s, a) + config.gamma * q.row_max(next);
            let old = q.get(s, a);
            q.set(s, a, old + config.learning_rate * (target - old));
            s = next;
        }
        let current = q.greedy_policy();
        if current == greedy {
            stable += 1;
            if stable >= settings.stable_episodes {
                return Ok(current);
            }
        } else {
            stable = 0;
            greedy = current;
        }
    }
    Err(TrainError::NotConverged { episodes: settings.max_episodes, last_policy: greedy })
}

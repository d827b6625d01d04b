//! Gridworld experiments: train Vanilla and AUP prefix agents, score both with
//! the delayed specification score on held-out rewards, and report residuals.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assistance::{score_breakdowns, ScoreBreakdown};
use crate::aup::{
    penalized_reward_table, sample_auxiliary_set, train_agent, AupConfig, Penalty, QLearningConfig,
    TrainError, TrainMethod,
};
use crate::error::{check_discount_open, Error, Result};
use crate::gridworld::{build, EnvKind, GridSpec, Gridworld, HeldOut, NOOP};
use crate::mdp::{ActionId, Policy, StateId};
use crate::reward::{RewardDistribution, ValueCache};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "DELAYED_SPEC_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentMode {
    Vanilla,
    Aup,
    PowerPenalty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub gamma: f64,
    pub lambda: f64,
    pub n_aux: usize,
    pub n_rand_samples: usize,
    pub correct_at: usize,
    pub episode_len: usize,
    pub seed: u64,
    pub agent_modes: Vec<AgentMode>,
    /// Where `residuals.csv`, `summary.json` and `agents.json` go, if anywhere.
    pub output_dir: Option<PathBuf>,
    /// Replaces the bundled map for `env`.
    pub map: Option<PathBuf>,
    pub train_method: TrainMethod,
    pub learning_rate: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Options,
            gamma: 0.996,
            lambda: 0.01,
            n_aux: 20,
            n_rand_samples: 1_000,
            correct_at: 10,
            episode_len: 20,
            seed: 0,
            agent_modes: vec![AgentMode::Vanilla, AgentMode::Aup, AgentMode::PowerPenalty],
            output_dir: None,
            map: None,
            train_method: TrainMethod::Exact,
            learning_rate: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn for_env(env: EnvKind) -> Self {
        Self { env, ..Self::default() }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        check_discount_open(self.gamma)?;
        if self.n_rand_samples == 0 {
            return Err(Error::InvalidConfig("n_rand_samples must be positive".into()));
        }
        if self.correct_at == 0 {
            return Err(Error::InvalidConfig("correct_at must be at least 1".into()));
        }
        if self.episode_len == 0 {
            return Err(Error::InvalidConfig("episode_len must be positive".into()));
        }
        for needed in [AgentMode::Vanilla, AgentMode::Aup] {
            if !self.agent_modes.contains(&needed) {
                return Err(Error::InvalidConfig(format!("agent_modes must include {needed:?}")));
            }
        }
        Ok(())
    }

    pub fn aup_config(&self) -> AupConfig {
        AupConfig {
            lambda: self.lambda,
            n_aux: self.n_aux,
            noop_action: NOOP,
            gamma: self.gamma,
            learning_rate: self.learning_rate,
            seed: self.seed,
            q_learning: QLearningConfig { episode_len: self.episode_len, ..QLearningConfig::default() },
        }
    }

    /// The configured environment, from `map` when set.
    pub fn environment(&self) -> Result<Gridworld> {
        let env = match &self.map {
            None => build(self.env, self.gamma)?,
            Some(path) => {
                let mut spec = GridSpec::from_file(path)?;
                spec.episode_len = self.episode_len;
                Gridworld::from_spec(spec, self.gamma)?
            }
        };
        if env.kind() != self.env {
            return Err(Error::InvalidConfig(format!(
                "map describes a {} environment, config says {}",
                env.kind(),
                self.env
            )));
        }
        Ok(env)
    }
}

/// A trained agent and its behavior from the start state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub policy: Vec<ActionId>,
    /// `episode_len + 1` visited states.
    pub trajectory: Vec<StateId>,
    pub first_goal_step: Option<usize>,
    /// Whether any visited state has the side effect.
    pub side_effect: bool,
}

impl AgentSummary {
    fn new(env: &Gridworld, policy: &Policy, steps: usize) -> Result<Self> {
        let trajectory = env.trajectory(policy, steps)?;
        Ok(Self {
            policy: policy.as_deterministic().expect("trained policies are deterministic").to_vec(),
            first_goal_step: trajectory.iter().position(|&s| env.on_goal(s)),
            side_effect: trajectory.iter().any(|&s| env.side_effect(s)),
            trajectory,
        })
    }

    pub fn as_policy(&self) -> Policy {
        Policy::Deterministic(self.policy.clone())
    }

    /// Goal reached without the side effect ever occurring.
    pub fn is_safe_success(&self) -> bool {
        self.first_goal_step.is_some() && !self.side_effect
    }
}

/// Trains every configured agent. Shares one auxiliary set between AUP variants.
pub fn train_agents(config: &ExperimentConfig, env: &Gridworld) -> Result<BTreeMap<AgentMode, AgentSummary>> {
    config.validate()?;
    let aup = config.aup_config();
    let mdp = env.mdp();
    let aux = sample_auxiliary_set(mdp, &aup)?;
    let mut agents = BTreeMap::new();
    for &mode in &config.agent_modes {
        let reward = match mode {
            AgentMode::Vanilla => env.r_env().clone(),
            AgentMode::Aup => penalized_reward_table(mdp, env.r_env(), &aux, &aup, Penalty::Absolute)?,
            AgentMode::PowerPenalty => penalized_reward_table(mdp, env.r_env(), &aux, &aup, Penalty::Signed)?,
        };
        let policy = train_agent(mdp, &reward, &aup, config.train_method).map_err(|e| match e {
            TrainError::Core(e) => e,
            TrainError::NotConverged { .. } => Error::NonConvergence("Q-learning"),
        })?;
        agents.insert(mode, AgentSummary::new(env, &policy, config.episode_len)?);
    }
    Ok(agents)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub sample_id: usize,
    pub aup_score: f64,
    pub vanilla_score: f64,
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub n_positive: usize,
    pub fraction_positive: f64,
    pub mean: f64,
    pub median: f64,
}

impl ResidualSummary {
    pub fn from_residuals(residuals: &[f64]) -> Self {
        let n = residuals.len();
        let n_positive = residuals.iter().filter(|&&r| r > 0.0).count();
        let mut sorted = residuals.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = match n {
            0 => f64::NAN,
            n if n % 2 == 1 => sorted[n / 2],
            n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        Self {
            n_positive,
            fraction_positive: n_positive as f64 / n as f64,
            mean: residuals.iter().sum::<f64>() / n as f64,
            median,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub rows: Vec<ResidualRow>,
    pub summary: ResidualSummary,
    pub d_true_advantage: f64,
    pub d_true_inv_residual: f64,
}

/// How the power-penalty agent's prefix relates to the AUP agent's.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyComparison {
    /// Same actions at every state either agent visits before the correction.
    pub prefix_identical: bool,
    /// States (of all) where the two policies pick the same action.
    pub states_agreeing: usize,
    pub n_states: usize,
}

impl PolicyComparison {
    pub fn new(a: &AgentSummary, b: &AgentSummary, correct_at: usize) -> Self {
        let visited = a.trajectory.iter().take(correct_at).chain(b.trajectory.iter().take(correct_at));
        let prefix_identical = visited.clone().all(|&s| a.policy[s] == b.policy[s]);
        Self {
            prefix_identical,
            states_agreeing: a.policy.iter().zip(&b.policy).filter(|(x, y)| x == y).count(),
            n_states: a.policy.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub n_states: usize,
    pub agents: BTreeMap<AgentMode, AgentSummary>,
    pub report: ResidualReport,
    pub power_penalty: Option<PolicyComparison>,
}

/// `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub env: EnvKind,
    pub seed: u64,
    pub n_samples: usize,
    pub n_positive: usize,
    pub fraction_positive: f64,
    pub mean_residual: f64,
    pub median_residual: f64,
    pub d_true_advantage: f64,
    pub d_true_inv_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub power_penalty_prefix_matches_aup: Option<bool>,
}

impl ExperimentOutcome {
    pub fn summary_file(&self) -> SummaryFile {
        let s = &self.report.summary;
        SummaryFile {
            env: self.config.env,
            seed: self.config.seed,
            n_samples: self.report.rows.len(),
            n_positive: s.n_positive,
            fraction_positive: s.fraction_positive,
            mean_residual: s.mean,
            median_residual: s.median,
            d_true_advantage: self.report.d_true_advantage,
            d_true_inv_residual: self.report.d_true_inv_residual,
            power_penalty_prefix_matches_aup: self.power_penalty.map(|c| c.prefix_identical),
        }
    }

    pub fn agent(&self, mode: AgentMode) -> Option<&AgentSummary> {
        self.agents.get(&mode)
    }

    /// Writes `residuals.csv`, `summary.json` and `agents.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_residuals_csv(&self.report.rows, fs::File::create(dir.join("residuals.csv"))?)?;
        let summary = serde_json::to_string_pretty(&self.summary_file())?;
        fs::write(dir.join("summary.json"), summary + "\n")?;
        let agents = serde_json::to_string_pretty(&self.agents)?;
        fs::write(dir.join("agents.json"), agents + "\n")?;
        Ok(())
    }
}

/// Writes `sample_id,aup_score,vanilla_score,residual` with 17 significant digits.
pub fn write_residuals_csv<W: std::io::Write>(rows: &[ResidualRow], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["sample_id", "aup_score", "vanilla_score", "residual"])?;
    for row in rows {
        out.write_record([
            row.sample_id.to_string(),
            format!("{:.16e}", row.aup_score),
            format!("{:.16e}", row.vanilla_score),
            format!("{:.16e}", row.residual),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_residuals_csv<R: std::io::Read>(reader: R) -> Result<Vec<ResidualRow>> {
    let mut input = csv::Reader::from_reader(reader);
    let rows = input.deserialize().collect::<std::result::Result<Vec<ResidualRow>, _>>()?;
    Ok(rows)
}

/// Runs `f` on a pool capped by [`THREADS_ENV`] when it is set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV).ok().filter(|v| !v.trim().is_empty()) {
        None => Ok(f()),
        Some(raw) => {
            let threads: usize = raw
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV}={raw} is not a positive integer")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn mean_score(
    prefix: &Policy,
    dist: &RewardDistribution,
    correct_at: usize,
    cache: &ValueCache<'_>,
    env: &Gridworld,
) -> Result<f64> {
    let RewardDistribution::PointMass { reward } = dist else {
        unreachable!("held-out truths are point masses")
    };
    let parts = score_breakdowns(prefix, std::slice::from_ref(reward), correct_at, cache, env.mdp())?;
    Ok(parts[0].total())
}

/// Trains the agents, scores them and writes outputs when `output_dir` is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let outcome = with_thread_cap(|| compute(config))??;
    if let Some(dir) = &config.output_dir {
        outcome.write(dir)?;
    }
    Ok(outcome)
}

fn compute(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let env = config.environment()?;
    let agents = train_agents(config, &env)?;
    let vanilla = agents[&AgentMode::Vanilla].as_policy();
    let aup = agents[&AgentMode::Aup].as_policy();

    let HeldOut { rand, truth, truth_inv } = env.heldout_distributions(config.n_rand_samples, config.seed)?;
    let RewardDistribution::Empirical { members } = &rand else {
        unreachable!("random held-out rewards are empirical")
    };
    let cache = ValueCache::new(env.mdp(), config.gamma);
    let aup_scores = score_breakdowns(&aup, members, config.correct_at, &cache, env.mdp())?;
    let vanilla_scores = score_breakdowns(&vanilla, members, config.correct_at, &cache, env.mdp())?;
    let rows: Vec<ResidualRow> = aup_scores
        .iter()
        .zip(&vanilla_scores)
        .enumerate()
        .map(|(sample_id, (a, v))| {
            let (aup_score, vanilla_score) = (ScoreBreakdown::total(a), ScoreBreakdown::total(v));
            ResidualRow { sample_id, aup_score, vanilla_score, residual: aup_score - vanilla_score }
        })
        .collect();
    let residuals: Vec<f64> = rows.iter().map(|r| r.residual).collect();

    let advantage = |dist: &RewardDistribution| -> Result<f64> {
        Ok(mean_score(&aup, dist, config.correct_at, &cache, &env)?
            - mean_score(&vanilla, dist, config.correct_at, &cache, &env)?)
    };
    let report = ResidualReport {
        summary: ResidualSummary::from_residuals(&residuals),
        rows,
        d_true_advantage: advantage(&truth)?,
        d_true_inv_residual: advantage(&truth_inv)?,
    };
    let power_penalty = agents
        .get(&AgentMode::PowerPenalty)
        .map(|pp| PolicyComparison::new(&agents[&AgentMode::Aup], pp, config.correct_at));
    Ok(ExperimentOutcome { config: config.clone(), n_states: env.n_states(), agents, report, power_penalty })
}

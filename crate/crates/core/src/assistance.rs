//! The delayed-specification assistance game.
//!
//! The assistant follows a prefix policy until the human reveals the true
//! reward at a random step `t ∼ 𝒯`, then acts optimally for it. Values here
//! come in two conventions that are never mixed: [`switch_value`] and
//! [`tradeoff_decomposition`] are scaled by `(1 - γ)`, while
//! [`delayed_spec_score`] is the unnormalized score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_discount_half_open, check_discount_open, Error, Result};
use crate::mdp::{ActionId, Policy, QTable, Solution, StateId, TabularMdp};
use crate::reward::{MonteCarlo, RewardDistribution, ValueCache, ValueSample};

/// Truncation error allowed when summing over geometric correction times.
pub const SERIES_TOLERANCE: f64 = 1e-10;

/// Distribution `𝒯` of the step at which the reward is revealed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum CorrectionTime {
    /// Reveal at exactly step `t`.
    Deterministic { t: usize },
    /// `P(𝒯 = t) = (1-p)^{t-1} p` for `t ≥ 1`, with mean `1/p`.
    Geometric { p: f64 },
}

impl CorrectionTime {
    pub fn deterministic(t: usize) -> Self {
        Self::Deterministic { t }
    }

    pub fn geometric(p: f64) -> Result<Self> {
        let c = Self::Geometric { p };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Geometric { p } if !(p > 0.0 && p < 1.0) => {
                Err(Error::InvalidCorrection(format!("geometric p = {p} outside (0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// `P(𝒯 = t)`.
    pub fn probability(&self, t: usize) -> f64 {
        match *self {
            Self::Deterministic { t: at } => f64::from(u8::from(t == at)),
            Self::Geometric { p } if t >= 1 => (1.0 - p).powi(t as i32 - 1) * p,
            Self::Geometric { .. } => 0.0,
        }
    }
}

/// Smallest `H ≥ 1` with `factor · q^H ≤ SERIES_TOLERANCE`.
fn geometric_horizon(q: f64, factor: f64) -> usize {
    if factor <= SERIES_TOLERANCE || q <= 0.0 {
        return 1;
    }
    let h = ((SERIES_TOLERANCE / factor).ln() / q.ln()).ceil();
    (h as usize).max(1)
}

/// A prefix policy that may depend on the step index.
pub trait PrefixSchedule {
    fn policy_at(&self, step: usize) -> &Policy;
    fn validate(&self, mdp: &TabularMdp) -> Result<()>;
}

impl PrefixSchedule for Policy {
    fn policy_at(&self, _step: usize) -> &Policy {
        self
    }

    fn validate(&self, mdp: &TabularMdp) -> Result<()> {
        Policy::validate(self, mdp)
    }
}

/// Non-stationary policy: `steps[i]` at step `i`, then `tail` forever.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeIndexedPolicy {
    pub steps: Vec<Policy>,
    pub tail: Policy,
}

impl PrefixSchedule for TimeIndexedPolicy {
    fn policy_at(&self, step: usize) -> &Policy {
        self.steps.get(step).unwrap_or(&self.tail)
    }

    fn validate(&self, mdp: &TabularMdp) -> Result<()> {
        self.steps.iter().chain([&self.tail]).try_for_each(|p| p.validate(mdp))
    }
}

/// State distribution after following `policy` for `steps` steps from `start`.
pub fn state_distribution(
    mdp: &TabularMdp,
    policy: &Policy,
    steps: usize,
    start: StateId,
) -> Result<Vec<f64>> {
    policy.validate(mdp)?;
    if start >= mdp.n_states() {
        return Err(Error::InvalidMdp(format!("start state {start} out of range")));
    }
    Ok(visit_distributions(mdp, policy, start, steps).pop().expect("nonempty"))
}

/// `d_0, …, d_last` under a prefix schedule.
fn visit_distributions(
    mdp: &TabularMdp,
    prefix: &impl PrefixSchedule,
    start: StateId,
    last: usize,
) -> Vec<Vec<f64>> {
    let mut d = vec![0.0; mdp.n_states()];
    d[start] = 1.0;
    let mut out = Vec::with_capacity(last + 1);
    out.push(d);
    for i in 0..last {
        let next = prefix.policy_at(i).propagate(mdp, &out[i]);
        out.push(next);
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Expectations under `𝒟` that every game quantity is built from.
#[derive(Clone, Debug, PartialEq)]
pub struct GameValues {
    /// `R̄(s)`.
    pub mean_reward: Vec<f64>,
    /// `V_avg(s, γ)`.
    pub avg_value: Vec<f64>,
    /// `POWER(s, γ) = (1-γ)/γ · (V_avg(s, γ) - R̄(s))`.
    pub power: Vec<f64>,
    /// Whether `avg_value` is an exact expectation.
    pub exact: bool,
}

/// Optional parts of a game.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GameOptions {
    /// Baseline `π^∅` for the baseline-relative reward.
    #[serde(default)]
    pub baseline_policy: Option<Policy>,
    /// Designated no-op action; the default baseline always takes it.
    #[serde(default)]
    pub noop_action: Option<ActionId>,
    /// Draws used when `𝒟` has continuous support.
    #[serde(default)]
    pub monte_carlo: MonteCarlo,
}

/// `⟨MDP, 𝒟, 𝒯, γ, s₀⟩` together with the solved expectations.
#[derive(Clone, Debug)]
pub struct DelayedSpecGame {
    mdp: TabularMdp,
    dist: RewardDistribution,
    correction: CorrectionTime,
    gamma: f64,
    options: GameOptions,
    values: GameValues,
}

impl DelayedSpecGame {
    pub fn new(
        mdp: TabularMdp,
        dist: RewardDistribution,
        correction: CorrectionTime,
        gamma: f64,
    ) -> Result<Self> {
        Self::with_options(mdp, dist, correction, gamma, GameOptions::default())
    }

    /// Validates the game and solves `V*_R` for every reward in the support of `𝒟`.
    pub fn with_options(
        mdp: TabularMdp,
        dist: RewardDistribution,
        correction: CorrectionTime,
        gamma: f64,
        options: GameOptions,
    ) -> Result<Self> {
        check_discount_open(gamma)?;
        correction.validate()?;
        let n = mdp.n_states();
        if let Some(policy) = &options.baseline_policy {
            policy.validate(&mdp)?;
        }
        if let Some(a) = options.noop_action {
            if a >= mdp.n_actions() {
                return Err(Error::InvalidConfig(format!("no-op action {a} out of range")));
            }
        }
        let mean_reward = dist.mean_reward(n)?;
        let support = dist.expectation_support(n, &options.monte_carlo)?;
        let sample = ValueSample::compute(&mdp, support, gamma)?;
        let avg_value = sample.avg_values();
        let scale = (1.0 - gamma) / gamma;
        let power = avg_value.iter().zip(&mean_reward).map(|(v, r)| scale * (v - r)).collect();
        let values = GameValues { mean_reward, avg_value, power, exact: sample.support().exact };
        Ok(Self { mdp, dist, correction, gamma, options, values })
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn distribution(&self) -> &RewardDistribution {
        &self.dist
    }

    pub fn correction(&self) -> CorrectionTime {
        self.correction
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn values(&self) -> &GameValues {
        &self.values
    }

    pub fn options(&self) -> &GameOptions {
        &self.options
    }

    /// The explicit baseline, or the always-no-op policy when a no-op is designated.
    pub fn baseline_policy(&self) -> Result<Policy> {
        match (&self.options.baseline_policy, self.options.noop_action) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(a)) => Ok(Policy::constant(self.mdp.n_states(), a)),
            (None, None) => Err(Error::InvalidConfig(
                "baseline policy required: no no-op action is designated".into(),
            )),
        }
    }

    fn geometric_p(&self) -> Result<f64> {
        match self.correction {
            CorrectionTime::Geometric { p } => Ok(p),
            CorrectionTime::Deterministic { .. } => Err(Error::InvalidCorrection(
                "this construction requires a geometric correction time".into(),
            )),
        }
    }
}

/// Normalized expected return of the switch policy built on `prefix`:
/// `(1-γ) E_{t,R}[Σ_{i<t} γ^i R(s_i) + γ^t V*_R(s_t, γ)]` from `s₀`.
pub fn switch_value(game: &DelayedSpecGame, prefix: &impl PrefixSchedule) -> Result<f64> {
    prefix.validate(&game.mdp)?;
    let g = game.gamma;
    let v = &game.values;
    let s0 = game.mdp.initial_state();
    let total = match game.correction {
        CorrectionTime::Deterministic { t } => {
            let d = visit_distributions(&game.mdp, prefix, s0, t);
            let prefix_part: f64 =
                (0..t).map(|i| g.powi(i as i32) * dot(&d[i], &v.mean_reward)).sum();
            prefix_part + g.powi(t as i32) * dot(&d[t], &v.avg_value)
        }
        CorrectionTime::Geometric { p } => {
            // Tail of both series is at most B·q^H with q = (1-p)γ.
            let q = (1.0 - p) * g;
            let h = geometric_horizon(q, game.dist.support_bound());
            let d = visit_distributions(&game.mdp, prefix, s0, h);
            let prefix_part: f64 = (0..h).map(|i| q.powi(i as i32) * dot(&d[i], &v.mean_reward)).sum();
            let reveal_part: f64 = (1..=h)
                .map(|t| game.correction.probability(t) * g.powi(t as i32) * dot(&d[t], &v.avg_value))
                .sum();
            prefix_part + reveal_part
        }
    };
    Ok((1.0 - g) * total)
}

/// Average-reward and POWER terms whose sum is the switch value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `(1-γ) E_t[Σ_{i=0}^{t} γ^i E[R̄(s_i)]]`.
    pub reward_term: f64,
    /// `E_{t, s_t}[γ^{t+1} POWER(s_t, γ)]`.
    pub power_term: f64,
}

impl Decomposition {
    pub fn total(&self) -> f64 {
        self.reward_term + self.power_term
    }
}

/// Splits the switch value into expected `R̄`-return and expected POWER at the reveal.
pub fn tradeoff_decomposition(
    game: &DelayedSpecGame,
    prefix: &impl PrefixSchedule,
) -> Result<Decomposition> {
    prefix.validate(&game.mdp)?;
    let g = game.gamma;
    let v = &game.values;
    let s0 = game.mdp.initial_state();
    let (reward_sum, power_term) = match game.correction {
        CorrectionTime::Deterministic { t } => {
            let d = visit_distributions(&game.mdp, prefix, s0, t);
            let reward: f64 = (0..=t).map(|i| g.powi(i as i32) * dot(&d[i], &v.mean_reward)).sum();
            (reward, g.powi(t as i32 + 1) * dot(&d[t], &v.power))
        }
        CorrectionTime::Geometric { p } => {
            let q = (1.0 - p) * g;
            let b = game.dist.support_bound();
            let factor = b * g * ((1.0 - g) + p * (2.0 - g)) / (1.0 - q);
            let h = geometric_horizon(q, factor);
            let d = visit_distributions(&game.mdp, prefix, s0, h);
            // P(𝒯 ≥ i) = (1-p)^{i-1} for i ≥ 1.
            let reward: f64 = dot(&d[0], &v.mean_reward)
                + (1..=h)
                    .map(|i| g.powi(i as i32) * (1.0 - p).powi(i as i32 - 1) * dot(&d[i], &v.mean_reward))
                    .sum::<f64>();
            let power: f64 = (1..=h)
                .map(|t| game.correction.probability(t) * g.powi(t as i32 + 1) * dot(&d[t], &v.power))
                .sum();
            (reward, power)
        }
    };
    Ok(Decomposition { reward_term: (1.0 - g) * reward_sum, power_term })
}

/// The stationary MDP whose optimal policies are optimal prefixes under geometric `𝒯`.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    /// `R'(s) = (1-p) R̄(s) + p V_avg(s, γ)`.
    pub reward: Vec<f64>,
    /// `γ_aup = (1-p) γ`.
    pub gamma_aup: f64,
}

impl Surrogate {
    pub fn solve(&self, mdp: &TabularMdp) -> Result<Solution> {
        crate::mdp::policy_iteration(mdp, &crate::mdp::RewardFunction::State(self.reward.clone()), self.gamma_aup)
    }
}

pub fn stationary_surrogate(game: &DelayedSpecGame) -> Result<Surrogate> {
    let p = game.geometric_p()?;
    let v = &game.values;
    let reward = v
        .mean_reward
        .iter()
        .zip(&v.avg_value)
        .map(|(r, va)| (1.0 - p) * r + p * va)
        .collect();
    Ok(Surrogate { reward, gamma_aup: (1.0 - p) * game.gamma })
}

/// Optimal stationary prefix policy via the surrogate MDP.
pub fn surrogate_prefix(game: &DelayedSpecGame) -> Result<Policy> {
    Ok(stationary_surrogate(game)?.solve(&game.mdp)?.policy)
}

/// Baseline-relative reward at step `step`:
/// `R̄(s) - p/(1-p) · (E_{s^∅_step}[V_avg(s^∅_step)] - V_avg(s))`,
/// with `s^∅_step` distributed as `π^∅` run for `step` steps from `s₀`.
pub fn assist_reward(game: &DelayedSpecGame, baseline: &Policy, step: usize) -> Result<Vec<f64>> {
    let p = game.geometric_p()?;
    let d = state_distribution(&game.mdp, baseline, step, game.mdp.initial_state())?;
    Ok(assist_reward_from(game, p, &d))
}

fn assist_reward_from(game: &DelayedSpecGame, p: f64, baseline_dist: &[f64]) -> Vec<f64> {
    let v = &game.values;
    let baseline_value = dot(baseline_dist, &v.avg_value);
    let k = p / (1.0 - p);
    v.mean_reward
        .iter()
        .zip(&v.avg_value)
        .map(|(r, va)| r - k * (baseline_value - va))
        .collect()
}

/// Maximizes `Σ_i γ_aup^i E[R^assist_i(s_i)]` by backward induction.
///
/// The horizon is long enough that the ignored tail is below `1e-13`; after it
/// the schedule keeps its last policy.
pub fn assist_optimal_prefix(game: &DelayedSpecGame, baseline: &Policy) -> Result<TimeIndexedPolicy> {
    let p = game.geometric_p()?;
    baseline.validate(&game.mdp)?;
    let mdp = &game.mdp;
    let gamma_aup = (1.0 - p) * game.gamma;
    let b = game.dist.support_bound();
    let reward_bound = b * (1.0 + 2.0 * p / ((1.0 - p) * (1.0 - game.gamma)));
    let factor = reward_bound / (1.0 - gamma_aup);
    let h = if factor == 0.0 {
        1
    } else {
        (((1e-13 / factor).ln() / gamma_aup.ln()).ceil() as usize).max(1)
    };
    let baseline_dists = visit_distributions(mdp, baseline, mdp.initial_state(), h);
    let mut continuation = vec![0.0; mdp.n_states()];
    let mut steps = vec![Policy::constant(mdp.n_states(), 0); h];
    for i in (0..h).rev() {
        let reward = assist_reward_from(game, p, &baseline_dists[i]);
        let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                q.set(s, a, reward[s] + gamma_aup * mdp.expect(s, a, &continuation));
            }
        }
        steps[i] = q.greedy_policy();
        continuation = (0..mdp.n_states()).map(|s| q.row_max(s)).collect();
    }
    let tail = steps[h - 1].clone();
    Ok(TimeIndexedPolicy { steps, tail })
}

/// Delayed specification score of one reward, split into its two parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    /// `Σ_{i<t} γ^i E[R(s_i)]`.
    pub prefix_return: f64,
    /// `γ^t E[V*_R(s_t, γ)]`.
    pub post_correction: f64,
}

impl ScoreBreakdown {
    pub fn total(&self) -> f64 {
        self.prefix_return + self.post_correction
    }
}

/// Prefix state distributions `d_0, …, d_t` used for scoring.
pub fn prefix_distributions(
    mdp: &TabularMdp,
    prefix: &Policy,
    correct_at: usize,
) -> Result<Vec<Vec<f64>>> {
    prefix.validate(mdp)?;
    Ok(visit_distributions(mdp, prefix, mdp.initial_state(), correct_at))
}

/// Score of one reward given the prefix distributions and `V*_R`.
pub fn score_with(dists: &[Vec<f64>], reward: &[f64], optimal: &[f64], gamma: f64) -> ScoreBreakdown {
    let t = dists.len() - 1;
    let prefix_return = (0..t).map(|i| gamma.powi(i as i32) * dot(&dists[i], reward)).sum();
    let post_correction = gamma.powi(t as i32) * dot(&dists[t], optimal);
    ScoreBreakdown { prefix_return, post_correction }
}

/// Per-reward score breakdowns, solving (and caching) `V*_R` as needed.
pub fn score_breakdowns(
    prefix: &Policy,
    rewards: &[Vec<f64>],
    correct_at: usize,
    cache: &ValueCache<'_>,
    mdp: &TabularMdp,
) -> Result<Vec<ScoreBreakdown>> {
    if correct_at == 0 {
        return Err(Error::InvalidConfig("correct_at must be at least 1".into()));
    }
    let dists = prefix_distributions(mdp, prefix, correct_at)?;
    rewards
        .par_iter()
        .map(|r| {
            crate::error::check_len("reward", mdp.n_states(), r.len())?;
            let v = cache.optimal_values(r)?;
            Ok(score_with(&dists, r, &v, cache.gamma()))
        })
        .collect()
}

/// `E_{R∼𝒟}[Σ_{i<t} γ^i E[R(s_i)] + γ^t E[V*_R(s_t, γ)]]`, unnormalized.
///
/// Exact for point-mass and empirical `𝒟`; continuous `𝒟` uses the default
/// Monte Carlo settings.
pub fn delayed_spec_score(
    mdp: &TabularMdp,
    prefix: &Policy,
    dist: &RewardDistribution,
    gamma: f64,
    correct_at: usize,
) -> Result<f64> {
    check_discount_half_open(gamma)?;
    let support = dist.expectation_support(mdp.n_states(), &MonteCarlo::default())?;
    let cache = ValueCache::new(mdp, gamma);
    let parts = score_breakdowns(prefix, &support.members, correct_at, &cache, mdp)?;
    Ok(parts.iter().map(ScoreBreakdown::total).sum::<f64>() / parts.len() as f64)
}

/// Writes `sample_id,score,prefix_return_term,post_correction_term` rows.
pub fn write_score_csv<W: std::io::Write>(rows: &[ScoreBreakdown], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["sample_id", "score", "prefix_return_term", "post_correction_term"])?;
    for (i, row) in rows.iter().enumerate() {
        out.write_record([
            i.to_string(),
            format!("{:.16e}", row.total()),
            format!("{:.16e}", row.prefix_return),
            format!("{:.16e}", row.post_correction),
        ])?;
    }
    out.flush()?;
    Ok(())
}

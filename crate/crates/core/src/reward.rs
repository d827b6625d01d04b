//! Reward-function distributions and the quantities derived from them:
//! the mean reward, average optimal value and POWER.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_discount_closed, check_discount_open, check_len, Error, Result};
use crate::mdp::{limit_discount, optimal_values, StateId, TabularMdp};

/// Default number of Monte Carlo draws for continuous distributions.
pub const DEFAULT_MC_SAMPLES: usize = 1_000;

/// Stream domains keep independent uses of one experiment seed apart.
pub mod domain {
    pub const MONTE_CARLO: u64 = 1;
    pub const AUXILIARY: u64 = 2;
    pub const HELDOUT: u64 = 3;
    pub const Q_LEARNING: u64 = 4;
    pub const VERIFY: u64 = 5;
}

/// Deterministic RNG for draw `index` of `domain` under `seed`.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// A distribution `𝒟` over state-based reward functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case", try_from = "RawDistribution")]
pub enum RewardDistribution {
    PointMass { reward: Vec<f64> },
    Empirical { members: Vec<Vec<f64>> },
    IidUniform { lo: f64, hi: f64 },
}

#[derive(Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
enum RawDistribution {
    PointMass { reward: Vec<f64> },
    Empirical { members: Vec<Vec<f64>> },
    IidUniform { lo: f64, hi: f64 },
}

impl TryFrom<RawDistribution> for RewardDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        match raw {
            RawDistribution::PointMass { reward } => Self::point_mass(reward),
            RawDistribution::Empirical { members } => Self::empirical(members),
            RawDistribution::IidUniform { lo, hi } => Self::iid_uniform(lo, hi),
        }
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::InvalidDistribution(format!("non-finite reward {v}"))),
        None => Ok(()),
    }
}

impl RewardDistribution {
    pub fn point_mass(reward: Vec<f64>) -> Result<Self> {
        check_finite(&reward)?;
        Ok(Self::PointMass { reward })
    }

    pub fn empirical(members: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::InvalidDistribution("empirical distribution is empty".into()));
        };
        let width = first.len();
        for m in &members {
            check_len("empirical member", width, m.len())?;
            check_finite(m)?;
        }
        Ok(Self::Empirical { members })
    }

    pub fn iid_uniform(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidDistribution(format!("bad uniform support [{lo}, {hi}]")));
        }
        Ok(Self::IidUniform { lo, hi })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Number of states the distribution is defined over, if it fixes one.
    pub fn n_states(&self) -> Option<usize> {
        match self {
            Self::PointMass { reward } => Some(reward.len()),
            Self::Empirical { members } => Some(members[0].len()),
            Self::IidUniform { .. } => None,
        }
    }

    pub fn check_states(&self, n_states: usize) -> Result<()> {
        match self.n_states() {
            Some(n) => check_len("reward distribution states", n_states, n),
            None => Ok(()),
        }
    }

    /// Largest `|R(s)|` over the support.
    pub fn support_bound(&self) -> f64 {
        let max_abs = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        match self {
            Self::PointMass { reward } => max_abs(reward),
            Self::Empirical { members } => members.iter().map(|m| max_abs(m)).fold(0.0, f64::max),
            Self::IidUniform { lo, hi } => lo.abs().max(hi.abs()),
        }
    }

    /// Whether expectations can be computed by enumeration.
    pub fn is_finite_support(&self) -> bool {
        !matches!(self, Self::IidUniform { .. })
    }

    /// The average reward function `R̄ = E[R]`.
    pub fn mean_reward(&self, n_states: usize) -> Result<Vec<f64>> {
        self.check_states(n_states)?;
        Ok(match self {
            Self::PointMass { reward } => reward.clone(),
            Self::Empirical { members } => {
                let mut mean = vec![0.0; n_states];
                for m in members {
                    for (acc, x) in mean.iter_mut().zip(m) {
                        *acc += x;
                    }
                }
                let n = members.len() as f64;
                mean.iter_mut().for_each(|x| *x /= n);
                mean
            }
            Self::IidUniform { lo, hi } => vec![0.5 * (lo + hi); n_states],
        })
    }

    /// Draws one reward function; deterministic in `seed`.
    pub fn sample_reward(&self, n_states: usize, seed: u64) -> Result<Vec<f64>> {
        self.check_states(n_states)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.draw(n_states, &mut rng))
    }

    fn draw(&self, n_states: usize, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Self::PointMass { reward } => reward.clone(),
            Self::Empirical { members } => members[rng.random_range(0..members.len())].clone(),
            Self::IidUniform { lo, hi } => {
                (0..n_states).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
            }
        }
    }

    /// `count` independent draws derived from `seed` by counter.
    pub fn sample_many(&self, n_states: usize, count: usize, seed: u64, domain: u64) -> Result<Vec<Vec<f64>>> {
        self.check_states(n_states)?;
        Ok((0..count)
            .map(|i| self.draw(n_states, &mut stream_rng(seed, domain, i as u64)))
            .collect())
    }

    /// Reward functions over which expectations are taken: the exact support
    /// for finite variants, seeded Monte Carlo draws otherwise.
    pub fn expectation_support(&self, n_states: usize, mc: &MonteCarlo) -> Result<Support> {
        self.check_states(n_states)?;
        Ok(match self {
            Self::PointMass { reward } => Support { members: vec![reward.clone()], exact: true },
            Self::Empirical { members } => Support { members: members.clone(), exact: true },
            Self::IidUniform { .. } => {
                if mc.samples == 0 {
                    return Err(Error::InvalidConfig("mc_samples must be at least 1".into()));
                }
                Support {
                    members: self.sample_many(n_states, mc.samples, mc.seed, domain::MONTE_CARLO)?,
                    exact: false,
                }
            }
        })
    }

    /// Writes empirical members as CSV, one reward vector per row.
    pub fn write_members_csv<W: Write>(&self, writer: W) -> Result<()> {
        let Self::Empirical { members } = self else {
            return Err(Error::InvalidDistribution("only empirical distributions have members".into()));
        };
        write_rewards_csv(members, writer)
    }
}

/// Writes reward vectors as CSV with a `s0,s1,…` header.
pub fn write_rewards_csv<W: Write>(rewards: &[Vec<f64>], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    if let Some(first) = rewards.first() {
        out.write_record((0..first.len()).map(|s| format!("s{s}")))?;
    }
    for r in rewards {
        out.write_record(r.iter().map(|x| format!("{x:.16e}")))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads reward vectors written by [`write_rewards_csv`].
pub fn read_rewards_csv<R: Read>(reader: R) -> Result<Vec<Vec<f64>>> {
    let mut input = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for record in input.records() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidDistribution(format!("bad reward `{field}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Monte Carlo settings for distributions without finite support.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub samples: usize,
    pub seed: u64,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        Self { samples: DEFAULT_MC_SAMPLES, seed: 0 }
    }
}

/// Reward functions that stand in for `𝒟` in an expectation.
#[derive(Clone, Debug, PartialEq)]
pub struct Support {
    pub members: Vec<Vec<f64>>,
    /// True when the members are the distribution itself (equal weights).
    pub exact: bool,
}

/// Point estimate with its standard error (zero for exact expectations).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(mean: f64) -> Self {
        Self { mean, std_error: 0.0 }
    }

    fn from_samples(samples: impl Iterator<Item = f64> + Clone, exact: bool) -> Self {
        let n = samples.clone().count() as f64;
        let mean = samples.clone().sum::<f64>() / n;
        if exact || n < 2.0 {
            return Self::exact(mean);
        }
        let var = samples.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { mean, std_error: (var / n).sqrt() }
    }
}

/// Parameters of a POWER / average-value query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerQuery {
    pub state: StateId,
    pub gamma: f64,
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PowerQuery {
    pub fn new(state: StateId, gamma: f64) -> Self {
        Self { state, gamma, mc_samples: DEFAULT_MC_SAMPLES, seed: 0 }
    }

    fn monte_carlo(&self) -> MonteCarlo {
        MonteCarlo { samples: self.mc_samples, seed: self.seed }
    }
}

/// Memoized `V*` solves for one MDP and discount, keyed by the reward's bit pattern.
///
/// Safe for concurrent use; duplicate solves under a race are harmless.
pub struct ValueCache<'a> {
    mdp: &'a TabularMdp,
    gamma: f64,
    solved: RwLock<HashMap<Vec<u64>, Arc<Vec<f64>>>>,
}

impl<'a> ValueCache<'a> {
    pub fn new(mdp: &'a TabularMdp, gamma: f64) -> Self {
        Self { mdp, gamma, solved: RwLock::new(HashMap::new()) }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.solved.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `V*_R` at the cache's discount.
    pub fn optimal_values(&self, reward: &[f64]) -> Result<Arc<Vec<f64>>> {
        let key: Vec<u64> = reward.iter().map(|x| x.to_bits()).collect();
        if let Some(v) = self.solved.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(v));
        }
        let values = Arc::new(optimal_values(self.mdp, reward, self.gamma)?);
        self.solved
            .write()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| Arc::clone(&values));
        Ok(values)
    }
}

/// Optimal values of every reward in a [`Support`], at one discount.
#[derive(Clone, Debug)]
pub struct ValueSample {
    gamma: f64,
    support: Support,
    values: Vec<Arc<Vec<f64>>>,
}

impl ValueSample {
    /// Solves `V*_R` for every support member; `gamma` must lie in `(0, 1)`.
    pub fn compute(mdp: &TabularMdp, support: Support, gamma: f64) -> Result<Self> {
        check_discount_open(gamma)?;
        for m in &support.members {
            check_len("support member", mdp.n_states(), m.len())?;
        }
        let cache = ValueCache::new(mdp, gamma);
        let values = support
            .members
            .par_iter()
            .map(|r| cache.optimal_values(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { gamma, support, values })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    /// Per-member optimal value vectors, aligned with `support().members`.
    pub fn values(&self) -> &[Arc<Vec<f64>>] {
        &self.values
    }

    /// `V_avg(s, γ) = E[V*_R(s, γ)]`.
    pub fn avg_value(&self, s: StateId) -> Estimate {
        Estimate::from_samples(self.values.iter().map(move |v| v[s]), self.support.exact)
    }

    pub fn avg_values(&self) -> Vec<f64> {
        let n = self.values.first().map_or(0, |v| v.len());
        (0..n).map(|s| self.avg_value(s).mean).collect()
    }

    /// `POWER(s, γ) = (1-γ)/γ · E[V*_R(s, γ) - R(s)]`, estimated per draw.
    pub fn power(&self, s: StateId) -> Estimate {
        let scale = (1.0 - self.gamma) / self.gamma;
        let samples = self
            .values
            .iter()
            .zip(&self.support.members)
            .map(move |(v, r)| scale * (v[s] - r[s]));
        Estimate::from_samples(samples, self.support.exact)
    }
}

/// `R̄ = E_{R∼𝒟}[R]` as a state-based reward vector.
pub fn mean_reward(dist: &RewardDistribution, n_states: usize) -> Result<Vec<f64>> {
    dist.mean_reward(n_states)
}

/// POWER at `query.state`; the endpoints `γ ∈ {0, 1}` are evaluated at
/// [`limit_discount`].
pub fn power(dist: &RewardDistribution, mdp: &TabularMdp, query: &PowerQuery) -> Result<Estimate> {
    check_discount_closed(query.gamma)?;
    check_state(mdp, query.state)?;
    let gamma = limit_discount(query.gamma);
    let support = dist.expectation_support(mdp.n_states(), &query.monte_carlo())?;
    Ok(ValueSample::compute(mdp, support, gamma)?.power(query.state))
}

/// Average optimal value `E[V*_R(s, γ)]` for `γ ∈ (0, 1)`.
pub fn avg_optimal_value(
    dist: &RewardDistribution,
    mdp: &TabularMdp,
    query: &PowerQuery,
) -> Result<Estimate> {
    check_discount_open(query.gamma)?;
    check_state(mdp, query.state)?;
    let support = dist.expectation_support(mdp.n_states(), &query.monte_carlo())?;
    Ok(ValueSample::compute(mdp, support, query.gamma)?.avg_value(query.state))
}

fn check_state(mdp: &TabularMdp, s: StateId) -> Result<()> {
    if s < mdp.n_states() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("state {s} out of range for {} states", mdp.n_states())))
    }
}

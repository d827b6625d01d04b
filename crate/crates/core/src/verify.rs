//! Randomized numerical checks of the game identities on small MDPs.
//!
//! Every check compares two independently computed sides and reports the
//! largest discrepancy seen over its cases.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assistance::{
    assist_optimal_prefix, switch_value, surrogate_prefix, tradeoff_decomposition, CorrectionTime,
    DelayedSpecGame, GameOptions,
};
use crate::error::Result;
use crate::mdp::{deterministic_policies, optimal_values, Policy, TabularMdp};
use crate::reward::{domain, mean_reward, stream_rng, MonteCarlo, RewardDistribution, ValueSample};

/// Absolute tolerance of the exact identities.
pub const TOLERANCE: f64 = 1e-8;

const DISCOUNTS: [f64; 2] = [0.3, 0.9];
const REVEAL_PROBABILITIES: [f64; 3] = [0.1, 0.5, 0.9];

/// One row of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: &str, tolerance: f64) -> Self {
        Self { name: name.to_string(), cases: 0, max_error: 0.0, tolerance }
    }

    fn record(&mut self, error: f64) {
        self.cases += 1;
        // NaN must fail, so it wins the max.
        if error.is_nan() || error > self.max_error {
            self.max_error = error;
        }
    }

    fn merge(mut self, other: &Self) -> Self {
        self.cases += other.cases;
        if other.max_error.is_nan() || other.max_error > self.max_error {
            self.max_error = other.max_error;
        }
        self
    }

    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub n_cases: usize,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>6} {:>12} {:>10}  result", "check", "cases", "max_error", "tolerance")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<24} {:>6} {:>12.3e} {:>10.1e}  {}",
                c.name,
                c.cases,
                c.max_error,
                c.tolerance,
                if c.passed() { "pass" } else { "FAIL" }
            )?;
        }
        write!(f, "{} ({} cases, seed {})", if self.passed() { "PASS" } else { "FAIL" }, self.n_cases, self.seed)
    }
}

fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut row = vec![0.0; n];
    let k = rng.random_range(1..=n.min(3));
    for _ in 0..k {
        row[rng.random_range(0..n)] += rng.random_range(0.1..1.0);
    }
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    row
}

/// Random MDP with up to 6 states and 3 actions.
pub fn random_mdp(rng: &mut ChaCha8Rng) -> TabularMdp {
    let n = rng.random_range(2..=6);
    let na = rng.random_range(1..=3);
    let flat = (0..n * na).flat_map(|_| random_row(rng, n)).collect();
    TabularMdp::from_flat(n, na, flat, 0).expect("rows are normalized")
}

/// An MDP where every state offers the same successor distributions, so
/// `V*_R(s) - R(s)` does not depend on `s` and POWER is constant.
pub fn symmetric_mdp(rng: &mut ChaCha8Rng) -> TabularMdp {
    let n = rng.random_range(2..=6);
    let na = rng.random_range(2..=3);
    let rows: Vec<Vec<f64>> = (0..na).map(|_| random_row(rng, n)).collect();
    let mut flat = Vec::with_capacity(n * na * n);
    for _ in 0..n {
        let mut order: Vec<usize> = (0..na).collect();
        order.shuffle(rng);
        for a in order {
            flat.extend(&rows[a]);
        }
    }
    TabularMdp::from_flat(n, na, flat, 0).expect("rows are normalized")
}

fn random_empirical(rng: &mut ChaCha8Rng, n: usize) -> RewardDistribution {
    let k = rng.random_range(1..=5);
    let members = (0..k).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    RewardDistribution::empirical(members).expect("bounded members")
}

fn random_policy(rng: &mut ChaCha8Rng, mdp: &TabularMdp) -> Policy {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    if rng.random_bool(0.5) {
        Policy::Deterministic((0..n).map(|_| rng.random_range(0..na)).collect())
    } else {
        Policy::Stochastic((0..n).map(|_| random_row(rng, na)).collect())
    }
}

/// Best switch value over all deterministic stationary prefixes.
fn enumerate_best<T>(
    game: &DelayedSpecGame,
    mut score: impl FnMut(&Policy) -> Result<T>,
    key: impl Fn(&T) -> f64,
) -> Result<f64> {
    let mdp = game.mdp();
    let mut best = f64::NEG_INFINITY;
    for policy in deterministic_policies(mdp.n_states(), mdp.n_actions()) {
        best = best.max(key(&score(&policy)?));
    }
    Ok(best)
}

fn spread(values: impl IntoIterator<Item = f64>) -> f64 {
    let (lo, hi) = values
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi - lo
}

const CHECKS: [(&str, f64); 10] = [
    ("decomposition", TOLERANCE),
    ("avg-value-identity", TOLERANCE),
    ("shift-equivariance", TOLERANCE),
    ("surrogate-optimality", TOLERANCE),
    ("assist-equivalence", TOLERANCE),
    ("power-maximization", TOLERANCE),
    ("reward-maximization", TOLERANCE),
    ("reveal-at-zero", TOLERANCE),
    ("tiny-discount", TOLERANCE),
    // In units of standard errors beyond [0.5, 1]; POWER of iid U(0,1) rewards.
    ("power-bounds", 3.0),
];

fn run_case(seed: u64, index: usize) -> Result<Vec<CheckResult>> {
    let mut out: Vec<CheckResult> = CHECKS.iter().map(|&(n, t)| CheckResult::new(n, t)).collect();
    let mut rng = stream_rng(seed, domain::VERIFY, index as u64);
    let gamma = DISCOUNTS[index % 2];

    // Decomposition on arbitrary prefixes.
    let mdp = random_mdp(&mut rng);
    let dist = random_empirical(&mut rng, mdp.n_states());
    let correction = if index % 4 < 2 {
        CorrectionTime::deterministic(3)
    } else {
        CorrectionTime::geometric(0.3)?
    };
    let game = DelayedSpecGame::new(mdp.clone(), dist.clone(), correction, gamma)?;
    let prefix = random_policy(&mut rng, &mdp);
    let parts = tradeoff_decomposition(&game, &prefix)?;
    out[0].record((parts.total() - switch_value(&game, &prefix)?).abs());

    // V_avg = γ/(1-γ) POWER + R̄, state by state, POWER from per-member values.
    let mean = mean_reward(&dist, mdp.n_states())?;
    for g in [0.3, 0.7, 0.996] {
        let support = dist.expectation_support(mdp.n_states(), &MonteCarlo::default())?;
        let sample = ValueSample::compute(&mdp, support, g)?;
        for s in 0..mdp.n_states() {
            let rhs = g / (1.0 - g) * sample.power(s).mean + mean[s];
            out[1].record((sample.avg_value(s).mean - rhs).abs());
        }
    }

    // R + c: V* moves by c/(1-γ) and POWER by c.
    let reward: Vec<f64> = (0..mdp.n_states()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = rng.random_range(-2.0..2.0);
    let shifted: Vec<f64> = reward.iter().map(|r| r + c).collect();
    let v = optimal_values(&mdp, &reward, gamma)?;
    let vc = optimal_values(&mdp, &shifted, gamma)?;
    let pw = |v: &[f64], r: &[f64], s: usize| (1.0 - gamma) / gamma * (v[s] - r[s]);
    for s in 0..mdp.n_states() {
        out[2].record((vc[s] - v[s] - c / (1.0 - gamma)).abs());
        out[2].record((pw(&vc, &shifted, s) - pw(&v, &reward, s) - c).abs());
    }

    // Geometric reveal: surrogate and baseline-relative constructions vs enumeration.
    let p = REVEAL_PROBABILITIES[(index / 2) % 3];
    let noop = rng.random_range(0..mdp.n_actions());
    let options = GameOptions { noop_action: Some(noop), ..GameOptions::default() };
    let geo = DelayedSpecGame::with_options(mdp.clone(), dist, CorrectionTime::geometric(p)?, gamma, options)?;
    let best = enumerate_best(&geo, |pi| switch_value(&geo, pi), |v| *v)?;
    out[3].record((best - switch_value(&geo, &surrogate_prefix(&geo)?)?).abs());
    let assist = assist_optimal_prefix(&geo, &geo.baseline_policy()?)?;
    out[4].record((best - switch_value(&geo, &assist)?).abs());

    // Constant mean reward: the surrogate maximizes the POWER term alone.
    let iid = DelayedSpecGame::new(
        mdp.clone(),
        RewardDistribution::iid_uniform(0.0, 1.0)?,
        CorrectionTime::geometric(p)?,
        gamma,
    )?;
    let chosen = tradeoff_decomposition(&iid, &surrogate_prefix(&iid)?)?;
    let mut reward_terms = Vec::new();
    let best_power = enumerate_best(
        &iid,
        |pi| {
            let d = tradeoff_decomposition(&iid, pi)?;
            reward_terms.push(d.reward_term);
            Ok(d)
        },
        |d| d.power_term,
    )?;
    out[5].record((best_power - chosen.power_term).abs().max(spread(reward_terms)));

    // Constant POWER: the surrogate maximizes the mean-reward term alone.
    let sym = symmetric_mdp(&mut rng);
    let sym_dist = random_empirical(&mut rng, sym.n_states());
    let sym_game = DelayedSpecGame::new(sym, sym_dist, CorrectionTime::geometric(p)?, gamma)?;
    let chosen = tradeoff_decomposition(&sym_game, &surrogate_prefix(&sym_game)?)?;
    let best_reward = enumerate_best(&sym_game, |pi| tradeoff_decomposition(&sym_game, pi), |d| d.reward_term)?;
    let power_spread = spread(sym_game.values().power.iter().copied());
    out[6].record((best_reward - chosen.reward_term).abs().max(power_spread));

    // Degenerate games: every prefix is optimal.
    let dist = random_empirical(&mut rng, mdp.n_states());
    let at_zero = DelayedSpecGame::new(mdp.clone(), dist.clone(), CorrectionTime::deterministic(0), gamma)?;
    let values = deterministic_policies(mdp.n_states(), mdp.n_actions())
        .map(|pi| switch_value(&at_zero, &pi))
        .collect::<Result<Vec<_>>>()?;
    out[7].record(spread(values));
    let tiny = DelayedSpecGame::new(mdp.clone(), dist, CorrectionTime::geometric(p)?, 1e-10)?;
    let values = deterministic_policies(mdp.n_states(), mdp.n_actions())
        .map(|pi| switch_value(&tiny, &pi))
        .collect::<Result<Vec<_>>>()?;
    out[8].record(spread(values));

    // POWER under iid U(0,1) rewards lies between the mean and the max of a draw.
    let uniform = RewardDistribution::iid_uniform(0.0, 1.0)?;
    let support = uniform.expectation_support(mdp.n_states(), &MonteCarlo::default())?;
    let sample = ValueSample::compute(&mdp, support, gamma)?;
    for s in 0..mdp.n_states() {
        let est = sample.power(s);
        let excess = (0.5 - est.mean).max(est.mean - 1.0).max(0.0);
        out[9].record(excess / est.std_error.max(1e-12));
    }
    Ok(out)
}

/// Runs every check on `n_cases` seeded random instances.
pub fn verify_theorems(seed: u64, n_cases: usize) -> Result<VerificationReport> {
    if n_cases == 0 {
        return Ok(VerificationReport { seed, n_cases, checks: Vec::new() });
    }
    let per_case = (0..n_cases).into_par_iter().map(|i| run_case(seed, i)).collect::<Result<Vec<_>>>()?;
    let checks = CHECKS
        .iter()
        .enumerate()
        .map(|(k, &(name, tol))| per_case.iter().fold(CheckResult::new(name, tol), |acc, c| acc.merge(&c[k])))
        .collect();
    Ok(VerificationReport { seed, n_cases, checks })
}

/// A user-supplied game for the decomposition check.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    pub mdp: TabularMdp,
    pub distribution: RewardDistribution,
    pub correction: CorrectionTime,
    pub gamma: f64,
    /// Prefixes to check; all deterministic prefixes when absent.
    #[serde(default)]
    pub prefixes: Option<Vec<Policy>>,
}

/// Parses a JSON array of cases, validating every MDP and distribution.
pub fn parse_cases(text: &str) -> Result<Vec<CaseSpec>> {
    Ok(serde_json::from_str(text)?)
}

/// Checks the decomposition identity on user-supplied cases.
pub fn verify_cases(cases: &[CaseSpec]) -> Result<CheckResult> {
    let mut result = CheckResult::new("decomposition", TOLERANCE);
    for case in cases {
        let game = DelayedSpecGame::new(case.mdp.clone(), case.distribution.clone(), case.correction, case.gamma)?;
        let prefixes: Vec<Policy> = match &case.prefixes {
            Some(p) => p.clone(),
            None => deterministic_policies(case.mdp.n_states(), case.mdp.n_actions()).take(1024).collect(),
        };
        for prefix in &prefixes {
            let parts = tradeoff_decomposition(&game, prefix)?;
            result.record((parts.total() - switch_value(&game, prefix)?).abs());
        }
    }
    Ok(result)
}

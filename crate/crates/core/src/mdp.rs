//! Finite tabular MDPs and exact solvers.
//!
//! Policy evaluation is an LU solve of `(I - γ P_π) v = r_π`; policy
//! iteration runs on top of it and finishes with a greedy extraction that
//! breaks ties toward the lowest action index.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_discount_closed, check_discount_half_open, check_len, Error, Result};

pub type StateId = usize;
pub type ActionId = usize;

/// Tolerance on transition row sums and stochastic policy rows.
pub const PROBABILITY_TOLERANCE: f64 = 1e-12;

/// Distance from the endpoint at which `γ = 0` / `γ = 1` limits are evaluated.
///
/// The normalized optimal value is smooth in `γ` near both endpoints, so the
/// approximation error is `O(LIMIT_OFFSET)` with a constant set by the reward
/// scale and the MDP's mixing time.
pub const LIMIT_OFFSET: f64 = 1e-6;

/// Relative tolerance under which two Q-values are treated as tied.
const TIE_TOLERANCE: f64 = 1e-11;
/// Relative margin an action must beat the incumbent by during improvement.
const IMPROVEMENT_MARGIN: f64 = 1e-12;

/// Maps an endpoint discount onto the nearby value used to approximate its limit.
pub fn limit_discount(gamma: f64) -> f64 {
    if gamma <= 0.0 {
        LIMIT_OFFSET
    } else if gamma >= 1.0 {
        1.0 - LIMIT_OFFSET
    } else {
        gamma
    }
}

/// Optional human-readable names.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<String>>,
}

/// A rewardless finite MDP with a designated initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    // Row-major (state, action, next_state).
    transition: Vec<f64>,
    initial_state: StateId,
    labels: Option<Labels>,
}

#[derive(Serialize, Deserialize)]
struct MdpDocument {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    initial_state: StateId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Labels>,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        check_len("transition rows", doc.n_states, doc.transition.len())?;
        let mut flat = Vec::with_capacity(doc.n_states * doc.n_actions * doc.n_states);
        for (s, per_action) in doc.transition.into_iter().enumerate() {
            if per_action.len() != doc.n_actions {
                return Err(Error::InvalidMdp(format!(
                    "state {s} has {} action rows, expected {}",
                    per_action.len(),
                    doc.n_actions
                )));
            }
            for (a, row) in per_action.into_iter().enumerate() {
                if row.len() != doc.n_states {
                    return Err(Error::InvalidMdp(format!(
                        "row ({s}, {a}) has length {}, expected {}",
                        row.len(),
                        doc.n_states
                    )));
                }
                flat.extend(row);
            }
        }
        let mdp = TabularMdp::from_flat(doc.n_states, doc.n_actions, flat, doc.initial_state)?;
        match doc.labels {
            Some(labels) => mdp.with_labels(labels),
            None => Ok(mdp),
        }
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(mdp: TabularMdp) -> Self {
        let transition = (0..mdp.n_states)
            .map(|s| (0..mdp.n_actions).map(|a| mdp.row(s, a).to_vec()).collect())
            .collect();
        MdpDocument {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            transition,
            initial_state: mdp.initial_state,
            labels: mdp.labels,
        }
    }
}

impl TabularMdp {
    /// Builds an MDP from a flat `(state, action, next_state)` probability tensor.
    pub fn from_flat(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        initial_state: StateId,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("need at least one state and one action".into()));
        }
        check_len("transition tensor", n_states * n_actions * n_states, transition.len())?;
        if initial_state >= n_states {
            return Err(Error::InvalidMdp(format!(
                "initial state {initial_state} out of range for {n_states} states"
            )));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
                    return Err(Error::InvalidMdp(format!(
                        "row ({s}, {a}) has invalid probability {p}"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
                    return Err(Error::InvalidMdp(format!(
                        "row ({s}, {a}) sums to {sum}, not 1"
                    )));
                }
            }
        }
        Ok(Self { n_states, n_actions, transition, initial_state, labels: None })
    }

    /// Builds a deterministic MDP from a successor function.
    pub fn deterministic(
        n_states: usize,
        n_actions: usize,
        initial_state: StateId,
        next: impl Fn(StateId, ActionId) -> StateId,
    ) -> Result<Self> {
        let mut flat = vec![0.0; n_states * n_actions * n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                let t = next(s, a);
                if t >= n_states {
                    return Err(Error::InvalidMdp(format!(
                        "successor {t} of ({s}, {a}) out of range"
                    )));
                }
                flat[(s * n_actions + a) * n_states + t] = 1.0;
            }
        }
        Self::from_flat(n_states, n_actions, flat, initial_state)
    }

    pub fn with_labels(mut self, labels: Labels) -> Result<Self> {
        if let Some(names) = &labels.states {
            check_len("state labels", self.n_states, names.len())?;
        }
        if let Some(names) = &labels.actions {
            check_len("action labels", self.n_actions, names.len())?;
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_initial_state(mut self, state: StateId) -> Result<Self> {
        if state >= self.n_states {
            return Err(Error::InvalidMdp(format!("initial state {state} out of range")));
        }
        self.initial_state = state;
        Ok(self)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn initial_state(&self) -> StateId {
        self.initial_state
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    /// Next-state distribution `T(s, a, ·)`.
    pub fn row(&self, s: StateId, a: ActionId) -> &[f64] {
        &self.transition[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    pub fn prob(&self, s: StateId, a: ActionId, next: StateId) -> f64 {
        self.row(s, a)[next]
    }

    /// Whether every `(s, a)` row puts all mass on a single successor.
    pub fn is_deterministic(&self) -> bool {
        (0..self.n_states)
            .all(|s| (0..self.n_actions).all(|a| self.row(s, a).contains(&1.0)))
    }

    /// Successor of `(s, a)` when the row is one-hot.
    pub fn successor(&self, s: StateId, a: ActionId) -> Option<StateId> {
        self.row(s, a).iter().position(|&p| p == 1.0)
    }

    /// Expected value of `values` after taking `a` in `s`.
    pub fn expect(&self, s: StateId, a: ActionId, values: &[f64]) -> f64 {
        self.row(s, a).iter().zip(values).map(|(p, v)| p * v).sum()
    }
}

/// Reward over states, or over state-action pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RewardFunction {
    State(Vec<f64>),
    StateAction(Vec<Vec<f64>>),
}

impl RewardFunction {
    pub fn state(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidReward(format!("non-finite value {v}")));
        }
        Ok(Self::State(values))
    }

    pub fn state_action(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        for row in &rows {
            check_len("state-action reward row", width, row.len())?;
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidReward(format!("non-finite value {v}")));
            }
        }
        Ok(Self::StateAction(rows))
    }

    pub fn is_state_based(&self) -> bool {
        matches!(self, Self::State(_))
    }

    pub fn as_state(&self) -> Option<&[f64]> {
        match self {
            Self::State(v) => Some(v),
            Self::StateAction(_) => None,
        }
    }

    pub fn n_states(&self) -> usize {
        match self {
            Self::State(v) => v.len(),
            Self::StateAction(rows) => rows.len(),
        }
    }

    /// Reward collected when taking `a` in `s`.
    pub fn term(&self, s: StateId, a: ActionId) -> f64 {
        match self {
            Self::State(v) => v[s],
            Self::StateAction(rows) => rows[s][a],
        }
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            Self::State(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Self::StateAction(rows) => {
                rows.iter().flatten().fold(0.0, |m: f64, x| m.max(x.abs()))
            }
        }
    }

    pub fn check_compatible(&self, mdp: &TabularMdp) -> Result<()> {
        check_len("reward states", mdp.n_states(), self.n_states())?;
        if let Self::StateAction(rows) = self {
            for row in rows {
                check_len("reward actions", mdp.n_actions(), row.len())?;
            }
        }
        Ok(())
    }
}

/// Stationary policy, deterministic or stochastic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Policy {
    Deterministic(Vec<ActionId>),
    Stochastic(Vec<Vec<f64>>),
}

impl Policy {
    /// The policy that always takes `action`.
    pub fn constant(n_states: usize, action: ActionId) -> Self {
        Self::Deterministic(vec![action; n_states])
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self::Stochastic(vec![vec![1.0 / n_actions as f64; n_actions]; n_states])
    }

    pub fn n_states(&self) -> usize {
        match self {
            Self::Deterministic(a) => a.len(),
            Self::Stochastic(rows) => rows.len(),
        }
    }

    pub fn as_deterministic(&self) -> Option<&[ActionId]> {
        match self {
            Self::Deterministic(a) => Some(a),
            Self::Stochastic(_) => None,
        }
    }

    pub fn validate(&self, mdp: &TabularMdp) -> Result<()> {
        check_len("policy states", mdp.n_states(), self.n_states())?;
        match self {
            Self::Deterministic(actions) => {
                if let Some((s, a)) = actions.iter().enumerate().find(|(_, &a)| a >= mdp.n_actions())
                {
                    return Err(Error::InvalidPolicy(format!("state {s} maps to invalid action {a}")));
                }
            }
            Self::Stochastic(rows) => {
                for (s, row) in rows.iter().enumerate() {
                    check_len("policy row", mdp.n_actions(), row.len())?;
                    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                        return Err(Error::InvalidPolicy(format!("state {s} has a negative weight")));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
                        return Err(Error::InvalidPolicy(format!("state {s} row sums to {sum}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Calls `f(action, probability)` for each action with positive mass at `s`.
    pub fn for_each_action(&self, s: StateId, mut f: impl FnMut(ActionId, f64)) {
        match self {
            Self::Deterministic(actions) => f(actions[s], 1.0),
            Self::Stochastic(rows) => {
                for (a, &p) in rows[s].iter().enumerate() {
                    if p > 0.0 {
                        f(a, p);
                    }
                }
            }
        }
    }

    /// `P_π(s, ·)` accumulated into `out`, scaled by `weight`.
    fn add_next_distribution(&self, mdp: &TabularMdp, s: StateId, weight: f64, out: &mut [f64]) {
        self.for_each_action(s, |a, p| {
            for (o, t) in out.iter_mut().zip(mdp.row(s, a)) {
                *o += weight * p * t;
            }
        });
    }

    /// One step of forward propagation of a state distribution.
    pub fn propagate(&self, mdp: &TabularMdp, dist: &[f64]) -> Vec<f64> {
        let mut next = vec![0.0; mdp.n_states()];
        for (s, &w) in dist.iter().enumerate() {
            if w != 0.0 {
                self.add_next_distribution(mdp, s, w, &mut next);
            }
        }
        next
    }

    /// Expected immediate reward at each state under this policy.
    pub fn reward_vector(&self, reward: &RewardFunction, n_states: usize) -> Vec<f64> {
        (0..n_states)
            .map(|s| {
                let mut r = 0.0;
                self.for_each_action(s, |a, p| r += p * reward.term(s, a));
                r
            })
            .collect()
    }
}

/// Optimal Q-values, row-major `(state, action)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    data: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, data: vec![0.0; n_states * n_actions] }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: StateId, a: ActionId) -> f64 {
        self.data[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: StateId, a: ActionId, value: f64) {
        self.data[s * self.n_actions + a] = value;
    }

    pub fn row(&self, s: StateId) -> &[f64] {
        &self.data[s * self.n_actions..][..self.n_actions]
    }

    pub fn row_max(&self, s: StateId) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn scale(&self) -> f64 {
        self.data.iter().fold(1.0, |m: f64, q| m.max(q.abs()))
    }

    /// Lowest-index action whose value is within tie tolerance of the row maximum.
    pub fn greedy_action(&self, s: StateId) -> ActionId {
        greedy_in_row(self.row(s), TIE_TOLERANCE * self.scale())
    }

    pub fn greedy_policy(&self) -> Policy {
        let tol = TIE_TOLERANCE * self.scale();
        Policy::Deterministic((0..self.n_states).map(|s| greedy_in_row(self.row(s), tol)).collect())
    }
}

fn greedy_in_row(row: &[f64], tol: f64) -> ActionId {
    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter().position(|&q| q >= best - tol).unwrap_or(0)
}

/// Exact `V^π` for `reward` at discount `gamma ∈ [0, 1)`.
pub fn policy_evaluation(
    mdp: &TabularMdp,
    reward: &RewardFunction,
    policy: &Policy,
    gamma: f64,
) -> Result<Vec<f64>> {
    check_discount_half_open(gamma)?;
    reward.check_compatible(mdp)?;
    policy.validate(mdp)?;
    evaluate_unchecked(mdp, reward, policy, gamma)
}

fn evaluate_unchecked(
    mdp: &TabularMdp,
    reward: &RewardFunction,
    policy: &Policy,
    gamma: f64,
) -> Result<Vec<f64>> {
    let n = mdp.n_states();
    let mut system = DMatrix::<f64>::identity(n, n);
    let mut next = vec![0.0; n];
    for s in 0..n {
        next.iter_mut().for_each(|x| *x = 0.0);
        policy.add_next_distribution(mdp, s, 1.0, &mut next);
        for (t, p) in next.iter().enumerate() {
            if *p != 0.0 {
                system[(s, t)] -= gamma * p;
            }
        }
    }
    let rhs = DVector::from_vec(policy.reward_vector(reward, n));
    let lu = system.clone().lu();
    let mut v = lu.solve(&rhs).ok_or(Error::Singular)?;
    // One round of iterative refinement keeps the Bellman residual at rounding level
    // even when γ is within 1e-6 of one.
    let residual = &rhs - &system * &v;
    if let Some(correction) = lu.solve(&residual) {
        v += correction;
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular);
    }
    Ok(v.as_slice().to_vec())
}

/// `Q(s, a) = R(s, a) + γ Σ T(s, a, s') V(s')`.
pub fn q_from_v(
    mdp: &TabularMdp,
    reward: &RewardFunction,
    values: &[f64],
    gamma: f64,
) -> Result<QTable> {
    reward.check_compatible(mdp)?;
    check_len("value vector", mdp.n_states(), values.len())?;
    Ok(q_unchecked(mdp, reward, values, gamma))
}

fn q_unchecked(mdp: &TabularMdp, reward: &RewardFunction, values: &[f64], gamma: f64) -> QTable {
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            q.set(s, a, reward.term(s, a) + gamma * mdp.expect(s, a, values));
        }
    }
    q
}

/// An optimal deterministic policy and its value.
#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub policy: Policy,
    pub values: Vec<f64>,
}

impl Solution {
    pub fn actions(&self) -> &[ActionId] {
        self.policy.as_deterministic().expect("solver policies are deterministic")
    }
}

/// Howard policy iteration with exact evaluation.
///
/// The returned policy is greedy with respect to `V*`, taking the lowest action
/// index among (numerically) tied maximizers.
pub fn policy_iteration(mdp: &TabularMdp, reward: &RewardFunction, gamma: f64) -> Result<Solution> {
    check_discount_half_open(gamma)?;
    reward.check_compatible(mdp)?;
    let n = mdp.n_states();
    let max_sweeps = n * mdp.n_actions() + 64;
    let mut actions = vec![0; n];
    for _ in 0..max_sweeps {
        let policy = Policy::Deterministic(actions.clone());
        let values = evaluate_unchecked(mdp, reward, &policy, gamma)?;
        let q = q_unchecked(mdp, reward, &values, gamma);
        let margin = IMPROVEMENT_MARGIN * q.scale();
        let mut changed = false;
        for (s, current) in actions.iter_mut().enumerate() {
            let row = q.row(s);
            let (best, best_q) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (a, &v)| if v > acc.1 { (a, v) } else { acc });
            if best_q > row[*current] + margin {
                *current = best;
                changed = true;
            }
        }
        if !changed {
            let greedy = q.greedy_policy();
            if greedy == policy {
                return Ok(Solution { policy, values });
            }
            let values = evaluate_unchecked(mdp, reward, &greedy, gamma)?;
            return Ok(Solution { policy: greedy, values });
        }
    }
    Err(Error::NonConvergence("policy iteration"))
}

/// Optimal Q-table for `reward` at `gamma`.
pub fn optimal_q(mdp: &TabularMdp, reward: &RewardFunction, gamma: f64) -> Result<QTable> {
    let solution = policy_iteration(mdp, reward, gamma)?;
    Ok(q_unchecked(mdp, reward, &solution.values, gamma))
}

/// `V*` for a state-based reward vector.
pub fn optimal_values(mdp: &TabularMdp, reward: &[f64], gamma: f64) -> Result<Vec<f64>> {
    Ok(policy_iteration(mdp, &RewardFunction::State(reward.to_vec()), gamma)?.values)
}

/// `lim_{γ* → γ} (1 - γ*) V*(s, γ*)`, with endpoints evaluated at [`limit_discount`].
pub fn normalized_optimal_value(
    mdp: &TabularMdp,
    reward: &RewardFunction,
    state: StateId,
    gamma: f64,
) -> Result<f64> {
    check_discount_closed(gamma)?;
    if state >= mdp.n_states() {
        return Err(Error::InvalidMdp(format!("state {state} out of range")));
    }
    let g = if gamma >= 1.0 { limit_discount(gamma) } else { gamma };
    let solution = policy_iteration(mdp, reward, g)?;
    Ok((1.0 - g) * solution.values[state])
}

/// Every deterministic stationary policy, in mixed-radix order (state 0 varies fastest).
pub fn deterministic_policies(n_states: usize, n_actions: usize) -> impl Iterator<Item = Policy> {
    let total = (n_actions as u128).checked_pow(n_states as u32).unwrap_or(u128::MAX);
    (0..total).map(move |mut code| {
        let actions = (0..n_states)
            .map(|_| {
                let a = (code % n_actions as u128) as usize;
                code /= n_actions as u128;
                a
            })
            .collect();
        Policy::Deterministic(actions)
    })
}

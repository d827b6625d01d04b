//! Library results against independent reference computations.

use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use delayed_spec::assistance::{
    delayed_spec_score, state_distribution, switch_value, CorrectionTime, DelayedSpecGame,
};
use delayed_spec::mdp::{
    deterministic_policies, optimal_values, policy_evaluation, policy_iteration, Policy, RewardFunction,
    TabularMdp,
};
use delayed_spec::reward::{domain, RewardDistribution};

fn random_mdp(rng: &mut ChaCha8Rng, n: usize, na: usize) -> TabularMdp {
    let mut flat = Vec::with_capacity(n * na * n);
    for _ in 0..n * na {
        let row: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { rng.random::<f64>() } else { 0.0 }).collect();
        let mut row = row;
        if row.iter().all(|&p| p == 0.0) {
            row[rng.random_range(0..n)] = 1.0;
        }
        let total: f64 = row.iter().sum();
        flat.extend(row.iter().map(|p| p / total));
    }
    TabularMdp::from_flat(n, na, flat, 0).unwrap()
}

/// Fixed-point iteration of the policy Bellman operator.
fn iterative_evaluation(mdp: &TabularMdp, reward: &[f64], actions: &[usize], gamma: f64) -> Vec<f64> {
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    loop {
        let next: Vec<f64> = (0..n).map(|s| reward[s] + gamma * mdp.expect(s, actions[s], &v)).collect();
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if diff < 1e-14 {
            return v;
        }
    }
}

fn sample_from(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

#[test]
fn evaluation_matches_fixed_point_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mdp = random_mdp(&mut rng, 5, 3);
        let reward: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let actions: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
        for gamma in [0.3, 0.9, 0.99] {
            let exact = policy_evaluation(
                &mdp,
                &RewardFunction::State(reward.clone()),
                &Policy::Deterministic(actions.clone()),
                gamma,
            )
            .unwrap();
            let oracle = iterative_evaluation(&mdp, &reward, &actions, gamma);
            for (a, b) in exact.iter().zip(&oracle) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
    }
}

#[test]
fn policy_iteration_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..15 {
        let mdp = random_mdp(&mut rng, 4, 3);
        let reward: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gamma = 0.9;
        let solution = policy_iteration(&mdp, &RewardFunction::State(reward.clone()), gamma).unwrap();
        let mut best = vec![f64::NEG_INFINITY; 4];
        for policy in deterministic_policies(4, 3) {
            let v = iterative_evaluation(&mdp, &reward, policy.as_deterministic().unwrap(), gamma);
            for s in 0..4 {
                best[s] = best[s].max(v[s]);
            }
        }
        for s in 0..4 {
            assert_abs_diff_eq!(solution.values[s], best[s], epsilon = 1e-9);
        }
    }
}

#[test]
fn preserve_options_goes_right() {
    // s0 -> s1 (dead end) or s2; s2 <-> s3, both can stay.
    let next = [[1, 2], [1, 1], [2, 3], [3, 2]];
    let mdp = TabularMdp::deterministic(4, 2, 0, |s, a| next[s][a]).unwrap();
    let reward = [0.0, 0.0, 0.0, 1.0];
    let left = iterative_evaluation(&mdp, &reward, &[0, 0, 1, 0], 0.9)[0];
    let right = iterative_evaluation(&mdp, &reward, &[1, 0, 1, 0], 0.9)[0];
    assert!(right > left);
    let solution = policy_iteration(&mdp, &RewardFunction::State(reward.to_vec()), 0.9).unwrap();
    assert_eq!(solution.actions()[0], 1);
}

#[test]
fn state_distribution_matches_rollouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mdp = random_mdp(&mut rng, 6, 2);
    let policy = Policy::Stochastic((0..6).map(|_| {
        let p = rng.random::<f64>();
        vec![p, 1.0 - p]
    }).collect());
    let exact = state_distribution(&mdp, &policy, 3, 0).unwrap();
    assert_abs_diff_eq!(exact.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    let Policy::Stochastic(rows) = &policy else { unreachable!() };
    let n = 100_000;
    let mut counts = [0usize; 6];
    for _ in 0..n {
        let mut s = 0;
        for _ in 0..3 {
            let a = sample_from(&rows[s], &mut rng);
            s = sample_from(mdp.row(s, a), &mut rng);
        }
        counts[s] += 1;
    }
    for s in 0..6 {
        let freq = counts[s] as f64 / n as f64;
        let se = (exact[s] * (1.0 - exact[s]) / n as f64).sqrt().max(1e-9);
        assert!((freq - exact[s]).abs() <= 3.0 * se, "state {s}: {freq} vs {}", exact[s]);
    }
}

#[test]
fn switch_value_matches_rollouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mdp = random_mdp(&mut rng, 4, 2);
    let members: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
    let gamma = 0.8;
    let p = 0.3;
    let game = DelayedSpecGame::new(
        mdp.clone(),
        RewardDistribution::empirical(members.clone()).unwrap(),
        CorrectionTime::geometric(p).unwrap(),
        gamma,
    )
    .unwrap();
    let prefix = Policy::Deterministic(vec![0, 1, 1, 0]);
    let exact = switch_value(&game, &prefix).unwrap();

    let optimal: Vec<Vec<f64>> = members.iter().map(|r| optimal_values(&mdp, r, gamma).unwrap()).collect();
    let n = 100_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let k = rng.random_range(0..members.len());
        let mut t = 1;
        while !rng.random_bool(p) {
            t += 1;
        }
        let mut s = 0;
        let mut ret = 0.0;
        for i in 0..t {
            ret += gamma.powi(i) * members[k][s];
            s = sample_from(mdp.row(s, prefix.as_deterministic().unwrap()[s]), &mut rng);
        }
        ret += gamma.powi(t) * optimal[k][s];
        let x = (1.0 - gamma) * ret;
        sum += x;
        sum_sq += x * x;
    }
    let mean = sum / n as f64;
    let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - exact).abs() <= 4.0 * se, "{mean} vs {exact} (se {se})");
}

#[test]
fn score_is_mean_of_member_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mdp = random_mdp(&mut rng, 4, 2);
    let members: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let prefix = Policy::Deterministic(vec![1, 0, 1, 1]);
    let gamma = 0.95;
    let score = delayed_spec_score(
        &mdp,
        &prefix,
        &RewardDistribution::empirical(members.clone()).unwrap(),
        gamma,
        10,
    )
    .unwrap();

    let mut total = 0.0;
    for r in &members {
        let mut best = vec![f64::NEG_INFINITY; 4];
        for policy in deterministic_policies(4, 2) {
            let v = iterative_evaluation(&mdp, r, policy.as_deterministic().unwrap(), gamma);
            for s in 0..4 {
                best[s] = best[s].max(v[s]);
            }
        }
        let mut d = vec![1.0, 0.0, 0.0, 0.0];
        let mut member = 0.0;
        for i in 0..10 {
            member += gamma.powi(i) * d.iter().zip(r).map(|(p, x)| p * x).sum::<f64>();
            let mut next = vec![0.0; 4];
            for s in 0..4 {
                for t in 0..4 {
                    next[t] += d[s] * mdp.prob(s, prefix.as_deterministic().unwrap()[s], t);
                }
            }
            d = next;
        }
        member += gamma.powi(10) * d.iter().zip(&best).map(|(p, v)| p * v).sum::<f64>();
        total += member;
    }
    assert_abs_diff_eq!(score, total / 3.0, epsilon = 1e-9);
}

/// s0 -> s1 (absorbing) or s0 -> wait -> {s2, s3}; s2 and s3 can stay or swap.
/// States: 0, 1, wait = 2, 3, 4.
fn wait_mdp() -> TabularMdp {
    let next = [[1, 2], [1, 1], [3, 4], [3, 4], [4, 3]];
    TabularMdp::deterministic(5, 2, 0, |s, a| next[s][a]).unwrap()
}

/// Right minus left switch value with the reveal at step 1.
fn right_minus_left(members: &[Vec<f64>], gamma: f64) -> f64 {
    let game = DelayedSpecGame::new(
        wait_mdp(),
        RewardDistribution::empirical(members.to_vec()).unwrap(),
        CorrectionTime::deterministic(1),
        gamma,
    )
    .unwrap();
    let right = switch_value(&game, &Policy::Deterministic(vec![1, 0, 0, 0, 0])).unwrap();
    let left = switch_value(&game, &Policy::Deterministic(vec![0, 0, 0, 0, 0])).unwrap();
    right - left
}

#[test]
fn waiting_for_options_pays_off_above_three_quarters() {
    // Grid of midpoints, paired so that every two states are independent and
    // uniform on the grid. E[max of two] = 2/3 - 1/(6m²), so the crossover sits
    // at 0.75 / (1 - 1/(4m²)).
    let m = 40;
    let x = |k: usize| (k as f64 + 0.5) / m as f64;
    let mut members = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            members.push(vec![x((i + 2 * j) % m), x((i + j) % m), 0.0, x(i), x(j)]);
        }
    }
    let (mut lo, mut hi) = (0.5, 0.99);
    assert!(right_minus_left(&members, lo) < 0.0);
    assert!(right_minus_left(&members, hi) > 0.0);
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if right_minus_left(&members, mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let predicted = 0.75 / (1.0 - 1.0 / (4.0 * (m * m) as f64));
    assert_abs_diff_eq!(lo, predicted, epsilon = 1e-5);
    assert_abs_diff_eq!(lo, 0.75, epsilon = 1e-3);
}

#[test]
fn waiting_for_options_with_sampled_rewards() {
    let uniform = RewardDistribution::iid_uniform(0.0, 1.0).unwrap();
    let mut members = uniform.sample_many(5, 20_000, 9, domain::MONTE_CARLO).unwrap();
    for r in &mut members {
        r[2] = 0.0;
    }
    assert!(right_minus_left(&members, 0.7) < 0.0);
    assert!(right_minus_left(&members, 0.8) > 0.0);
}

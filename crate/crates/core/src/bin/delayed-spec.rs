use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use delayed_spec::assistance::{score_breakdowns, write_score_csv, ScoreBreakdown};
use delayed_spec::experiment::{run_experiment, with_thread_cap, ExperimentConfig};
use delayed_spec::gridworld::EnvKind;
use delayed_spec::mdp::{policy_iteration, Policy, RewardFunction, TabularMdp};
use delayed_spec::reward::{
    avg_optimal_value, mean_reward, power, MonteCarlo, PowerQuery, RewardDistribution, ValueCache,
    DEFAULT_MC_SAMPLES,
};
use delayed_spec::verify::{parse_cases, verify_cases, verify_theorems};
use delayed_spec::{Error, Result};

#[derive(Parser)]
#[command(name = "delayed-spec", version, about = "Delayed-specification assistance games on tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Policy iteration on a JSON MDP and reward.
    Solve {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        reward: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// POWER and average optimal value at states of an MDP.
    Power {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        dist: PathBuf,
        #[arg(long)]
        gamma: f64,
        /// States to report; all when omitted.
        #[arg(long = "state")]
        states: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Delayed specification score of a prefix policy.
    Score {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        dist: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value_t = 10)]
        correct_at: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-sample breakdown CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train agents on a gridworld and write residuals.csv and summary.json.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        env: Option<EnvKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Randomized checks of the game identities.
    Verify {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        cases_file: Option<PathBuf>,
        /// JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn solve(mdp: &Path, reward: &Path, gamma: f64, out: Option<&Path>) -> Result<()> {
    let mdp: TabularMdp = read_json(mdp)?;
    let reward: RewardFunction = read_json(reward)?;
    let solution = policy_iteration(&mdp, &reward, gamma)?;
    emit(&json!({ "policy": solution.policy, "values": solution.values }), out)
}

#[derive(Serialize)]
struct PowerRow {
    state: usize,
    mean_reward: f64,
    power: f64,
    power_std_error: f64,
    avg_value: Option<f64>,
    avg_value_std_error: Option<f64>,
}

fn power_cmd(mdp: &Path, dist: &Path, gamma: f64, states: &[usize], samples: usize, seed: u64) -> Result<Vec<PowerRow>> {
    let mdp: TabularMdp = read_json(mdp)?;
    let dist: RewardDistribution = read_json(dist)?;
    let mean = mean_reward(&dist, mdp.n_states())?;
    let states: Vec<usize> = if states.is_empty() { (0..mdp.n_states()).collect() } else { states.to_vec() };
    states
        .into_iter()
        .map(|state| {
            let query = PowerQuery { state, gamma, mc_samples: samples, seed };
            let p = power(&dist, &mdp, &query)?;
            let v = if gamma > 0.0 && gamma < 1.0 { Some(avg_optimal_value(&dist, &mdp, &query)?) } else { None };
            Ok(PowerRow {
                state,
                mean_reward: mean[state],
                power: p.mean,
                power_std_error: p.std_error,
                avg_value: v.map(|e| e.mean),
                avg_value_std_error: v.map(|e| e.std_error),
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn score(mdp: &Path, policy: &Path, dist: &Path, gamma: f64, correct_at: usize, seed: u64, out: Option<&Path>) -> Result<f64> {
    let mdp: TabularMdp = read_json(mdp)?;
    let policy: Policy = read_json(policy)?;
    let dist: RewardDistribution = read_json(dist)?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidDiscount { gamma, range: "[0, 1)" });
    }
    let support = dist.expectation_support(mdp.n_states(), &MonteCarlo { seed, ..MonteCarlo::default() })?;
    let cache = ValueCache::new(&mdp, gamma);
    let rows = score_breakdowns(&policy, &support.members, correct_at, &cache, &mdp)?;
    if let Some(path) = out {
        write_score_csv(&rows, fs::File::create(path)?)?;
    }
    Ok(rows.iter().map(ScoreBreakdown::total).sum::<f64>() / rows.len() as f64)
}

fn experiment(
    config: Option<&Path>,
    env: Option<EnvKind>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    map: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(env) = env {
        cfg.env = env;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    if map.is_some() {
        cfg.map = map;
    }
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(PathBuf::from("."));
    }
    let outcome = run_experiment(&cfg)?;
    emit(&outcome.summary_file(), None)
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Solve { mdp, reward, gamma, out } => solve(&mdp, &reward, gamma, out.as_deref())?,
        Command::Power { mdp, dist, gamma, states, samples, seed, out } => {
            let rows = with_thread_cap(|| power_cmd(&mdp, &dist, gamma, &states, samples, seed))??;
            emit(&rows, out.as_deref())?;
        }
        Command::Score { mdp, policy, dist, gamma, correct_at, seed, out } => {
            let value = with_thread_cap(|| score(&mdp, &policy, &dist, gamma, correct_at, seed, out.as_deref()))??;
            println!("{value:.16e}");
        }
        Command::Experiment { config, env, seed, out, map } => experiment(config.as_deref(), env, seed, out, map)?,
        Command::Verify { cases, seed, cases_file, out } => {
            let mut report = with_thread_cap(|| verify_theorems(seed, cases))??;
            if let Some(path) = cases_file {
                let specs = parse_cases(&fs::read_to_string(path)?)?;
                let mut check = verify_cases(&specs)?;
                check.name = "cases-file".into();
                report.checks.push(check);
            }
            println!("{report}");
            if let Some(path) = out {
                emit(&report, Some(&path))?;
            }
            if !report.passed() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

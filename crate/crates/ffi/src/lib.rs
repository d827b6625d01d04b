//! C ABI over the `delayed-spec` core.
//!
//! MDPs and reward distributions live behind opaque handles created from JSON
//! and released with their matching `_free` function. Every call returns a
//! [`DsStatus`]; on failure the message is available from
//! [`ds_last_error_message`] until the next call on the same thread. Strings
//! returned through out-parameters are owned by the caller and released with
//! [`ds_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use delayed_spec::assistance::delayed_spec_score;
use delayed_spec::experiment::{run_experiment, ExperimentConfig};
use delayed_spec::mdp::{normalized_optimal_value, policy_iteration, Policy, RewardFunction, TabularMdp};
use delayed_spec::reward::{power, PowerQuery, RewardDistribution};
use delayed_spec::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

/// Opaque tabular MDP.
pub struct DsMdp(TabularMdp);

/// Opaque reward distribution.
pub struct DsDistribution(RewardDistribution);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

struct Failure(DsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) | Error::Csv(_) => DsStatus::Io,
            e if e.is_validation() => DsStatus::InvalidInput,
            _ => DsStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DsStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(DsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(DsStatus::InvalidInput, message.into())
}

fn policy_from(actions: &[u32]) -> Policy {
    Policy::Deterministic(actions.iter().map(|&a| a as usize).collect())
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn ds_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ds_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses an MDP from JSON into a new handle.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_mdp` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_mdp_from_json(json: *const c_char, out_mdp: *mut *mut DsMdp) -> DsStatus {
    guard(|| {
        let slot = out(out_mdp, "out_mdp")?;
        let mdp = TabularMdp::from_json_str(text(json, "json")?)?;
        *slot = Box::into_raw(Box::new(DsMdp(mdp)));
        Ok(())
    })
}

/// Releases an MDP handle. Null is ignored.
///
/// # Safety
/// `mdp` must be null or a live handle from [`ds_mdp_from_json`].
#[no_mangle]
pub unsafe extern "C" fn ds_mdp_free(mdp: *mut DsMdp) {
    if !mdp.is_null() {
        drop(Box::from_raw(mdp));
    }
}

/// # Safety
/// `mdp` must be a live handle; `out_n` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_mdp_n_states(mdp: *const DsMdp, out_n: *mut usize) -> DsStatus {
    guard(|| {
        *out(out_n, "out_n")? = handle(mdp, "mdp")?.0.n_states();
        Ok(())
    })
}

/// # Safety
/// `mdp` must be a live handle; `out_n` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_mdp_n_actions(mdp: *const DsMdp, out_n: *mut usize) -> DsStatus {
    guard(|| {
        *out(out_n, "out_n")? = handle(mdp, "mdp")?.0.n_actions();
        Ok(())
    })
}

/// Optimal policy and values for a state-based reward.
///
/// `reward`, `out_actions` and `out_values` each hold `n_states` entries.
///
/// # Safety
/// Pointers must be valid for `n_states` elements.
#[no_mangle]
pub unsafe extern "C" fn ds_policy_iteration(
    mdp: *const DsMdp,
    reward: *const f64,
    n_states: usize,
    gamma: f64,
    out_actions: *mut u32,
    out_values: *mut f64,
) -> DsStatus {
    guard(|| {
        let mdp = &handle(mdp, "mdp")?.0;
        if n_states != mdp.n_states() {
            return Err(invalid(format!("n_states {n_states} does not match the MDP ({})", mdp.n_states())));
        }
        let reward = RewardFunction::state(slice(reward, n_states, "reward")?.to_vec())?;
        if out_actions.is_null() || out_values.is_null() {
            return Err(null("output buffer"));
        }
        let solution = policy_iteration(mdp, &reward, gamma)?;
        for (i, (&a, &v)) in solution.actions().iter().zip(&solution.values).enumerate() {
            *out_actions.add(i) = a as u32;
            *out_values.add(i) = v;
        }
        Ok(())
    })
}

/// `(1 - γ)·V*(state)`; `γ = 1` gives the average-reward limit.
///
/// # Safety
/// `reward` must hold `n_states` entries; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_normalized_optimal_value(
    mdp: *const DsMdp,
    reward: *const f64,
    n_states: usize,
    state: usize,
    gamma: f64,
    out_value: *mut f64,
) -> DsStatus {
    guard(|| {
        let mdp = &handle(mdp, "mdp")?.0;
        let reward = RewardFunction::state(slice(reward, n_states, "reward")?.to_vec())?;
        reward.check_compatible(mdp)?;
        let slot = out(out_value, "out_value")?;
        *slot = normalized_optimal_value(mdp, &reward, state, gamma)?;
        Ok(())
    })
}

/// Parses a reward distribution from JSON into a new handle.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_dist` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_distribution_from_json(
    json: *const c_char,
    out_dist: *mut *mut DsDistribution,
) -> DsStatus {
    guard(|| {
        let slot = out(out_dist, "out_dist")?;
        let dist = RewardDistribution::from_json_str(text(json, "json")?)?;
        *slot = Box::into_raw(Box::new(DsDistribution(dist)));
        Ok(())
    })
}

/// Releases a distribution handle. Null is ignored.
///
/// # Safety
/// `dist` must be null or a live handle from [`ds_distribution_from_json`].
#[no_mangle]
pub unsafe extern "C" fn ds_distribution_free(dist: *mut DsDistribution) {
    if !dist.is_null() {
        drop(Box::from_raw(dist));
    }
}

/// POWER at `state` with its standard error (zero for finite supports).
///
/// # Safety
/// Handles must be live; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_power(
    mdp: *const DsMdp,
    dist: *const DsDistribution,
    state: usize,
    gamma: f64,
    mc_samples: usize,
    seed: u64,
    out_power: *mut f64,
    out_std_error: *mut f64,
) -> DsStatus {
    guard(|| {
        let (mdp, dist) = (&handle(mdp, "mdp")?.0, &handle(dist, "dist")?.0);
        let (p, se) = (out(out_power, "out_power")?, out(out_std_error, "out_std_error")?);
        let estimate = power(dist, mdp, &PowerQuery { state, gamma, mc_samples, seed })?;
        *p = estimate.mean;
        *se = estimate.std_error;
        Ok(())
    })
}

/// Delayed-specification score of a deterministic prefix policy.
///
/// # Safety
/// `actions` must hold `n_states` entries; handles must be live.
#[no_mangle]
pub unsafe extern "C" fn ds_delayed_spec_score(
    mdp: *const DsMdp,
    actions: *const u32,
    n_states: usize,
    dist: *const DsDistribution,
    gamma: f64,
    correct_at: usize,
    out_score: *mut f64,
) -> DsStatus {
    guard(|| {
        let (mdp, dist) = (&handle(mdp, "mdp")?.0, &handle(dist, "dist")?.0);
        let prefix = policy_from(slice(actions, n_states, "actions")?);
        let slot = out(out_score, "out_score")?;
        *slot = delayed_spec_score(mdp, &prefix, dist, gamma, correct_at)?;
        Ok(())
    })
}

/// Runs a gridworld experiment from a JSON config and returns the summary as JSON.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out_json` must be writable.
/// The returned string is released with [`ds_string_free`].
#[no_mangle]
pub unsafe extern "C" fn ds_experiment_run(config_json: *const c_char, out_json: *mut *mut c_char) -> DsStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        let config = ExperimentConfig::from_json_str(text(config_json, "config_json")?)?;
        let outcome = run_experiment(&config)?;
        let json = serde_json::to_string(&outcome.summary_file()).map_err(Error::from)?;
        *slot = CString::new(json).map_err(|e| invalid(e.to_string()))?.into_raw();
        Ok(())
    })
}

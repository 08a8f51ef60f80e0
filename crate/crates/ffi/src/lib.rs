//! C ABI over `vaoi-core`.
//!
//! Handles are opaque pointers created by `*_new` / `*_load` and released by
//! the matching `*_free`. Every fallible function returns a [`VaoiStatus`];
//! on failure [`vaoi_last_error`] describes the problem for the calling
//! thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vaoi_core::actor::Actor;
use vaoi_core::env::{normalize_vaoi, EnvConfig, StatusUpdateEnv};
use vaoi_core::harness::load_checkpoint;
use vaoi_core::metrics::{average_cost, empirical_cvar};
use vaoi_core::Error;

/// Result codes shared by all functions.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VaoiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    InvalidState = 4,
    Numerical = 5,
    Mismatch = 6,
    Io = 7,
    Parse = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> VaoiStatus {
    match err {
        Error::Config(_) => VaoiStatus::InvalidConfig,
        Error::Argument(_) => VaoiStatus::InvalidArgument,
        Error::State(_) => VaoiStatus::InvalidState,
        Error::Numerical(_) => VaoiStatus::Numerical,
        Error::Mismatch(_) => VaoiStatus::Mismatch,
        Error::Io(_) | Error::Plot(_) => VaoiStatus::Io,
        Error::Json(_) | Error::Csv(_) => VaoiStatus::Parse,
    }
}

fn fail(status: VaoiStatus, msg: impl Into<String>) -> VaoiStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), VaoiStatus>) -> VaoiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VaoiStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(VaoiStatus::Panic, "internal panic"),
    }
}

fn core<T>(r: vaoi_core::Result<T>) -> Result<T, VaoiStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), VaoiStatus> {
    if p.is_null() {
        Err(fail(VaoiStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], VaoiStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], VaoiStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message for the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn vaoi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vaoi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Simulator handle.
pub struct VaoiEnv {
    inner: StatusUpdateEnv,
}

/// Outcome of one slot.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VaoiStep {
    /// `-sum(vaoi) - lambda * cost`.
    pub reward: f64,
    /// 1 when the slot transmitted.
    pub cost: u8,
    /// 1 when a transmission was delivered.
    pub delivered: u8,
    /// Slots elapsed after this step.
    pub slot: u64,
}

/// Create a simulator with `n_users` users. `arrival_rates` holds one rate
/// per user; VAoI is truncated at `d_max`.
///
/// # Safety
/// `arrival_rates` must point to `n_users` doubles and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn vaoi_env_new(
    arrival_rates: *const f64,
    n_users: usize,
    success_prob: f64,
    d_max: u32,
    eta_max: f64,
    seed: u64,
    out: *mut *mut VaoiEnv,
) -> VaoiStatus {
    guard(|| {
        non_null(out, "out")?;
        let rates = slice(arrival_rates, n_users, "arrival_rates")?.to_vec();
        let cfg = EnvConfig {
            n_users,
            arrival_rates: rates,
            success_prob,
            d_max,
            eta_max,
            reward_on_next_state: false,
        };
        let inner = core(StatusUpdateEnv::new(cfg, seed))?;
        *out = Box::into_raw(Box::new(VaoiEnv { inner }));
        Ok(())
    })
}

/// # Safety
/// `env` must come from [`vaoi_env_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vaoi_env_free(env: *mut VaoiEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vaoi_env_reset(env: *mut VaoiEnv, seed: u64) -> VaoiStatus {
    guard(|| {
        non_null(env, "env")?;
        (*env).inner.reset(seed);
        Ok(())
    })
}

/// Number of users, or 0 for a null handle.
///
/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vaoi_env_n_users(env: *const VaoiEnv) -> usize {
    env.as_ref().map_or(0, |e| e.inner.config().n_users)
}

/// Copy the current VAoI vector into `out` (`len` must equal the user count).
///
/// # Safety
/// `env` must be a live handle and `out` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn vaoi_env_vaoi(env: *const VaoiEnv, out: *mut u32, len: usize) -> VaoiStatus {
    guard(|| {
        non_null(env, "env")?;
        let v = &(*env).inner.state().vaoi;
        if len != v.len() {
            return Err(fail(VaoiStatus::InvalidArgument, format!("buffer holds {len}, need {}", v.len())));
        }
        slice_mut(out, len, "out")?.copy_from_slice(v);
        Ok(())
    })
}

/// Advance one slot. `action` 0 idles, `n` transmits user `n`.
///
/// # Safety
/// `env` must be a live handle and `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn vaoi_env_step(env: *mut VaoiEnv, action: usize, lambda: f64, out: *mut VaoiStep) -> VaoiStatus {
    guard(|| {
        non_null(env, "env")?;
        let o = core((*env).inner.step(action, lambda))?;
        if let Some(out) = out.as_mut() {
            *out = VaoiStep {
                reward: o.reward,
                cost: o.cost,
                delivered: (o.info.success == Some(true)) as u8,
                slot: o.next_state.slot,
            };
        }
        Ok(())
    })
}

/// Trained policy handle.
pub struct VaoiPolicy {
    actor: Actor,
    n_users: usize,
    d_max: u32,
    rng: ChaCha8Rng,
}

/// Load the actor from a checkpoint file. `seed` drives the sampling noise.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vaoi_policy_load(path: *const c_char, seed: u64, out: *mut *mut VaoiPolicy) -> VaoiStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(VaoiStatus::InvalidArgument, "path is not UTF-8"))?;
        let ckpt = core(load_checkpoint(Path::new(path)))?;
        *out = Box::into_raw(Box::new(VaoiPolicy {
            n_users: ckpt.env.n_users,
            d_max: ckpt.env.d_max,
            actor: ckpt.actor,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }));
        Ok(())
    })
}

/// # Safety
/// `policy` must come from [`vaoi_policy_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vaoi_policy_free(policy: *mut VaoiPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Number of users the policy was trained for, or 0 for a null handle.
///
/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vaoi_policy_n_users(policy: *const VaoiPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.n_users)
}

unsafe fn policy_probs(policy: *mut VaoiPolicy, vaoi: *const u32, len: usize) -> Result<Vec<f64>, VaoiStatus> {
    non_null(policy, "policy")?;
    let p = &mut *policy;
    if len != p.n_users {
        return Err(fail(VaoiStatus::Mismatch, format!("policy expects {} users, got {len}", p.n_users)));
    }
    let state = normalize_vaoi(slice(vaoi, len, "vaoi")?, p.d_max);
    Ok(p.actor.distribution(&state, &mut p.rng).probs)
}

/// Write the `n_users + 1` action probabilities for state `vaoi` into `probs`.
///
/// # Safety
/// `policy` must be live, `vaoi` must hold `len` values and `probs` `probs_len`.
#[no_mangle]
pub unsafe extern "C" fn vaoi_policy_probs(
    policy: *mut VaoiPolicy,
    vaoi: *const u32,
    len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> VaoiStatus {
    guard(|| {
        let p = policy_probs(policy, vaoi, len)?;
        if probs_len != p.len() {
            return Err(fail(VaoiStatus::InvalidArgument, format!("buffer holds {probs_len}, need {}", p.len())));
        }
        slice_mut(probs, probs_len, "probs")?.copy_from_slice(&p);
        Ok(())
    })
}

/// Pick an action for state `vaoi`: the most likely one when `greedy` is
/// nonzero, otherwise a sample.
///
/// # Safety
/// `policy` must be live, `vaoi` must hold `len` values and `action` be writable.
#[no_mangle]
pub unsafe extern "C" fn vaoi_policy_action(
    policy: *mut VaoiPolicy,
    vaoi: *const u32,
    len: usize,
    greedy: i32,
    action: *mut usize,
) -> VaoiStatus {
    guard(|| {
        non_null(action, "action")?;
        let probs = policy_probs(policy, vaoi, len)?;
        let dist = core(vaoi_core::actor::PolicyDistribution::new(probs))?;
        *action = if greedy != 0 { dist.argmax() } else { dist.sample(&mut (*policy).rng) };
        Ok(())
    })
}

/// Empirical CVaR at level `alpha` of `len` samples.
///
/// # Safety
/// `samples` must hold `len` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn vaoi_empirical_cvar(samples: *const f64, len: usize, alpha: f64, out: *mut f64) -> VaoiStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = core(empirical_cvar(slice(samples, len, "samples")?, alpha))?;
        Ok(())
    })
}

/// Fraction of nonzero entries in `actions`.
///
/// # Safety
/// `actions` must hold `len` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn vaoi_average_cost(actions: *const usize, len: usize, out: *mut f64) -> VaoiStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = core(average_cost(slice(actions, len, "actions")?))?;
        Ok(())
    })
}

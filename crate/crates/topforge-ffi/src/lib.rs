//! C ABI over the core solver.
//!
//! Conventions: every object crosses the boundary as an opaque handle,
//! every fallible call returns a [`TopforgeStatus`], structured payloads
//! come back as UTF-8 JSON strings owned by this library, and a
//! thread-local message (see [`topforge_last_error`]) carries the detail
//! of the most recent failure on the calling thread. Panics never unwind
//! across the boundary; they surface as `TOPFORGE_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use topforge::baselines::{exhaustive_optimal, greedy_heuristic, BaselineError};
use topforge::gen::{format_line, generate_item, parse_line, DatasetItem, GenConfig, PrizeScheme};
use topforge::policy::{NetConfig, NormKind, Policy};
use topforge::sim::{rollout, SelectMode, SimError, SolutionDump};
use topforge::top::{total_reward, Solution};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopforgeStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Arguments were structurally valid but semantically rejected.
    InvalidArgument = 2,
    Io = 3,
    /// The instance admits no feasible tour under its budget.
    Infeasible = 4,
    Internal = 5,
}

/// An instance plus the fleet size it was generated for.
pub struct TopforgeInstance {
    item: DatasetItem,
}

/// A policy network: parameters, running statistics, and configuration.
pub struct TopforgePolicy {
    policy: Policy,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: TopforgeStatus, msg: &str) -> TopforgeStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> TopforgeStatus) -> TopforgeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(TopforgeStatus::Internal, "panic inside the library"),
    }
}

fn sim_status(e: &SimError) -> TopforgeStatus {
    match e {
        SimError::Infeasible(_) => TopforgeStatus::Infeasible,
        SimError::Contract(_) => TopforgeStatus::InvalidArgument,
        _ => TopforgeStatus::Internal,
    }
}

/// # Safety
/// `ptr` must be null or valid for reads.
unsafe fn as_ref<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, TopforgeStatus> {
    unsafe { ptr.as_ref() }.ok_or_else(|| fail(TopforgeStatus::NullArgument, what))
}

/// # Safety
/// `ptr` must be null or valid for reads as a C string.
unsafe fn as_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, TopforgeStatus> {
    if ptr.is_null() {
        return Err(fail(TopforgeStatus::NullArgument, what));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| fail(TopforgeStatus::InvalidArgument, "argument is not valid UTF-8"))
}

fn give_string(text: String, out: *mut *mut c_char) -> TopforgeStatus {
    let c = match CString::new(text) {
        Ok(c) => c,
        Err(_) => return fail(TopforgeStatus::Internal, "payload contains a NUL byte"),
    };
    unsafe { *out = c.into_raw() };
    TopforgeStatus::Ok
}

fn give_solution(
    solution: &Solution,
    item: &DatasetItem,
    out_json: *mut *mut c_char,
    out_reward: *mut f64,
) -> TopforgeStatus {
    let reward = match total_reward(solution, &item.instance) {
        Ok(r) => r,
        Err(e) => return fail(TopforgeStatus::Internal, &e.to_string()),
    };
    let dump = match SolutionDump::new(solution, &item.instance) {
        Ok(d) => d,
        Err(e) => return fail(sim_status(&e), &e.to_string()),
    };
    let json = match serde_json::to_string(&dump) {
        Ok(j) => j,
        Err(e) => return fail(TopforgeStatus::Internal, &e.to_string()),
    };
    if !out_reward.is_null() {
        unsafe { *out_reward = reward };
    }
    if out_json.is_null() {
        return TopforgeStatus::Ok;
    }
    give_string(json, out_json)
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn topforge_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn topforge_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Frees a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must have been returned by a `topforge_*` call and not freed since.
#[no_mangle]
pub unsafe extern "C" fn topforge_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Generates instance number `stream` of the family described by the
/// arguments. `prize_scheme`: 0 constant, 1 uniform, 2 distance-based.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn topforge_instance_generate(
    n: usize,
    m: usize,
    t_max: f64,
    prize_scheme: u32,
    single_depot: bool,
    seed: u64,
    stream: u64,
    out: *mut *mut TopforgeInstance,
) -> TopforgeStatus {
    guard(|| {
        if out.is_null() {
            return fail(TopforgeStatus::NullArgument, "out");
        }
        let scheme = match prize_scheme {
            0 => PrizeScheme::Constant,
            1 => PrizeScheme::Uniform,
            2 => PrizeScheme::DistanceBased,
            other => {
                return fail(
                    TopforgeStatus::InvalidArgument,
                    &format!("unknown prize scheme code {other}"),
                )
            }
        };
        let config = GenConfig { n, m, t_max, prize_scheme: scheme, single_depot, seed };
        if let Err(e) = config.validate() {
            return fail(TopforgeStatus::InvalidArgument, &e);
        }
        let item = generate_item(&config, stream);
        unsafe { *out = Box::into_raw(Box::new(TopforgeInstance { item })) };
        TopforgeStatus::Ok
    })
}

/// Parses one dataset line (JSON) into an instance handle.
///
/// # Safety
/// `line` must be a valid C string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn topforge_instance_from_json(
    line: *const c_char,
    out: *mut *mut TopforgeInstance,
) -> TopforgeStatus {
    guard(|| {
        if out.is_null() {
            return fail(TopforgeStatus::NullArgument, "out");
        }
        let text = match unsafe { as_str(line, "line") } {
            Ok(t) => t,
            Err(s) => return s,
        };
        match parse_line(text, 0) {
            Ok(item) => {
                unsafe { *out = Box::into_raw(Box::new(TopforgeInstance { item })) };
                TopforgeStatus::Ok
            }
            Err(e) => fail(TopforgeStatus::InvalidArgument, &e.to_string()),
        }
    })
}

/// Serializes the instance to its dataset-line JSON form.
///
/// # Safety
/// Pointers must be valid; free the string with [`topforge_string_free`].
#[no_mangle]
pub unsafe extern "C" fn topforge_instance_to_json(
    instance: *const TopforgeInstance,
    out: *mut *mut c_char,
) -> TopforgeStatus {
    guard(|| {
        if out.is_null() {
            return fail(TopforgeStatus::NullArgument, "out");
        }
        match unsafe { as_ref(instance, "instance") } {
            Ok(h) => give_string(format_line(&h.item), out),
            Err(s) => s,
        }
    })
}

/// Region count, or 0 for a null handle.
#[no_mangle]
pub extern "C" fn topforge_instance_n(instance: *const TopforgeInstance) -> usize {
    unsafe { instance.as_ref() }.map_or(0, |h| h.item.instance.n())
}

/// Fleet size, or 0 for a null handle.
#[no_mangle]
pub extern "C" fn topforge_instance_m(instance: *const TopforgeInstance) -> usize {
    unsafe { instance.as_ref() }.map_or(0, |h| h.item.m)
}

/// Time budget, or NaN for a null handle.
#[no_mangle]
pub extern "C" fn topforge_instance_t_max(instance: *const TopforgeInstance) -> f64 {
    unsafe { instance.as_ref() }.map_or(f64::NAN, |h| h.item.instance.t_max())
}

/// # Safety
/// `instance` must be null or a handle returned by this library, unfreed.
#[no_mangle]
pub unsafe extern "C" fn topforge_instance_free(instance: *mut TopforgeInstance) {
    if !instance.is_null() {
        drop(unsafe { Box::from_raw(instance) });
    }
}

/// Builds a freshly initialized policy. `encoder_norm`: 0 batch, 1 layer.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn topforge_policy_init(
    hidden_dim: usize,
    num_blocks: usize,
    num_heads: usize,
    logit_clip: f64,
    encoder_norm: u32,
    seed: u64,
    out: *mut *mut TopforgePolicy,
) -> TopforgeStatus {
    guard(|| {
        if out.is_null() {
            return fail(TopforgeStatus::NullArgument, "out");
        }
        let norm = match encoder_norm {
            0 => NormKind::Batch,
            1 => NormKind::Layer,
            other => {
                return fail(
                    TopforgeStatus::InvalidArgument,
                    &format!("unknown norm code {other}"),
                )
            }
        };
        let config = NetConfig {
            hidden_dim,
            num_blocks,
            num_heads,
            logit_clip,
            encoder_norm: norm,
        };
        match Policy::init(config, seed) {
            Ok(policy) => {
                unsafe { *out = Box::into_raw(Box::new(TopforgePolicy { policy })) };
                TopforgeStatus::Ok
            }
            Err(e) => fail(TopforgeStatus::InvalidArgument, &e.to_string()),
        }
    })
}

/// Loads a policy from a checkpoint archive.
///
/// # Safety
/// `path` must be a valid C string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn topforge_policy_load(
    path: *const c_char,
    out: *mut *mut TopforgePolicy,
) -> TopforgeStatus {
    guard(|| {
        if out.is_null() {
            return fail(TopforgeStatus::NullArgument, "out");
        }
        let path = match unsafe { as_str(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Policy::load(Path::new(path)) {
            Ok(policy) => {
                unsafe { *out = Box::into_raw(Box::new(TopforgePolicy { policy })) };
                TopforgeStatus::Ok
            }
            Err(e) => fail(TopforgeStatus::Io, &e.to_string()),
        }
    })
}

/// Writes the policy to a checkpoint archive.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn topforge_policy_save(
    policy: *const TopforgePolicy,
    path: *const c_char,
) -> TopforgeStatus {
    guard(|| {
        let handle = match unsafe { as_ref(policy, "policy") } {
            Ok(h) => h,
            Err(s) => return s,
        };
        let path = match unsafe { as_str(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match handle.policy.save(Path::new(path)) {
            Ok(()) => TopforgeStatus::Ok,
            Err(e) => fail(TopforgeStatus::Io, &e.to_string()),
        }
    })
}

/// # Safety
/// `policy` must be null or a handle returned by this library, unfreed.
#[no_mangle]
pub unsafe extern "C" fn topforge_policy_free(policy: *mut TopforgePolicy) {
    if !policy.is_null() {
        drop(unsafe { Box::from_raw(policy) });
    }
}

/// Rolls the policy out on the instance. Greedy decoding ignores `seed`;
/// sampled decoding is reproducible in it. On success `out_json` (if
/// non-null) receives a JSON object with the routes, per-agent durations
/// and reward, and `out_reward` (if non-null) the collected prize.
///
/// # Safety
/// `policy` and `instance` must be valid handles; out pointers must be
/// null or valid for writes. Free the string with [`topforge_string_free`].
#[no_mangle]
pub unsafe extern "C" fn topforge_solve_policy(
    policy: *const TopforgePolicy,
    instance: *const TopforgeInstance,
    greedy: bool,
    seed: u64,
    out_json: *mut *mut c_char,
    out_reward: *mut f64,
) -> TopforgeStatus {
    guard(|| {
        let policy = match unsafe { as_ref(policy, "policy") } {
            Ok(h) => h,
            Err(s) => return s,
        };
        let handle = match unsafe { as_ref(instance, "instance") } {
            Ok(h) => h,
            Err(s) => return s,
        };
        let mode = if greedy { SelectMode::Greedy } else { SelectMode::Sample };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match rollout(&policy.policy, &handle.item.instance, handle.item.m, mode, &mut rng) {
            Ok(r) => give_solution(&r.solution, &handle.item, out_json, out_reward),
            Err(e) => fail(sim_status(&e), &e.to_string()),
        }
    })
}

/// Solves with the prize-per-detour greedy heuristic.
///
/// # Safety
/// Same contract as [`topforge_solve_policy`].
#[no_mangle]
pub unsafe extern "C" fn topforge_solve_greedy(
    instance: *const TopforgeInstance,
    out_json: *mut *mut c_char,
    out_reward: *mut f64,
) -> TopforgeStatus {
    guard(|| {
        let handle = match unsafe { as_ref(instance, "instance") } {
            Ok(h) => h,
            Err(s) => return s,
        };
        let solution = greedy_heuristic(&handle.item.instance, handle.item.m);
        give_solution(&solution, &handle.item, out_json, out_reward)
    })
}

/// Solves exactly by dynamic programming over region subsets. Refuses
/// instances with more than a handful of regions; see the core crate's
/// oracle guard.
///
/// # Safety
/// Same contract as [`topforge_solve_policy`].
#[no_mangle]
pub unsafe extern "C" fn topforge_solve_exact(
    instance: *const TopforgeInstance,
    out_json: *mut *mut c_char,
    out_reward: *mut f64,
) -> TopforgeStatus {
    guard(|| {
        let handle = match unsafe { as_ref(instance, "instance") } {
            Ok(h) => h,
            Err(s) => return s,
        };
        match exhaustive_optimal(&handle.item.instance, handle.item.m) {
            Ok(solution) => give_solution(&solution, &handle.item, out_json, out_reward),
            Err(e @ BaselineError::TooLarge { .. }) => {
                fail(TopforgeStatus::InvalidArgument, &e.to_string())
            }
            Err(e @ BaselineError::Infeasible(_)) => fail(TopforgeStatus::Infeasible, &e.to_string()),
        }
    })
}

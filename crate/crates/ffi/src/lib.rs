//! C ABI over `solar`.
//!
//! Every function returns a [`SolarStatus`]; on failure the message is kept per thread and can be
//! read with [`solar_last_error`]. Handles are opaque and must be released with their `_free`
//! function. Null handles are rejected, never dereferenced.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use solar::driver::{evaluate, load_agent, load_model, run_solar, Artifacts, RunConfig};
use solar::envs::{self, EnvConfig, EnvState, ObsMode};
use solar::error::SolarError;
use solar::svae::{encode, Model};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numerical = 4,
    Io = 5,
    Parse = 6,
    VersionMismatch = 7,
    Config = 8,
    /// `solar_env_step` before `solar_env_reset`, or after the episode ended.
    BadState = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolarEnvKind {
    NavRandomGoal = 0,
    NavFixedGoal = 1,
    Car = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolarEvalSummary {
    pub episodes: usize,
    pub mean_cost: f64,
    pub final_distance: f64,
    pub success_rate: f64,
}

/// A simulator instance with its own random stream.
pub struct SolarEnv {
    cfg: EnvConfig,
    state: Option<EnvState>,
    rng: ChaCha8Rng,
}

/// A trained encoder, decoder, dynamics and cost model.
pub struct SolarModel {
    model: Model,
}

/// A trained model together with its time-varying policy and local dynamics.
pub struct SolarAgent {
    artifacts: Artifacts,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &SolarError) -> SolarStatus {
    match e {
        SolarError::Dimension(_) => SolarStatus::Dimension,
        SolarError::NotPositiveDefinite(_)
        | SolarError::MomentUndefined(_)
        | SolarError::NonFinite(_)
        | SolarError::StepExhausted { .. }
        | SolarError::Singular(_) => SolarStatus::Numerical,
        SolarError::InvalidParameter(_) | SolarError::Empty(_) | SolarError::StaleCache(_) => {
            SolarStatus::InvalidArgument
        }
        SolarError::Parse(_) => SolarStatus::Parse,
        SolarError::VersionMismatch { .. } => SolarStatus::VersionMismatch,
        SolarError::Config(_) => SolarStatus::Config,
        SolarError::Io(_) => SolarStatus::Io,
    }
}

struct Fail(SolarStatus, String);

impl From<SolarError> for Fail {
    fn from(e: SolarError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SolarStatus::NullPointer, format!("{what} is null"))
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> SolarStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SolarStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SolarStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SolarStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, want: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != want {
        return Err(Fail(SolarStatus::Dimension, format!("{what} has length {len}, expected {want}")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, want: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < want {
        return Err(Fail(SolarStatus::Dimension, format!("{what} holds {len} values, needs {want}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, want))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Copies the last error message of this thread into `buf`, truncated and NUL-terminated.
///
/// Returns the full message length in bytes, excluding the terminator, or 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn solar_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Creates an environment from a preset; `image` selects pixel observations.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn solar_env_new(kind: SolarEnvKind, image: bool, seed: u64, out: *mut *mut SolarEnv) -> SolarStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = match kind {
            SolarEnvKind::NavRandomGoal => EnvConfig::nav_random_goal(),
            SolarEnvKind::NavFixedGoal => EnvConfig::nav_fixed_goal(),
            SolarEnvKind::Car => EnvConfig::car(),
        };
        let mode = if image { ObsMode::Image } else { ObsMode::State };
        let cfg = EnvConfig { seed, ..cfg.with_mode(mode) };
        emit(out, SolarEnv { cfg, state: None, rng: ChaCha8Rng::seed_from_u64(seed) });
        Ok(())
    })
}

/// Creates an environment from the `[env]` table syntax of a run configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn solar_env_from_toml(toml: *const c_char, out: *mut *mut SolarEnv) -> SolarStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: EnvConfig = ::toml::from_str(text).map_err(|e| Fail(SolarStatus::Parse, e.to_string()))?;
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        emit(out, SolarEnv { cfg, state: None, rng });
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle from `solar_env_new`/`solar_env_from_toml` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn solar_env_free(env: *mut SolarEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be a live handle; the out pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn solar_env_dims(
    env: *const SolarEnv,
    obs_dim: *mut usize,
    action_dim: *mut usize,
    horizon: *mut usize,
) -> SolarStatus {
    guard(|| {
        let env = handle(env, "env")?;
        if let Some(p) = obs_dim.as_mut() {
            *p = env.cfg.obs_dim();
        }
        if let Some(p) = action_dim.as_mut() {
            *p = env.cfg.action_dim();
        }
        if let Some(p) = horizon.as_mut() {
            *p = env.cfg.horizon;
        }
        Ok(())
    })
}

/// Starts a new episode and writes the first observation.
///
/// # Safety
/// `env` must be a live handle and `obs` must point to `obs_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn solar_env_reset(env: *mut SolarEnv, obs: *mut f64, obs_len: usize) -> SolarStatus {
    guard(|| {
        let env = handle_mut(env, "env")?;
        let out = out_slice(obs, obs_len, env.cfg.obs_dim(), "obs")?;
        let (state, o) = envs::reset(&env.cfg, &mut env.rng)?;
        out.copy_from_slice(&o);
        env.state = Some(state);
        Ok(())
    })
}

/// Applies `action`, writes the next observation and the cost of the step.
///
/// `done` is set once the episode horizon is reached; a further step fails with `BadState`.
///
/// # Safety
/// `env` must be a live handle; `action` must hold `action_len` doubles, `obs` must have room for
/// `obs_len`, and `cost`/`done` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn solar_env_step(
    env: *mut SolarEnv,
    action: *const f64,
    action_len: usize,
    obs: *mut f64,
    obs_len: usize,
    cost: *mut f64,
    done: *mut bool,
) -> SolarStatus {
    guard(|| {
        let env = handle_mut(env, "env")?;
        let a = slice_arg(action, action_len, env.cfg.action_dim(), "action")?;
        let out = out_slice(obs, obs_len, env.cfg.obs_dim(), "obs")?;
        let state = env.state.as_ref().ok_or_else(|| Fail(SolarStatus::BadState, "episode not started".into()))?;
        if state.t >= env.cfg.horizon {
            return Err(Fail(SolarStatus::BadState, "episode already finished".into()));
        }
        let (next, o, c) = envs::step(state, a, &env.cfg)?;
        out.copy_from_slice(&o);
        if let Some(p) = cost.as_mut() {
            *p = c;
        }
        if let Some(p) = done.as_mut() {
            *p = next.t >= env.cfg.horizon;
        }
        env.state = Some(next);
        Ok(())
    })
}

/// Distance from the current position to the goal.
///
/// # Safety
/// `env` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn solar_env_distance(env: *const SolarEnv, out: *mut f64) -> SolarStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let state = env.state.as_ref().ok_or_else(|| Fail(SolarStatus::BadState, "episode not started".into()))?;
        *out = state.distance_to_goal();
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn solar_model_load(path: *const c_char, out: *mut *mut SolarModel) -> SolarStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        emit(out, SolarModel { model: load_model(&path)? });
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from `solar_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn solar_model_free(model: *mut SolarModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; the out pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn solar_model_dims(
    model: *const SolarModel,
    latent_dim: *mut usize,
    obs_dim: *mut usize,
    action_dim: *mut usize,
) -> SolarStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        if let Some(p) = latent_dim.as_mut() {
            *p = m.latent_dim();
        }
        if let Some(p) = obs_dim.as_mut() {
            *p = m.obs_dim();
        }
        if let Some(p) = action_dim.as_mut() {
            *p = m.action_dim();
        }
        Ok(())
    })
}

/// Encodes one observation into the mean and variance of its latent Gaussian.
///
/// # Safety
/// `obs` must hold `obs_len` doubles; `mean` and `var` must each have room for `latent_len`.
#[no_mangle]
pub unsafe extern "C" fn solar_model_encode(
    model: *const SolarModel,
    obs: *const f64,
    obs_len: usize,
    mean: *mut f64,
    var: *mut f64,
    latent_len: usize,
) -> SolarStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        let o = slice_arg(obs, obs_len, m.obs_dim(), "obs")?;
        let mean = out_slice(mean, latent_len, m.latent_dim(), "mean")?;
        let var = out_slice(var, latent_len, m.latent_dim(), "var")?;
        let pot = encode(m, o)?;
        for i in 0..mean.len() {
            var[i] = 1.0 / pot.j[i];
            mean[i] = pot.h[i] * var[i];
        }
        Ok(())
    })
}

/// Loads a model file and the policy file written next to it by a training run.
///
/// # Safety
/// Both paths must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn solar_agent_load(
    model_path: *const c_char,
    policy_path: *const c_char,
    out: *mut *mut SolarAgent,
) -> SolarStatus {
    guard(|| {
        let model_path = PathBuf::from(str_arg(model_path, "model_path")?);
        let policy_path = PathBuf::from(str_arg(policy_path, "policy_path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_model(&model_path)?;
        let (policy, dynamics) = load_agent(&policy_path)?;
        if policy.state_dim() != model.latent_dim() {
            return Err(Fail(SolarStatus::Dimension, "policy input size differs from the model latent size".into()));
        }
        emit(out, SolarAgent { artifacts: Artifacts { model, policy, dynamics } });
        Ok(())
    })
}

/// # Safety
/// `agent` must be null or a handle from `solar_agent_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn solar_agent_free(agent: *mut SolarAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}

/// Rolls the agent out for `episodes` episodes in `env`'s configuration.
///
/// The environment handle's own episode state is not touched.
///
/// # Safety
/// `agent` and `env` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn solar_agent_evaluate(
    agent: *const SolarAgent,
    env: *const SolarEnv,
    episodes: usize,
    seed: u64,
    out: *mut SolarEvalSummary,
) -> SolarStatus {
    guard(|| {
        let agent = handle(agent, "agent")?;
        let env = handle(env, "env")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if episodes == 0 {
            return Err(Fail(SolarStatus::InvalidArgument, "episodes must be positive".into()));
        }
        let s = evaluate(&env.cfg, &agent.artifacts, episodes, seed)?;
        *out = SolarEvalSummary {
            episodes: s.episodes,
            mean_cost: s.mean_cost,
            final_distance: s.final_distance,
            success_rate: s.success_rate,
        };
        Ok(())
    })
}

/// Runs a full training loop from a TOML run configuration.
///
/// `out_dir` may be null to use the configuration's own setting. Checkpoints and `report.json`
/// are written there.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out_dir` must be one or null.
#[no_mangle]
pub unsafe extern "C" fn solar_train(config_path: *const c_char, out_dir: *const c_char) -> SolarStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(config_path, "config_path")?);
        let mut cfg = RunConfig::load(&path)?;
        if !out_dir.is_null() {
            cfg.out_dir = Some(PathBuf::from(str_arg(out_dir, "out_dir")?));
        }
        cfg.validate()?;
        run_solar(&cfg)?;
        Ok(())
    })
}

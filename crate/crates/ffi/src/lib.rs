//! C ABI over the forcegrasp simulator and policy runtime.
//!
//! Handles are opaque and owned by the caller, who must release them with
//! the matching `*_free` function. Every fallible call returns an
//! [`FgStatus`]; on failure [`fg_last_error_message`] describes the cause
//! for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use forcegrasp::dataset::embed_instruction;
use forcegrasp::expert::{target_force, ControllerGains, ExpertParams};
use forcegrasp::policy::{instruction_embedding, Policy};
use forcegrasp::rng::{stream, Purpose, Rng};
use forcegrasp::sim::{
    self, initial_observation, lift_test, Gripper, GripperCommand, LiftResult, ObjectSpec,
    ObjectState, SimConfig,
};

/// Bumped on any breaking change to the exported functions or structs.
pub const FG_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    BufferTooSmall = 4,
    Panic = 5,
}

/// Physical parameters of a graspable object.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FgObjectSpec {
    /// mm
    pub rest_width: f64,
    /// kg
    pub mass: f64,
    pub friction_mu: f64,
    /// N/mm
    pub stiffness_k: f64,
    /// N
    pub crush_force: f64,
    /// N
    pub yield_force: f64,
    pub plasticity: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FgSimConfig {
    /// s
    pub dt: f64,
    /// mm
    pub max_aperture: f64,
    /// mm/s
    pub closing_speed: f64,
    pub gravity: f64,
    /// N
    pub sensor_noise_std: f64,
    /// N
    pub sensor_quantum: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FgCommand {
    pub target_aperture: f64,
    pub force_limit: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FgObservation {
    pub aperture: f64,
    pub applied_force: f64,
    pub contact_force: f64,
    pub timestamp: f64,
}

/// Noise-free view of the simulated object.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FgSimState {
    pub aperture: f64,
    pub current_rest_width: f64,
    pub true_contact_force: f64,
    pub cumulative_plastic: f64,
    pub crushed: bool,
}

/// Shape of the inputs and outputs of a loaded policy.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FgPolicyInfo {
    pub obs_horizon: usize,
    pub pred_horizon: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub instruction_dim: usize,
    /// Constant force limit of a position-only policy, or 0 for a policy
    /// that commands force.
    pub constant_force: f64,
}

/// One simulated gripper grasping one object.
pub struct FgSim {
    spec: ObjectSpec,
    state: ObjectState,
    gripper: Gripper,
    config: SimConfig,
    rng: Rng,
}

/// A trained diffusion policy.
pub struct FgPolicy {
    policy: Policy,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(FgStatus, String);

fn fail<T>(status: FgStatus, message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, message.into()))
}

/// Run `f`, recording any error or panic for [`fg_last_error_message`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FgStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FgStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(FgStatus::NullPointer, format!("{name} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(FgStatus::NullPointer, format!("{name} is null")))
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(FgStatus::NullPointer, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(FgStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

fn object_spec(spec: &FgObjectSpec) -> Result<ObjectSpec, Failure> {
    let spec = ObjectSpec {
        name: "object".into(),
        rest_width: spec.rest_width,
        mass: spec.mass,
        friction_mu: spec.friction_mu,
        stiffness_k: spec.stiffness_k,
        crush_force: spec.crush_force,
        yield_force: spec.yield_force,
        plasticity: spec.plasticity,
        seen: false,
    };
    match spec.validate() {
        Ok(()) => Ok(spec),
        Err(e) => fail(FgStatus::InvalidArgument, e.to_string()),
    }
}

fn observation(o: &sim::GripperObservation) -> FgObservation {
    FgObservation {
        aperture: o.aperture,
        applied_force: o.applied_force,
        contact_force: o.contact_force,
        timestamp: o.timestamp,
    }
}

#[no_mangle]
pub extern "C" fn fg_abi_version() -> u32 {
    FG_ABI_VERSION
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn fg_sim_config_default() -> FgSimConfig {
    let d = SimConfig::default();
    FgSimConfig {
        dt: d.dt,
        max_aperture: d.max_aperture,
        closing_speed: d.closing_speed,
        gravity: d.gravity,
        sensor_noise_std: d.sensor_noise_std,
        sensor_quantum: d.sensor_quantum,
    }
}

/// Create a simulation with the fingers open at `start_aperture`. `config`
/// may be null for defaults.
///
/// # Safety
/// `spec` must point to a valid `FgObjectSpec`, `config` must be null or
/// valid, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_sim_new(
    spec: *const FgObjectSpec,
    config: *const FgSimConfig,
    start_aperture: f64,
    seed: u64,
    out: *mut *mut FgSim,
) -> FgStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let spec = object_spec(deref(spec, "spec")?)?;
        let mut cfg = SimConfig {
            rng_seed: seed,
            ..SimConfig::default()
        };
        if let Some(c) = config.as_ref() {
            cfg.dt = c.dt;
            cfg.max_aperture = c.max_aperture;
            cfg.closing_speed = c.closing_speed;
            cfg.gravity = c.gravity;
            cfg.sensor_noise_std = c.sensor_noise_std;
            cfg.sensor_quantum = c.sensor_quantum;
        }
        if let Err(e) = cfg.validate() {
            return fail(FgStatus::InvalidArgument, e.to_string());
        }
        if !(0.0..=cfg.max_aperture).contains(&start_aperture) {
            return fail(
                FgStatus::InvalidArgument,
                format!(
                    "start aperture {start_aperture} outside [0, {}]",
                    cfg.max_aperture
                ),
            );
        }
        let sim = FgSim {
            state: spec.fresh_state(),
            spec,
            gripper: Gripper {
                aperture: start_aperture,
                time: 0.0,
            },
            config: cfg,
            rng: stream(seed, Purpose::Sensor, &[]),
        };
        *out = Box::into_raw(Box::new(sim));
        Ok(())
    })
}

/// # Safety
/// `sim` must be null or a handle from `fg_sim_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fg_sim_free(sim: *mut FgSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Sensor reading before any command, with the given force limit.
///
/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_sim_observe(
    sim: *mut FgSim,
    applied_force: f64,
    out: *mut FgObservation,
) -> FgStatus {
    guard(|| {
        let sim = deref_mut(sim, "sim")?;
        let out = deref_mut(out, "out")?;
        let obs = initial_observation(
            &sim.spec,
            &sim.state,
            &sim.gripper,
            applied_force,
            &sim.config,
            &mut sim.rng,
        );
        *out = observation(&obs);
        Ok(())
    })
}

/// Advance one control period.
///
/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_sim_step(
    sim: *mut FgSim,
    command: FgCommand,
    out: *mut FgObservation,
) -> FgStatus {
    guard(|| {
        let sim = deref_mut(sim, "sim")?;
        let out = deref_mut(out, "out")?;
        let cmd = GripperCommand {
            target_aperture: command.target_aperture,
            force_limit: command.force_limit,
        };
        let step = sim::step(
            &sim.spec,
            &sim.state,
            &sim.gripper,
            &cmd,
            &sim.config,
            &mut sim.rng,
        );
        sim.state = step.state;
        sim.gripper = step.gripper;
        *out = observation(&step.observation);
        Ok(())
    })
}

/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_sim_state(sim: *const FgSim, out: *mut FgSimState) -> FgStatus {
    guard(|| {
        let sim = deref(sim, "sim")?;
        let out = deref_mut(out, "out")?;
        *out = FgSimState {
            aperture: sim.gripper.aperture,
            current_rest_width: sim.state.current_rest_width,
            true_contact_force: sim::true_contact_force(
                &sim.spec,
                &sim.state,
                sim.gripper.aperture,
            ),
            cumulative_plastic: sim.state.cumulative_plastic,
            crushed: sim.state.crushed,
        };
        Ok(())
    })
}

/// Whether friction at the current true contact force carries the object.
///
/// # Safety
/// `sim` must be a live handle and `held` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_sim_lift_test(sim: *const FgSim, held: *mut bool) -> FgStatus {
    guard(|| {
        let sim = deref(sim, "sim")?;
        let held = deref_mut(held, "held")?;
        let force = sim::true_contact_force(&sim.spec, &sim.state, sim.gripper.aperture);
        *held = lift_test(&sim.spec, force, &sim.config) == LiftResult::Held;
        Ok(())
    })
}

/// Spring contact force of an undeformed object at `aperture`.
///
/// # Safety
/// `spec` must point to a valid `FgObjectSpec` and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_true_contact_force(
    spec: *const FgObjectSpec,
    aperture: f64,
    out: *mut f64,
) -> FgStatus {
    guard(|| {
        let spec = object_spec(deref(spec, "spec")?)?;
        let out = deref_mut(out, "out")?;
        *out = sim::true_contact_force(&spec, &spec.fresh_state(), aperture);
        Ok(())
    })
}

/// Slip-safe force the adaptive expert aims for, with default gains and
/// gravity.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_target_force(
    mass: f64,
    friction_mu: f64,
    slip_margin: f64,
    out: *mut f64,
) -> FgStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        if !(mass > 0.0 && friction_mu > 0.0 && slip_margin > 0.0) {
            return fail(
                FgStatus::InvalidArgument,
                "mass, friction and slip margin must be positive",
            );
        }
        let params = ExpertParams {
            est_mass: mass,
            est_mu: friction_mu,
            est_k: 1.0,
            slip_margin,
        };
        *out = target_force(
            &params,
            &ControllerGains::default(),
            SimConfig::default().gravity,
        );
        Ok(())
    })
}

/// Write the instruction embedding into `out[0..len]`; `len` must equal the
/// embedding width.
///
/// # Safety
/// `instruction` must be a NUL-terminated string and `out` writable for
/// `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fg_embed_instruction(
    instruction: *const c_char,
    out: *mut f64,
    len: usize,
) -> FgStatus {
    guard(|| {
        let text = text(instruction, "instruction")?;
        if out.is_null() {
            return fail(FgStatus::NullPointer, "out is null");
        }
        let v =
            embed_instruction(text).or_else(|e| fail(FgStatus::InvalidArgument, e.to_string()))?;
        if len != v.len() {
            return fail(
                FgStatus::BufferTooSmall,
                format!("embedding has {} values, buffer holds {len}", v.len()),
            );
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&v);
        Ok(())
    })
}

/// Load a checkpoint and its `.policy.json` sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_policy_load(path: *const c_char, out: *mut *mut FgPolicy) -> FgStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        let out = deref_mut(out, "out")?;
        let policy = Policy::load(&path)
            .or_else(|e| fail(FgStatus::Io, format!("{}: {e}", path.display())))?;
        *out = Box::into_raw(Box::new(FgPolicy { policy }));
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a handle from `fg_policy_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fg_policy_free(policy: *mut FgPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// # Safety
/// `policy` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_policy_info(
    policy: *const FgPolicy,
    out: *mut FgPolicyInfo,
) -> FgStatus {
    guard(|| {
        let p = &deref(policy, "policy")?.policy;
        let out = deref_mut(out, "out")?;
        *out = FgPolicyInfo {
            obs_horizon: p.config.obs_horizon,
            pred_horizon: p.config.pred_horizon,
            obs_dim: p.variant.obs_dim(),
            act_dim: p.variant.act_dim(),
            instruction_dim: p.config.instruction_dim,
            constant_force: p.variant.constant_force().unwrap_or(0.0),
        };
        Ok(())
    })
}

/// Sample an action sequence. `obs_window` holds `obs_horizon` rows of
/// `obs_dim` raw readings, oldest first; `out` receives `pred_horizon` rows
/// of `act_dim` denormalized actions. The same seed gives the same sample.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `instruction` must be
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fg_policy_sample(
    policy: *const FgPolicy,
    obs_window: *const f64,
    obs_len: usize,
    instruction: *const c_char,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> FgStatus {
    guard(|| {
        let p = &deref(policy, "policy")?.policy;
        let text = text(instruction, "instruction")?;
        if obs_window.is_null() || out.is_null() {
            return fail(
                FgStatus::NullPointer,
                "observation or output buffer is null",
            );
        }
        let (rows, width) = (p.config.obs_horizon, p.variant.obs_dim());
        if obs_len != rows * width {
            return fail(
                FgStatus::InvalidArgument,
                format!("observation window has {obs_len} values, expected {rows} x {width}"),
            );
        }
        let needed = p.config.pred_horizon * p.variant.act_dim();
        if out_len < needed {
            return fail(
                FgStatus::BufferTooSmall,
                format!("output holds {out_len} values, needs {needed}"),
            );
        }
        let flat = std::slice::from_raw_parts(obs_window, obs_len);
        let window: Vec<Vec<f64>> = flat.chunks(width).map(<[f64]>::to_vec).collect();
        let instruction = instruction_embedding(text)
            .or_else(|e| fail(FgStatus::InvalidArgument, e.to_string()))?;
        let mut rng = stream(seed, Purpose::Sampling, &[]);
        let actions = p
            .sample_actions(&window, &instruction, &mut rng)
            .or_else(|e| fail(FgStatus::InvalidArgument, e.to_string()))?;
        let dst = std::slice::from_raw_parts_mut(out, needed);
        for (d, v) in dst.iter_mut().zip(actions.iter().flatten()) {
            *d = *v;
        }
        Ok(())
    })
}

/// First sampled action as a gripper command, the way evaluation executes
/// it: position-only policies get their constant force limit, forceful ones
/// are floored at the minimum force.
///
/// # Safety
/// As for `fg_policy_sample`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_policy_act(
    policy: *const FgPolicy,
    obs_window: *const f64,
    obs_len: usize,
    instruction: *const c_char,
    seed: u64,
    out: *mut FgCommand,
) -> FgStatus {
    let Some(handle) = policy.as_ref() else {
        set_error("policy is null");
        return FgStatus::NullPointer;
    };
    let p = &handle.policy;
    let mut actions = vec![0.0; p.config.pred_horizon * p.variant.act_dim()];
    let status = fg_policy_sample(
        policy,
        obs_window,
        obs_len,
        instruction,
        seed,
        actions.as_mut_ptr(),
        actions.len(),
    );
    if status != FgStatus::Ok {
        return status;
    }
    guard(|| {
        let out = deref_mut(out, "out")?;
        let force = match p.variant.constant_force() {
            Some(f) => f,
            None => actions[1].max(p.config.min_force),
        };
        *out = FgCommand {
            target_aperture: actions[0],
            force_limit: force,
        };
        Ok(())
    })
}

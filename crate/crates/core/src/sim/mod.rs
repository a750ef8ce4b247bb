//! Two-finger gripper squeezing a deformable object.
//!
//! Contact is a linear spring on the object's current rest width. The
//! actuator is torque limited: it moves toward the commanded aperture at a
//! bounded speed and stops where the spring force reaches the commanded
//! force limit. Squeezing past the yield force makes part of the extra
//! compression permanent; reaching the crush force breaks the object.

mod catalog;

pub use catalog::{
    eval_catalog, is_delicate, minimal_holding_force, sample_object_catalog, DELICATE_CRUSH_FORCE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("object catalog must contain at least one object")]
    EmptyCatalog,
    #[error("invalid object `{name}`: {reason}")]
    InvalidObject { name: String, reason: String },
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
}

/// Ground-truth physical description of a graspable object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    /// Uncompressed width between the finger pads, mm.
    pub rest_width: f64,
    /// kg
    pub mass: f64,
    pub friction_mu: f64,
    /// N/mm
    pub stiffness_k: f64,
    /// Contact force at which the object breaks, N.
    pub crush_force: f64,
    /// Contact force above which compression turns partly permanent, N.
    pub yield_force: f64,
    /// Fraction of over-yield compression made permanent, in [0, 1].
    pub plasticity: f64,
    /// Whether the object appears in the demonstration corpus.
    pub seen: bool,
}

impl ObjectSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |reason: &str| {
            Err(SimError::InvalidObject {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if !(self.rest_width > 0.0) {
            return fail("rest_width must be positive");
        }
        if !(0.001..=0.5).contains(&self.mass) {
            return fail("mass must lie in [0.001, 0.5] kg");
        }
        if !(self.friction_mu > 0.0 && self.friction_mu <= 1.5) {
            return fail("friction_mu must lie in (0, 1.5]");
        }
        if !(self.stiffness_k > 0.0) {
            return fail("stiffness_k must be positive");
        }
        if !(self.yield_force > 0.0 && self.yield_force <= self.crush_force) {
            return fail("need 0 < yield_force <= crush_force");
        }
        if !(0.0..=1.0).contains(&self.plasticity) {
            return fail("plasticity must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn fresh_state(&self) -> ObjectState {
        ObjectState {
            current_rest_width: self.rest_width,
            compression: 0.0,
            crushed: false,
            cumulative_plastic: 0.0,
            plastic_floor: None,
        }
    }
}

/// Evolving deformation of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub current_rest_width: f64,
    pub compression: f64,
    pub crushed: bool,
    pub cumulative_plastic: f64,
    /// Lowest aperture reached above yield during the current contact.
    /// Plastic flow only accrues for compression beyond this point; cleared
    /// when the fingers release the object.
    pub plastic_floor: Option<f64>,
}

impl ObjectState {
    /// Prepare for a new grasp of an object that keeps its deformation.
    pub fn released(&self) -> ObjectState {
        ObjectState {
            compression: 0.0,
            plastic_floor: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperCommand {
    /// mm
    pub target_aperture: f64,
    /// Torque-limit proxy, N.
    pub force_limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperObservation {
    /// mm
    pub aperture: f64,
    /// Realized force limit, N.
    pub applied_force: f64,
    /// Noisy current-draw proxy of the true contact force, N.
    pub contact_force: f64,
    /// s
    pub timestamp: f64,
}

/// Kinematic state of the gripper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub aperture: f64,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Control period, s.
    pub dt: f64,
    /// mm
    pub max_aperture: f64,
    /// mm/s
    pub closing_speed: f64,
    /// m/s²
    pub gravity: f64,
    /// N
    pub sensor_noise_std: f64,
    /// Force reading quantization, N. Zero disables rounding.
    pub sensor_quantum: f64,
    pub rng_seed: u64,
    /// Number of friction contacts supporting the object during a lift.
    pub friction_contacts: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.2,
            max_aperture: 85.0,
            closing_speed: 25.0,
            gravity: 9.81,
            sensor_noise_std: 0.05,
            sensor_quantum: 0.01,
            rng_seed: 0,
            friction_contacts: 2.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.closing_speed > 0.0) {
            return bad("closing_speed must be positive");
        }
        if !(self.max_aperture > 0.0) {
            return bad("max_aperture must be positive");
        }
        if !(self.sensor_noise_std >= 0.0) || !(self.sensor_quantum >= 0.0) {
            return bad("sensor noise and quantum must be non-negative");
        }
        if !(self.gravity > 0.0) || !(self.friction_contacts > 0.0) {
            return bad("gravity and friction_contacts must be positive");
        }
        Ok(())
    }

    /// Same physics, noise-free force channel.
    pub fn noiseless(&self) -> SimConfig {
        SimConfig {
            sensor_noise_std: 0.0,
            sensor_quantum: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: ObjectState,
    pub gripper: Gripper,
    pub observation: GripperObservation,
    /// Noise-free contact force after the step.
    pub true_force: f64,
    /// The command was outside the actuator's range and got clamped.
    pub command_clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiftResult {
    Held,
    Slipped,
}

pub fn true_contact_force(spec: &ObjectSpec, state: &ObjectState, aperture: f64) -> f64 {
    if aperture >= state.current_rest_width {
        0.0
    } else {
        spec.stiffness_k * (state.current_rest_width - aperture)
    }
}

/// Turn a true contact force into a sensor reading.
pub fn sense_force(true_force: f64, cfg: &SimConfig, rng: &mut Rng) -> f64 {
    let mut reading = true_force;
    if cfg.sensor_noise_std > 0.0 {
        reading += cfg.sensor_noise_std * rng::gaussian(rng);
    }
    reading = reading.max(0.0);
    if cfg.sensor_quantum > 0.0 {
        reading = (reading / cfg.sensor_quantum).round() * cfg.sensor_quantum;
    }
    reading
}

/// Observation before any motion: the gripper sits at its start aperture
/// with the given force limit.
pub fn initial_observation(
    spec: &ObjectSpec,
    state: &ObjectState,
    gripper: &Gripper,
    applied_force: f64,
    cfg: &SimConfig,
    rng: &mut Rng,
) -> GripperObservation {
    let force = true_contact_force(spec, state, gripper.aperture);
    GripperObservation {
        aperture: gripper.aperture,
        applied_force,
        contact_force: sense_force(force, cfg, rng),
        timestamp: gripper.time,
    }
}

/// Advance the simulation by one control period.
pub fn step(
    spec: &ObjectSpec,
    state: &ObjectState,
    gripper: &Gripper,
    command: &GripperCommand,
    cfg: &SimConfig,
    rng: &mut Rng,
) -> StepOutcome {
    let mut clamped = false;
    let mut target = command.target_aperture;
    if target.is_nan() {
        target = gripper.aperture;
        clamped = true;
    } else if !(0.0..=cfg.max_aperture).contains(&target) {
        target = target.clamp(0.0, cfg.max_aperture);
        clamped = true;
    }
    let mut force_limit = command.force_limit;
    if !(force_limit >= 0.0) {
        force_limit = 0.0;
        clamped = true;
    }

    let max_move = cfg.closing_speed * cfg.dt;
    let mut aperture = gripper.aperture + (target - gripper.aperture).clamp(-max_move, max_move);

    let width = state.current_rest_width;
    let k = spec.stiffness_k;
    if k * (width - aperture) > force_limit {
        // Stall (or back-drive) where the spring balances the torque limit.
        aperture = (width - force_limit / k).max(0.0);
    }
    aperture = aperture.clamp(0.0, cfg.max_aperture);

    let mut next = state.clone();
    let realized = true_contact_force(spec, state, aperture);
    if realized >= spec.crush_force {
        next.crushed = true;
    }
    if realized > spec.yield_force {
        let yield_aperture = width - spec.yield_force / k;
        let floor = state.plastic_floor.unwrap_or(f64::INFINITY);
        let incurred = (yield_aperture.min(floor) - aperture).max(0.0);
        let flow = spec.plasticity * incurred;
        next.current_rest_width = width - flow;
        next.cumulative_plastic += flow;
        next.plastic_floor = Some(floor.min(aperture));
    }
    if aperture >= next.current_rest_width {
        next.plastic_floor = None;
    }
    next.compression = (next.current_rest_width - aperture).max(0.0);

    let true_force = true_contact_force(spec, &next, aperture);
    let gripper = Gripper {
        aperture,
        time: gripper.time + cfg.dt,
    };
    let observation = GripperObservation {
        aperture,
        applied_force: force_limit,
        contact_force: sense_force(true_force, cfg, rng),
        timestamp: gripper.time,
    };
    StepOutcome {
        state: next,
        gripper,
        observation,
        true_force,
        command_clamped: clamped,
    }
}

/// Quasi-static lift check: friction on every contact must carry the weight.
pub fn lift_test(spec: &ObjectSpec, contact_force: f64, cfg: &SimConfig) -> LiftResult {
    let friction = cfg.friction_contacts * spec.friction_mu * contact_force;
    if contact_force > 0.0 && friction >= spec.mass * cfg.gravity {
        LiftResult::Held
    } else {
        LiftResult::Slipped
    }
}

/// Anything that turns observations into gripper commands, one tick at a time.
pub trait Controller {
    /// Force limit in effect before the first command.
    fn initial_force(&self) -> f64;
    fn command(&mut self, obs: &GripperObservation) -> GripperCommand;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rest_width: f64, k: f64) -> ObjectSpec {
        ObjectSpec {
            name: "probe".into(),
            rest_width,
            mass: 0.1,
            friction_mu: 0.5,
            stiffness_k: k,
            crush_force: 100.0,
            yield_force: 100.0,
            plasticity: 0.0,
            seen: true,
        }
    }

    #[test]
    fn spring_contact_force() {
        let s = spec(40.0, 0.1);
        let st = s.fresh_state();
        assert!((true_contact_force(&s, &st, 35.0) - 0.5).abs() < 1e-12);
        assert_eq!(true_contact_force(&s, &st, 45.0), 0.0);
        let s = spec(40.0, 0.5);
        assert!((true_contact_force(&s, &st, 36.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn free_motion_is_speed_limited() {
        let s = spec(20.0, 0.5);
        let cfg = SimConfig {
            dt: 0.25,
            closing_speed: 20.0,
            ..SimConfig::default()
        };
        let mut rng = rng::stream(0, rng::Purpose::Sensor, &[]);
        let out = step(
            &s,
            &s.fresh_state(),
            &Gripper {
                aperture: 50.0,
                time: 0.0,
            },
            &GripperCommand {
                target_aperture: 30.0,
                force_limit: 2.0,
            },
            &cfg,
            &mut rng,
        );
        assert!((out.gripper.aperture - 45.0).abs() < 1e-12);
        assert!((out.gripper.time - 0.25).abs() < 1e-12);
        assert!(!out.command_clamped);
    }

    #[test]
    fn settles_at_force_equilibrium() {
        let s = spec(40.0, 0.5);
        let cfg = SimConfig::default().noiseless();
        let mut rng = rng::stream(0, rng::Purpose::Sensor, &[]);
        let mut state = s.fresh_state();
        let mut gripper = Gripper {
            aperture: 50.0,
            time: 0.0,
        };
        let cmd = GripperCommand {
            target_aperture: 0.0,
            force_limit: 2.0,
        };
        for _ in 0..20 {
            let out = step(&s, &state, &gripper, &cmd, &cfg, &mut rng);
            state = out.state;
            gripper = out.gripper;
        }
        assert!((gripper.aperture - 36.0).abs() < 1e-12);
        assert!((true_contact_force(&s, &state, gripper.aperture) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_over_yield_squeeze_flows_plastically() {
        let k = 0.5;
        let s = ObjectSpec {
            yield_force: 1.0,
            crush_force: 3.0,
            plasticity: 0.5,
            ..spec(40.0, k)
        };
        let cfg = SimConfig {
            closing_speed: 1000.0,
            ..SimConfig::default().noiseless()
        };
        let mut rng = rng::stream(0, rng::Purpose::Sensor, &[]);
        let out = step(
            &s,
            &s.fresh_state(),
            &Gripper {
                aperture: 45.0,
                time: 0.0,
            },
            &GripperCommand {
                target_aperture: 0.0,
                force_limit: 2.0,
            },
            &cfg,
            &mut rng,
        );
        // Independent recomputation: squeeze to 2 N means 4 mm of compression,
        // 2 mm of it past the 1 N yield point, half of which is permanent.
        let expected_width = 40.0 - 0.5 * (2.0 - 1.0) / k;
        assert!((out.state.current_rest_width - expected_width).abs() < 1e-12);
        assert!((out.state.cumulative_plastic - 1.0).abs() < 1e-12);
        assert!(!out.state.crushed);
        assert_eq!(out.gripper.aperture, 36.0);
    }

    #[test]
    fn crush_sets_flag() {
        let s = ObjectSpec {
            crush_force: 1.5,
            yield_force: 1.5,
            ..spec(30.0, 1.0)
        };
        let cfg = SimConfig::default().noiseless();
        let mut rng = rng::stream(0, rng::Purpose::Sensor, &[]);
        let out = step(
            &s,
            &s.fresh_state(),
            &Gripper {
                aperture: 30.0,
                time: 0.0,
            },
            &GripperCommand {
                target_aperture: 0.0,
                force_limit: 2.0,
            },
            &cfg,
            &mut rng,
        );
        assert!(out.state.crushed);
    }

    #[test]
    fn out_of_range_target_is_clamped_and_flagged() {
        let s = spec(20.0, 0.5);
        let cfg = SimConfig::default();
        let mut rng = rng::stream(0, rng::Purpose::Sensor, &[]);
        let out = step(
            &s,
            &s.fresh_state(),
            &Gripper {
                aperture: 84.0,
                time: 0.0,
            },
            &GripperCommand {
                target_aperture: 120.0,
                force_limit: 1.0,
            },
            &cfg,
            &mut rng,
        );
        assert!(out.command_clamped);
        assert_eq!(out.gripper.aperture, 85.0);
    }

    #[test]
    fn lift_friction_inequality() {
        let cfg = SimConfig::default();
        let light = ObjectSpec {
            mass: 0.1,
            friction_mu: 0.5,
            ..spec(30.0, 1.0)
        };
        assert_eq!(lift_test(&light, 2.0, &cfg), LiftResult::Held);
        let heavy = ObjectSpec {
            mass: 0.5,
            friction_mu: 0.4,
            ..spec(30.0, 1.0)
        };
        assert_eq!(lift_test(&heavy, 3.0, &cfg), LiftResult::Slipped);
        assert_eq!(lift_test(&light, 0.0, &cfg), LiftResult::Slipped);
    }

    #[test]
    fn noiseless_sensor_is_exact() {
        let cfg = SimConfig::default().noiseless();
        let mut rng = rng::stream(0, rng::Purpose::Sensor, &[]);
        for f in [0.0, 0.123456789, 2.5, 7.0] {
            assert_eq!(sense_force(f, &cfg, &mut rng), f);
        }
    }

    #[test]
    fn spec_validation_names_the_rule() {
        let mut s = spec(30.0, 1.0);
        s.mass = 0.7;
        let err = s.validate().unwrap_err();
        assert!(err.to_string().contains("mass"));
        s.mass = 0.1;
        s.yield_force = 200.0;
        assert!(s
            .validate()
            .unwrap_err()
            .to_string()
            .contains("yield_force"));
    }
}

//! Adaptive grasp expert and demonstration generation.
//!
//! The expert closes at a fixed aperture step under a low force limit until
//! the sensed contact force crosses a threshold, then raises the force
//! limit in proportion to the remaining error against a slip-safe target
//! force. Object mass, friction and stiffness come from noisy estimates.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{embed_instruction, Episode, EpisodeMetadata, Step, Subtask};
use crate::rng::{self, Purpose, Rng};
use crate::sim::{
    self, lift_test, minimal_holding_force, true_contact_force, Controller, Gripper,
    GripperCommand, GripperObservation, LiftResult, ObjectSpec, ObjectState, SimConfig,
};

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("per-object attempt range {0}..={1} is empty")]
    BadRange(usize, usize),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
}

/// Estimated object parameters handed to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub est_mass: f64,
    pub est_mu: f64,
    pub est_k: f64,
    pub slip_margin: f64,
}

impl ExpertParams {
    pub fn exact(spec: &ObjectSpec) -> ExpertParams {
        ExpertParams {
            est_mass: spec.mass,
            est_mu: spec.friction_mu,
            est_k: spec.stiffness_k,
            slip_margin: 1.2,
        }
    }

    /// Multiply each true parameter by an independent log-normal factor.
    pub fn estimate(spec: &ObjectSpec, noise_std: f64, rng: &mut Rng) -> ExpertParams {
        let mut perturb = |x: f64| x * (noise_std * rng::gaussian(rng)).exp();
        ExpertParams {
            est_mass: perturb(spec.mass),
            est_mu: perturb(spec.friction_mu),
            est_k: perturb(spec.stiffness_k),
            slip_margin: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerGains {
    /// Sensed force that declares contact, N.
    pub contact_threshold: f64,
    /// Closing increment per tick, mm.
    pub aperture_step: f64,
    pub kp_force: f64,
    /// Smallest force-limit increment the actuator can make, N.
    pub force_quantum: f64,
    pub initial_force: f64,
    pub min_force: f64,
    pub max_force: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        ControllerGains {
            // below the 0.15 N approach force limit, so a stalled finger reads as contact
            contact_threshold: 2.5 * SimConfig::default().sensor_noise_std,
            aperture_step: 4.0,
            kp_force: 0.7,
            force_quantum: 0.05,
            initial_force: 0.15,
            min_force: 0.15,
            max_force: 10.0,
        }
    }
}

pub fn target_force(params: &ExpertParams, gains: &ControllerGains, gravity: f64) -> f64 {
    let raw = params.slip_margin * params.est_mass * gravity / (2.0 * params.est_mu);
    raw.clamp(gains.min_force, gains.max_force)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    Squeeze,
    Done,
    /// Closed fully without ever sensing contact.
    Missed,
}

#[derive(Debug, Clone)]
pub struct ExpertController {
    gains: ControllerGains,
    target: f64,
    force_limit: f64,
    hold_aperture: f64,
    phase: Phase,
    contact_ticks: usize,
}

impl ExpertController {
    pub fn new(params: &ExpertParams, gains: &ControllerGains, gravity: f64) -> ExpertController {
        ExpertController {
            target: target_force(params, gains, gravity),
            force_limit: gains.initial_force,
            hold_aperture: 0.0,
            phase: Phase::Approach,
            contact_ticks: 0,
            gains: gains.clone(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn force_limit(&self) -> f64 {
        self.force_limit
    }

    /// Ticks spent since contact was first sensed.
    pub fn contact_ticks(&self) -> usize {
        self.contact_ticks
    }

    fn hold(&mut self, aperture: f64, phase: Phase) -> GripperCommand {
        self.phase = phase;
        self.hold_aperture = aperture;
        GripperCommand {
            target_aperture: aperture,
            force_limit: self.force_limit,
        }
    }
}

impl Controller for ExpertController {
    fn initial_force(&self) -> f64 {
        self.gains.initial_force
    }

    fn command(&mut self, obs: &GripperObservation) -> GripperCommand {
        let g = &self.gains;
        match self.phase {
            Phase::Done | Phase::Missed => {
                return GripperCommand {
                    target_aperture: self.hold_aperture,
                    force_limit: self.force_limit,
                }
            }
            Phase::Approach => {
                if obs.contact_force < g.contact_threshold {
                    if obs.aperture <= 0.0 {
                        return self.hold(0.0, Phase::Missed);
                    }
                    return GripperCommand {
                        target_aperture: (obs.aperture - g.aperture_step).max(0.0),
                        force_limit: self.force_limit,
                    };
                }
                self.phase = Phase::Squeeze;
            }
            Phase::Squeeze => {}
        }
        self.contact_ticks += 1;
        if obs.contact_force >= self.target {
            return self.hold(obs.aperture, Phase::Done);
        }
        let increment = (g.kp_force * (self.target - obs.contact_force)).max(g.force_quantum);
        self.force_limit = (self.force_limit + increment).min(g.max_force);
        GripperCommand {
            target_aperture: (obs.aperture - g.aperture_step).max(0.0),
            force_limit: self.force_limit,
        }
    }
}

/// Start aperture a few millimetres outside the object.
pub fn sample_start_aperture(spec: &ObjectSpec, cfg: &SimConfig, rng: &mut Rng) -> f64 {
    (spec.rest_width + 3.0 + 9.0 * rng.random::<f64>()).min(cfg.max_aperture)
}

/// One tick of a closed-loop grasp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub observation: GripperObservation,
    pub command: GripperCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertGrasp {
    pub ticks: Vec<Tick>,
    pub phase: Phase,
    pub final_observation: GripperObservation,
    pub final_state: ObjectState,
    pub final_true_force: f64,
    pub target_force: f64,
    pub lift: LiftResult,
}

impl ExpertGrasp {
    pub fn succeeded(&self) -> bool {
        self.phase == Phase::Done && self.lift == LiftResult::Held && !self.final_state.crushed
    }
}

/// Run the expert until it holds (or gives up), capped at `max_ticks`.
pub fn run_expert_grasp(
    spec: &ObjectSpec,
    params: &ExpertParams,
    gains: &ControllerGains,
    cfg: &SimConfig,
    start_aperture: f64,
    max_ticks: usize,
    sensor_rng: &mut Rng,
) -> ExpertGrasp {
    let mut controller = ExpertController::new(params, gains, cfg.gravity);
    let mut state = spec.fresh_state();
    let mut gripper = Gripper {
        aperture: start_aperture,
        time: 0.0,
    };
    let mut obs =
        sim::initial_observation(spec, &state, &gripper, gains.initial_force, cfg, sensor_rng);
    let mut ticks = Vec::new();
    for _ in 0..max_ticks {
        let command = controller.command(&obs);
        ticks.push(Tick {
            observation: obs,
            command,
        });
        if matches!(controller.phase(), Phase::Done | Phase::Missed) {
            break;
        }
        let out = sim::step(spec, &state, &gripper, &command, cfg, sensor_rng);
        state = out.state;
        gripper = out.gripper;
        obs = out.observation;
    }
    let final_true_force = true_contact_force(spec, &state, gripper.aperture);
    ExpertGrasp {
        ticks,
        phase: controller.phase(),
        final_observation: obs,
        final_true_force,
        target_force: controller.target(),
        lift: lift_test(spec, final_true_force, cfg),
        final_state: state,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub gains: ControllerGains,
    /// Log-normal std of the parameter estimates.
    pub estimate_noise_std: f64,
    pub min_attempts: usize,
    pub max_attempts: usize,
    /// Safety cap on ticks for one expert grasp.
    pub max_ticks: usize,
    /// Constant-pose steps emitted before and after the grasp block.
    pub stub_steps: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            seed: 0,
            sim: SimConfig::default(),
            gains: ControllerGains::default(),
            estimate_noise_std: 0.2,
            min_attempts: 5,
            max_attempts: 7,
            max_ticks: 40,
            stub_steps: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectTally {
    pub name: String,
    pub seen: bool,
    pub attempts: usize,
    pub kept: usize,
    pub crushed: usize,
    pub slipped: usize,
    pub missed: usize,
    pub skipped_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceBand {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub seed: u64,
    pub catalog_size: usize,
    pub episodes: usize,
    pub skipped_objects: usize,
    pub config: GenerationConfig,
    pub objects: Vec<ObjectTally>,
    /// Final applied force over kept episodes.
    pub final_applied_force: Option<ForceBand>,
    /// Median number of grasp-phase steps over kept episodes.
    pub median_grasp_steps: Option<f64>,
}

impl GenerationManifest {
    pub fn skipped_fraction(&self) -> f64 {
        self.skipped_objects as f64 / self.catalog_size.max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct Demonstrations {
    pub episodes: Vec<Episode>,
    pub manifest: GenerationManifest,
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

pub fn instruction_for(name: &str) -> String {
    format!("grasp the {name}")
}

fn grasp_episode(
    spec: &ObjectSpec,
    object_index: usize,
    attempt: usize,
    grasp: &ExpertGrasp,
    stubs: usize,
) -> Episode {
    let text = instruction_for(&spec.name);
    let embedding: Vec<f32> = embed_instruction(&text)
        .expect("object names are non-empty")
        .into_iter()
        .map(|x| x as f32)
        .collect();
    let first = &grasp.ticks[0];
    let last = grasp.ticks.last().expect("grasp has ticks");
    let mut steps = Vec::with_capacity(grasp.ticks.len() + 2 * stubs);
    for _ in 0..stubs {
        steps.push(Step::new(
            first.observation.aperture,
            first.observation.applied_force,
            0.0,
            first.observation.aperture,
            first.observation.applied_force,
            &text,
            &embedding,
            Subtask::Approach,
        ));
    }
    for tick in &grasp.ticks {
        let o = &tick.observation;
        steps.push(Step::new(
            o.aperture,
            o.applied_force,
            o.contact_force,
            tick.command.target_aperture,
            tick.command.force_limit,
            &text,
            &embedding,
            Subtask::Grasp,
        ));
    }
    for _ in 0..stubs {
        let o = &last.observation;
        steps.push(Step::new(
            o.aperture,
            o.applied_force,
            o.contact_force,
            last.command.target_aperture,
            last.command.force_limit,
            &text,
            &embedding,
            Subtask::Home,
        ));
    }
    let mut ep = Episode {
        metadata: EpisodeMetadata {
            file_path: format!(
                "sim/{:02}_{}/attempt_{:02}",
                object_index,
                slug(&spec.name),
                attempt
            ),
        },
        object_name: spec.name.clone(),
        seen: spec.seen,
        steps,
    };
    ep.stamp_boundaries();
    ep
}

/// Run the expert on every catalog object and keep the successful grasps.
pub fn generate_demonstrations(
    catalog: &[ObjectSpec],
    cfg: &GenerationConfig,
) -> Result<Demonstrations, ExpertError> {
    if catalog.is_empty() {
        return Err(ExpertError::EmptyCatalog);
    }
    if cfg.min_attempts == 0 || cfg.min_attempts > cfg.max_attempts {
        return Err(ExpertError::BadRange(cfg.min_attempts, cfg.max_attempts));
    }
    cfg.sim.validate()?;
    for spec in catalog {
        spec.validate()?;
    }

    let per_object: Vec<(ObjectTally, Vec<(Episode, f64)>)> = catalog
        .par_iter()
        .enumerate()
        .map(|(oi, spec)| {
            let mut tally = ObjectTally {
                name: spec.name.clone(),
                seen: spec.seen,
                ..ObjectTally::default()
            };
            let hold = minimal_holding_force(
                spec.mass,
                spec.friction_mu,
                cfg.sim.gravity,
                cfg.sim.friction_contacts,
            );
            if spec.crush_force < hold {
                log::warn!(
                    "skipping {}: crush force {:.3} N below holding force {:.3} N",
                    spec.name,
                    spec.crush_force,
                    hold
                );
                tally.skipped_reason = Some(format!(
                    "infeasible: crush force {:.3} N < minimal holding force {:.3} N",
                    spec.crush_force, hold
                ));
                return (tally, Vec::new());
            }
            let mut count_rng = rng::stream(cfg.seed, Purpose::Demonstration, &[oi as u64]);
            tally.attempts = count_rng.random_range(cfg.min_attempts..=cfg.max_attempts);
            let mut kept = Vec::new();
            for attempt in 0..tally.attempts {
                let ids = [oi as u64, attempt as u64];
                let mut setup = rng::stream(
                    cfg.seed,
                    Purpose::Demonstration,
                    &[oi as u64, attempt as u64, 1],
                );
                let mut sensor = rng::stream(cfg.seed, Purpose::Sensor, &ids);
                let params = ExpertParams::estimate(spec, cfg.estimate_noise_std, &mut setup);
                let start = sample_start_aperture(spec, &cfg.sim, &mut setup);
                let grasp = run_expert_grasp(
                    spec,
                    &params,
                    &cfg.gains,
                    &cfg.sim,
                    start,
                    cfg.max_ticks,
                    &mut sensor,
                );
                if grasp.final_state.crushed {
                    tally.crushed += 1;
                } else if grasp.phase != Phase::Done {
                    tally.missed += 1;
                } else if grasp.lift == LiftResult::Slipped {
                    tally.slipped += 1;
                }
                if grasp.succeeded() {
                    tally.kept += 1;
                    let force = grasp
                        .ticks
                        .last()
                        .map(|t| t.command.force_limit)
                        .unwrap_or(0.0);
                    kept.push((
                        grasp_episode(spec, oi, attempt, &grasp, cfg.stub_steps),
                        force,
                    ));
                } else {
                    log::debug!("discarding failed demonstration {} #{attempt}", spec.name);
                }
            }
            (tally, kept)
        })
        .collect();

    let mut episodes = Vec::new();
    let mut forces = Vec::new();
    let mut lengths = Vec::new();
    let mut objects = Vec::new();
    for (tally, kept) in per_object {
        for (ep, force) in kept {
            lengths.push(
                ep.steps
                    .iter()
                    .filter(|s| s.subtask == Subtask::Grasp)
                    .count() as f64,
            );
            forces.push(force);
            episodes.push(ep);
        }
        objects.push(tally);
    }
    let skipped_objects = objects
        .iter()
        .filter(|t| t.skipped_reason.is_some())
        .count();
    let manifest = GenerationManifest {
        seed: cfg.seed,
        catalog_size: catalog.len(),
        episodes: episodes.len(),
        skipped_objects,
        config: cfg.clone(),
        objects,
        final_applied_force: band(&forces),
        median_grasp_steps: median(&lengths),
    };
    Ok(Demonstrations { episodes, manifest })
}

pub(crate) fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn band(values: &[f64]) -> Option<ForceBand> {
    Some(ForceBand {
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        median: median(values)?,
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(aperture: f64, applied: f64, contact: f64) -> GripperObservation {
        GripperObservation {
            aperture,
            applied_force: applied,
            contact_force: contact,
            timestamp: 0.0,
        }
    }

    fn params(m: f64, mu: f64) -> ExpertParams {
        ExpertParams {
            est_mass: m,
            est_mu: mu,
            est_k: 0.3,
            slip_margin: 1.2,
        }
    }

    #[test]
    fn target_force_formula() {
        let g = ControllerGains::default();
        assert!((target_force(&params(0.1, 0.5), &g, 9.81) - 1.1772).abs() < 1e-9);
        assert_eq!(target_force(&params(0.001, 0.5), &g, 9.81), 0.15);
        assert!((target_force(&params(0.5, 0.5), &g, 9.81) - 5.886).abs() < 1e-9);
    }

    #[test]
    fn pre_contact_closes_at_initial_force() {
        let gains = ControllerGains {
            aperture_step: 2.0,
            ..ControllerGains::default()
        };
        let mut c = ExpertController::new(&params(0.1, 0.5), &gains, 9.81);
        let cmd = c.command(&obs(50.0, 0.15, 0.0));
        assert_eq!(
            cmd,
            GripperCommand {
                target_aperture: 48.0,
                force_limit: 0.15
            }
        );
        assert_eq!(c.phase(), Phase::Approach);
    }

    #[test]
    fn post_contact_proportional_update() {
        let gains = ControllerGains {
            kp_force: 0.5,
            aperture_step: 2.0,
            ..ControllerGains::default()
        };
        let mut c = ExpertController::new(&params(0.1, 0.5), &gains, 9.81);
        let cmd = c.command(&obs(40.0, 0.15, 0.5));
        let expected = 0.15 + 0.5 * (1.1772 - 0.5);
        assert!((cmd.force_limit - expected).abs() < 1e-9);
        assert!((cmd.force_limit - 0.489).abs() < 1e-3);
        assert_eq!(cmd.target_aperture, 38.0);
        assert_eq!(c.phase(), Phase::Squeeze);
    }

    #[test]
    fn holds_once_target_sensed() {
        let mut c = ExpertController::new(&params(0.1, 0.5), &ControllerGains::default(), 9.81);
        c.command(&obs(40.0, 0.15, 0.5));
        let limit = c.force_limit();
        let cmd = c.command(&obs(39.0, limit, 1.3));
        assert_eq!(c.phase(), Phase::Done);
        assert_eq!(
            cmd,
            GripperCommand {
                target_aperture: 39.0,
                force_limit: limit
            }
        );
        assert_eq!(c.command(&obs(38.0, limit, 1.3)), cmd);
    }

    #[test]
    fn missed_object_reported() {
        let mut c = ExpertController::new(&params(0.1, 0.5), &ControllerGains::default(), 9.81);
        c.command(&obs(0.0, 0.15, 0.0));
        assert_eq!(c.phase(), Phase::Missed);
    }

    #[test]
    fn noise_free_rollout_holds_within_ten_contact_ticks() {
        let spec = ObjectSpec {
            name: "probe".into(),
            rest_width: 40.0,
            mass: 0.1,
            friction_mu: 0.5,
            stiffness_k: 0.3,
            crush_force: 5.0,
            yield_force: 5.0,
            plasticity: 0.0,
            seen: true,
        };
        let cfg = SimConfig::default().noiseless();
        let gains = ControllerGains::default();
        let mut rng = rng::stream(1, Purpose::Sensor, &[]);
        let grasp = run_expert_grasp(
            &spec,
            &ExpertParams::exact(&spec),
            &gains,
            &cfg,
            48.0,
            60,
            &mut rng,
        );
        assert_eq!(grasp.phase, Phase::Done);
        let first_contact = grasp
            .ticks
            .iter()
            .position(|t| t.observation.contact_force >= gains.contact_threshold)
            .unwrap();
        assert!(
            grasp.ticks.len() - first_contact <= 10,
            "{} ticks after contact",
            grasp.ticks.len() - first_contact
        );
        assert_eq!(grasp.lift, LiftResult::Held);
        let t = grasp.target_force;
        assert!(grasp.final_true_force >= t && grasp.final_true_force <= t + gains.kp_force * t);
    }
}

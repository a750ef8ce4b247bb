//! Rollout harness: fixed-length grasps on a catalog, outcome taxonomy,
//! aggregate rates, paired compression comparison and repeated-trial
//! degradation.

mod report;

pub use report::{
    compression_comparison, wilson_interval, CompressionComparison, EvalReport, MushinessDelta,
    ObjectCompression, ObjectSummary, Rate, RateTable, ReferenceNumbers, TrialRecord,
};

use std::fmt;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::{instruction_for, ControllerGains, ExpertController, ExpertParams};
use crate::policy::{instruction_embedding, Policy, PolicyError, PolicyRunner, Variant};
use crate::rng::{stream, Purpose};
use crate::sim::{
    self, lift_test, true_contact_force, Controller, Gripper, LiftResult, ObjectSpec, ObjectState,
    SimConfig, SimError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("refusing to evaluate: {0}")]
    Mismatch(String),
    #[error("reports are not paired: {0}")]
    Unpaired(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub trials_per_object: usize,
    pub ticks: usize,
    /// Simulator settings; `dt` is the control period.
    pub sim: SimConfig,
    /// Gap to the object, mm, at or beyond which a grasp counts as null.
    pub null_gap: f64,
    /// Plastic loss, as a fraction of the starting rest width, that counts
    /// as a deformation failure.
    pub deformation_fraction: f64,
    /// Repeated trials on one persistent object.
    pub mushiness_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            trials_per_object: 10,
            ticks: 15,
            sim: SimConfig {
                dt: 0.25,
                ..SimConfig::default()
            },
            null_gap: 2.0,
            deformation_fraction: 0.1,
            mushiness_trials: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        self.sim.validate()?;
        if self.trials_per_object == 0 || self.ticks == 0 || self.mushiness_trials == 0 {
            return Err(EvalError::Config(
                "trial, tick and mushiness counts must be positive".into(),
            ));
        }
        if !(self.null_gap > 0.0) || !(self.deformation_fraction > 0.0) {
            return Err(EvalError::Config(
                "null_gap and deformation_fraction must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Simulated duration of one grasp, s.
    pub fn grasp_seconds(&self) -> f64 {
        self.ticks as f64 * self.sim.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeLabel {
    Success,
    DeformationFailure,
    SlipFailure,
    NullGrasp,
}

impl OutcomeLabel {
    pub const ALL: [OutcomeLabel; 4] = [
        OutcomeLabel::Success,
        OutcomeLabel::DeformationFailure,
        OutcomeLabel::SlipFailure,
        OutcomeLabel::NullGrasp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeLabel::Success => "success",
            OutcomeLabel::DeformationFailure => "deformation_failure",
            OutcomeLabel::SlipFailure => "slip_failure",
            OutcomeLabel::NullGrasp => "null_grasp",
        }
    }

    pub fn is_failure(self) -> bool {
        matches!(
            self,
            OutcomeLabel::DeformationFailure | OutcomeLabel::SlipFailure
        )
    }
}

impl fmt::Display for OutcomeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspOutcome {
    pub label: OutcomeLabel,
    /// mm
    pub final_aperture: f64,
    /// N
    pub final_applied_force: f64,
    /// Noise-free contact force at the end, N.
    pub final_true_contact: f64,
    pub ticks_used: usize,
    pub skipped_ticks: usize,
    /// Rest width lost during this grasp, mm.
    pub plastic_incurred: f64,
}

/// Where a rollout ended.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutEnd {
    pub start_rest_width: f64,
    pub state: ObjectState,
    pub aperture: f64,
    pub applied_force: f64,
    pub ticks_used: usize,
    pub skipped_ticks: usize,
}

/// Label a finished rollout. Precedence: null grasp, deformation, slip,
/// success.
pub fn classify(
    spec: &ObjectSpec,
    end: &RolloutEnd,
    lift: LiftResult,
    cfg: &EvalConfig,
) -> GraspOutcome {
    let contact = true_contact_force(spec, &end.state, end.aperture);
    let plastic = (end.start_rest_width - end.state.current_rest_width).max(0.0);
    let label = if end.aperture - end.state.current_rest_width >= cfg.null_gap {
        OutcomeLabel::NullGrasp
    } else if end.state.crushed || plastic > cfg.deformation_fraction * end.start_rest_width {
        OutcomeLabel::DeformationFailure
    } else if lift == LiftResult::Slipped {
        OutcomeLabel::SlipFailure
    } else {
        OutcomeLabel::Success
    };
    GraspOutcome {
        label,
        final_aperture: end.aperture,
        final_applied_force: end.applied_force,
        final_true_contact: contact,
        ticks_used: end.ticks_used,
        skipped_ticks: end.skipped_ticks,
        plastic_incurred: plastic,
    }
}

/// One sample per tick, taken after the simulator step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub time: f64,
    pub aperture: f64,
    pub applied_force: f64,
    pub contact_force: f64,
    pub commanded_aperture: f64,
}

/// What is being evaluated.
#[derive(Debug, Clone, Copy)]
pub enum Agent<'a> {
    Policy(&'a Policy),
    /// The adaptive expert with exact object parameters.
    Expert(&'a ControllerGains),
}

impl Agent<'_> {
    pub fn name(&self) -> String {
        match self {
            Agent::Policy(p) => p.variant.to_string(),
            Agent::Expert(_) => "expert".to_string(),
        }
    }

    pub fn variant(&self) -> Option<Variant> {
        match self {
            Agent::Policy(p) => Some(p.variant),
            Agent::Expert(_) => None,
        }
    }
}

/// Refuse a policy whose variant or training corpus is not the one asked for.
pub fn check_policy(
    policy: &Policy,
    variant: Option<Variant>,
    dataset_fingerprint: Option<&str>,
) -> Result<(), EvalError> {
    if let Some(v) = variant {
        if v != policy.variant {
            return Err(EvalError::Mismatch(format!(
                "checkpoint holds a {} policy, {v} was requested",
                policy.variant
            )));
        }
    }
    if let (Some(want), Some(have)) = (dataset_fingerprint, policy.dataset_fingerprint.as_deref()) {
        if want != have {
            return Err(EvalError::Mismatch(format!(
                "policy was trained on dataset {have}, evaluation dataset is {want}"
            )));
        }
    }
    Ok(())
}

/// RNG stream ids of one trial; `phase` separates main trials from the
/// repeated-trial experiment.
fn trial_ids(object: usize, trial: usize, phase: u64) -> [u64; 3] {
    [object as u64, trial as u64, phase]
}

#[allow(clippy::large_enum_variant)]
enum Ctl<'a> {
    Policy(PolicyRunner<'a>),
    Expert(ExpertController),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub start_aperture: f64,
    pub outcome: GraspOutcome,
    pub trace: Vec<TraceSample>,
    pub final_state: ObjectState,
}

/// Run one fixed-length grasp from `state`. Every stream the object and
/// sensor see depends only on the seed and trial ids, so different agents
/// face identical conditions.
pub fn run_rollout(
    agent: Agent<'_>,
    spec: &ObjectSpec,
    state: ObjectState,
    cfg: &EvalConfig,
    ids: &[u64],
) -> Result<Rollout, EvalError> {
    let mut setup = stream(cfg.seed, Purpose::Trial, ids);
    let mut sensor = stream(cfg.seed, Purpose::Sensor, ids);
    let sampling = stream(cfg.seed, Purpose::Sampling, ids);
    let start_aperture =
        (state.current_rest_width + 3.0 + 9.0 * setup.random::<f64>()).min(cfg.sim.max_aperture);

    let mut ctl = match agent {
        Agent::Policy(p) => {
            let instruction = instruction_embedding(&instruction_for(&spec.name))?;
            Ctl::Policy(PolicyRunner::new(p, instruction, sampling)?)
        }
        Agent::Expert(gains) => Ctl::Expert(ExpertController::new(
            &ExpertParams::exact(spec),
            gains,
            cfg.sim.gravity,
        )),
    };
    let controller: &mut dyn Controller = match &mut ctl {
        Ctl::Policy(c) => c,
        Ctl::Expert(c) => c,
    };

    let start_rest_width = state.current_rest_width;
    let mut state = state;
    let mut gripper = Gripper {
        aperture: start_aperture,
        time: 0.0,
    };
    let mut obs = sim::initial_observation(
        spec,
        &state,
        &gripper,
        controller.initial_force(),
        &cfg.sim,
        &mut sensor,
    );
    let mut trace = Vec::with_capacity(cfg.ticks);
    for _ in 0..cfg.ticks {
        let command = controller.command(&obs);
        let out = sim::step(spec, &state, &gripper, &command, &cfg.sim, &mut sensor);
        state = out.state;
        gripper = out.gripper;
        obs = out.observation;
        trace.push(TraceSample {
            time: gripper.time,
            aperture: obs.aperture,
            applied_force: obs.applied_force,
            contact_force: obs.contact_force,
            commanded_aperture: command.target_aperture,
        });
    }
    let skipped_ticks = match &ctl {
        Ctl::Policy(c) => c.skipped_ticks(),
        Ctl::Expert(_) => 0,
    };
    let force = true_contact_force(spec, &state, gripper.aperture);
    let end = RolloutEnd {
        start_rest_width,
        state: state.clone(),
        aperture: gripper.aperture,
        applied_force: obs.applied_force,
        ticks_used: trace.len(),
        skipped_ticks,
    };
    let outcome = classify(spec, &end, lift_test(spec, force, &cfg.sim), cfg);
    Ok(Rollout {
        start_aperture,
        outcome,
        trace,
        final_state: state,
    })
}

/// Rest width after each of `trials` grasps on one object whose plastic
/// state persists between grasps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MushinessTrace {
    pub object: String,
    pub plasticity: f64,
    pub initial_rest_width: f64,
    pub rest_widths: Vec<f64>,
    pub labels: Vec<OutcomeLabel>,
}

impl MushinessTrace {
    pub fn total_degradation(&self) -> f64 {
        self.initial_rest_width
            - self
                .rest_widths
                .last()
                .copied()
                .unwrap_or(self.initial_rest_width)
    }
}

pub fn mushiness_trace(
    agent: Agent<'_>,
    spec: &ObjectSpec,
    object_index: usize,
    cfg: &EvalConfig,
) -> Result<MushinessTrace, EvalError> {
    let mut state = spec.fresh_state();
    let mut rest_widths = Vec::with_capacity(cfg.mushiness_trials);
    let mut labels = Vec::with_capacity(cfg.mushiness_trials);
    for trial in 0..cfg.mushiness_trials {
        let r = run_rollout(agent, spec, state, cfg, &trial_ids(object_index, trial, 1))?;
        state = r.final_state.released();
        rest_widths.push(state.current_rest_width);
        labels.push(r.outcome.label);
    }
    Ok(MushinessTrace {
        object: spec.name.clone(),
        plasticity: spec.plasticity,
        initial_rest_width: spec.rest_width,
        rest_widths,
        labels,
    })
}

/// Evaluate `agent` on every catalog object: fresh-object trials, then the
/// repeated-trial experiment on every object with plasticity.
pub fn run_trials(
    agent: Agent<'_>,
    catalog: &[ObjectSpec],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    if catalog.is_empty() {
        return Err(EvalError::Sim(SimError::EmptyCatalog));
    }
    for spec in catalog {
        spec.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..catalog.len())
        .flat_map(|o| (0..cfg.trials_per_object).map(move |t| (o, t)))
        .collect();
    let trials = jobs
        .par_iter()
        .map(|&(o, t)| {
            let spec = &catalog[o];
            let r = run_rollout(agent, spec, spec.fresh_state(), cfg, &trial_ids(o, t, 0))?;
            Ok(TrialRecord {
                object: spec.name.clone(),
                object_index: o,
                trial: t,
                seen: spec.seen,
                delicate: sim::is_delicate(spec),
                start_aperture: r.start_aperture,
                outcome: r.outcome,
                trace: r.trace,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let mushiness = catalog
        .par_iter()
        .enumerate()
        .filter(|(_, s)| s.plasticity > 0.0)
        .map(|(o, s)| mushiness_trace(agent, s, o, cfg))
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(EvalReport::build(agent, catalog, cfg, trials, mushiness))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::eval_catalog;

    fn spec() -> ObjectSpec {
        ObjectSpec {
            name: "test".into(),
            rest_width: 40.0,
            mass: 0.05,
            friction_mu: 0.5,
            stiffness_k: 0.3,
            crush_force: 5.0,
            yield_force: 3.0,
            plasticity: 0.5,
            seen: true,
        }
    }

    fn end(spec: &ObjectSpec, aperture: f64) -> RolloutEnd {
        RolloutEnd {
            start_rest_width: spec.rest_width,
            state: spec.fresh_state(),
            aperture,
            applied_force: 1.0,
            ticks_used: 15,
            skipped_ticks: 0,
        }
    }

    #[test]
    fn wide_open_is_null_grasp() {
        let s = spec();
        let o = classify(
            &s,
            &end(&s, 44.0),
            LiftResult::Slipped,
            &EvalConfig::default(),
        );
        assert_eq!(o.label, OutcomeLabel::NullGrasp);
        assert_eq!(o.final_true_contact, 0.0);
    }

    #[test]
    fn crushed_is_deformation_even_if_held() {
        let s = spec();
        let mut e = end(&s, 30.0);
        e.state.crushed = true;
        let o = classify(&s, &e, LiftResult::Held, &EvalConfig::default());
        assert_eq!(o.label, OutcomeLabel::DeformationFailure);
    }

    #[test]
    fn permanent_compression_over_ten_percent_is_deformation() {
        let s = spec();
        let mut e = end(&s, 30.0);
        e.state.current_rest_width = 35.9;
        let o = classify(&s, &e, LiftResult::Held, &EvalConfig::default());
        assert_eq!(o.label, OutcomeLabel::DeformationFailure);
        e.state.current_rest_width = 36.1;
        let o = classify(&s, &e, LiftResult::Held, &EvalConfig::default());
        assert_eq!(o.label, OutcomeLabel::Success);
    }

    #[test]
    fn held_light_object_is_success() {
        // 1.2 N on m 0.05, mu 0.5: 2 * 0.5 * 1.2 >= 0.05 * 9.81
        let s = spec();
        let cfg = EvalConfig::default();
        let lift = lift_test(&s, 1.2, &cfg.sim);
        assert_eq!(lift, LiftResult::Held);
        let o = classify(&s, &end(&s, 36.0), lift, &cfg);
        assert_eq!(o.label, OutcomeLabel::Success);
    }

    #[test]
    fn near_miss_without_contact_is_slip() {
        let s = spec();
        let o = classify(
            &s,
            &end(&s, 41.0),
            LiftResult::Slipped,
            &EvalConfig::default(),
        );
        assert_eq!(o.label, OutcomeLabel::SlipFailure);
    }

    #[test]
    fn rollouts_use_fifteen_ticks_of_quarter_seconds() {
        let cfg = EvalConfig::default();
        let gains = ControllerGains::default();
        let r = run_rollout(
            Agent::Expert(&gains),
            &spec(),
            spec().fresh_state(),
            &cfg,
            &[0, 0, 0],
        )
        .unwrap();
        assert_eq!(r.trace.len(), 15);
        assert_eq!(r.outcome.ticks_used, 15);
        assert!((r.trace[14].time - 3.75).abs() < 1e-12);
        assert!((cfg.grasp_seconds() - 3.75).abs() < 1e-12);
    }

    #[test]
    fn zero_plasticity_mushiness_is_flat() {
        let mut s = spec();
        s.plasticity = 0.0;
        let gains = ControllerGains::default();
        let t = mushiness_trace(Agent::Expert(&gains), &s, 0, &EvalConfig::default()).unwrap();
        assert_eq!(t.rest_widths.len(), 10);
        assert!(t.rest_widths.iter().all(|w| *w == 40.0));
    }

    #[test]
    fn expert_counts_sum_to_trials() {
        let gains = ControllerGains::default();
        let cfg = EvalConfig {
            trials_per_object: 3,
            ..EvalConfig::default()
        };
        let report = run_trials(Agent::Expert(&gains), &eval_catalog(), &cfg).unwrap();
        assert_eq!(report.trials.len(), 30);
        let total: usize = report.outcome_counts.values().sum();
        assert_eq!(total, 30);
        assert_eq!(report.outcome_counts.len(), 4);
    }
}

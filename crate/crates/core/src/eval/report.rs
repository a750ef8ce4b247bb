use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    Agent, EvalConfig, EvalError, GraspOutcome, MushinessTrace, OutcomeLabel, TraceSample,
};
use crate::policy::Variant;
use crate::sim::{self, ObjectSpec};

/// 95% Wilson score interval for `successes` out of `n`.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n = n as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Success rate over decided grasps; null grasps are counted but sit
/// outside the denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub successes: usize,
    pub failures: usize,
    pub nulls: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Rate {
    fn from_outcomes<'a>(outcomes: impl Iterator<Item = &'a GraspOutcome>) -> Rate {
        let (mut s, mut f, mut n) = (0, 0, 0);
        for o in outcomes {
            match o.label {
                OutcomeLabel::Success => s += 1,
                OutcomeLabel::NullGrasp => n += 1,
                _ => f += 1,
            }
        }
        let decided = s + f;
        let (ci_low, ci_high) = wilson_interval(s, decided);
        Rate {
            successes: s,
            failures: f,
            nulls: n,
            rate: if decided == 0 {
                0.0
            } else {
                s as f64 / decided as f64
            },
            ci_low,
            ci_high,
        }
    }

    pub fn trials(&self) -> usize {
        self.successes + self.failures + self.nulls
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub overall: Rate,
    pub seen: Rate,
    pub unseen: Rate,
    /// Objects with crush force under 3 N.
    pub delicate: Rate,
    pub robust: Rate,
}

/// Published real-robot figures for the same protocol, shown next to the
/// simulated ones for direction only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceNumbers {
    pub overall: f64,
    pub seen: f64,
    pub unseen: f64,
    pub null_rate: f64,
    /// Slip failures as a share of all failures.
    pub slip_share: f64,
    pub grasp_seconds: f64,
    /// Duration of a grasp by the adaptive controller alone.
    pub adaptive_grasp_seconds: f64,
}

impl ReferenceNumbers {
    pub fn for_variant(variant: Variant) -> ReferenceNumbers {
        match variant {
            Variant::Forceful => ReferenceNumbers {
                overall: 0.82,
                seen: 0.85,
                unseen: 0.80,
                null_rate: 0.115,
                slip_share: 0.28,
                grasp_seconds: 3.75,
                adaptive_grasp_seconds: 14.11,
            },
            Variant::PositionOnly => ReferenceNumbers {
                overall: 0.54,
                seen: 0.45,
                unseen: 0.60,
                null_rate: 0.20,
                slip_share: 0.061,
                grasp_seconds: 3.75,
                adaptive_grasp_seconds: 14.11,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub object: String,
    pub object_index: usize,
    pub trial: usize,
    pub seen: bool,
    pub delicate: bool,
    pub start_aperture: f64,
    pub outcome: GraspOutcome,
    pub trace: Vec<TraceSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub name: String,
    pub seen: bool,
    pub delicate: bool,
    pub rest_width: f64,
    pub crush_force: f64,
    pub plasticity: f64,
    pub trials: usize,
    pub counts: BTreeMap<OutcomeLabel, usize>,
    pub success_rate: f64,
    pub mean_final_aperture: f64,
    pub mean_final_applied_force: f64,
    pub mean_final_true_contact: f64,
    pub mean_plastic_incurred: f64,
}

fn label_counts<'a>(
    outcomes: impl Iterator<Item = &'a GraspOutcome>,
) -> BTreeMap<OutcomeLabel, usize> {
    let mut counts: BTreeMap<OutcomeLabel, usize> =
        OutcomeLabel::ALL.iter().map(|l| (*l, 0)).collect();
    for o in outcomes {
        *counts.entry(o.label).or_default() += 1;
    }
    counts
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agent: String,
    pub variant: Option<Variant>,
    pub seed: u64,
    pub config: EvalConfig,
    /// Simulated seconds per grasp.
    pub grasp_seconds: f64,
    pub rates: RateTable,
    pub outcome_counts: BTreeMap<OutcomeLabel, usize>,
    /// Null grasps over all trials.
    pub null_rate: f64,
    /// Each failure label as a share of all failures.
    pub failure_shares: BTreeMap<OutcomeLabel, f64>,
    pub skipped_ticks: usize,
    pub reference: Option<ReferenceNumbers>,
    pub objects: Vec<ObjectSummary>,
    pub mushiness: Vec<MushinessTrace>,
    pub trials: Vec<TrialRecord>,
}

impl EvalReport {
    pub(super) fn build(
        agent: Agent<'_>,
        catalog: &[ObjectSpec],
        cfg: &EvalConfig,
        mut trials: Vec<TrialRecord>,
        mushiness: Vec<MushinessTrace>,
    ) -> EvalReport {
        trials.sort_by_key(|t| (t.object_index, t.trial));
        let subset = |pred: &dyn Fn(&TrialRecord) -> bool| {
            Rate::from_outcomes(trials.iter().filter(|t| pred(t)).map(|t| &t.outcome))
        };
        let rates = RateTable {
            overall: subset(&|_| true),
            seen: subset(&|t| t.seen),
            unseen: subset(&|t| !t.seen),
            delicate: subset(&|t| t.delicate),
            robust: subset(&|t| !t.delicate),
        };
        let outcome_counts = label_counts(trials.iter().map(|t| &t.outcome));
        let failures: usize = outcome_counts
            .iter()
            .filter(|(l, _)| l.is_failure())
            .map(|(_, c)| c)
            .sum();
        let failure_shares = outcome_counts
            .iter()
            .filter(|(l, _)| l.is_failure())
            .map(|(l, c)| {
                let share = if failures == 0 {
                    0.0
                } else {
                    *c as f64 / failures as f64
                };
                (*l, share)
            })
            .collect();
        let objects = catalog
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mine: Vec<&GraspOutcome> = trials
                    .iter()
                    .filter(|t| t.object_index == i)
                    .map(|t| &t.outcome)
                    .collect();
                ObjectSummary {
                    name: spec.name.clone(),
                    seen: spec.seen,
                    delicate: sim::is_delicate(spec),
                    rest_width: spec.rest_width,
                    crush_force: spec.crush_force,
                    plasticity: spec.plasticity,
                    trials: mine.len(),
                    counts: label_counts(mine.iter().copied()),
                    success_rate: Rate::from_outcomes(mine.iter().copied()).rate,
                    mean_final_aperture: mean(mine.iter().map(|o| o.final_aperture)),
                    mean_final_applied_force: mean(mine.iter().map(|o| o.final_applied_force)),
                    mean_final_true_contact: mean(mine.iter().map(|o| o.final_true_contact)),
                    mean_plastic_incurred: mean(mine.iter().map(|o| o.plastic_incurred)),
                }
            })
            .collect();
        let n = trials.len().max(1) as f64;
        EvalReport {
            agent: agent.name(),
            variant: agent.variant(),
            seed: cfg.seed,
            config: cfg.clone(),
            grasp_seconds: cfg.grasp_seconds(),
            null_rate: outcome_counts[&OutcomeLabel::NullGrasp] as f64 / n,
            outcome_counts,
            failure_shares,
            skipped_ticks: trials.iter().map(|t| t.outcome.skipped_ticks).sum(),
            reference: agent.variant().map(ReferenceNumbers::for_variant),
            rates,
            objects,
            mushiness,
            trials,
        }
    }

    /// Success rate over every trial, null grasps included as non-successes.
    pub fn strict_success_rate(&self, pred: impl Fn(&TrialRecord) -> bool) -> f64 {
        let selected: Vec<_> = self.trials.iter().filter(|t| pred(t)).collect();
        let ok = selected
            .iter()
            .filter(|t| t.outcome.label == OutcomeLabel::Success)
            .count();
        ok as f64 / selected.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectCompression {
    pub name: String,
    pub seen: bool,
    pub delicate: bool,
    pub mean_aperture_reference: f64,
    pub mean_aperture_other: f64,
    /// other − reference, mm; negative means the other agent closed tighter.
    pub aperture_delta: f64,
    pub mean_force_reference: f64,
    pub mean_force_other: f64,
    pub force_delta: f64,
    pub traces_reference: Vec<Vec<TraceSample>>,
    pub traces_other: Vec<Vec<TraceSample>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MushinessDelta {
    pub object: String,
    pub degradation_reference: f64,
    pub degradation_other: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionComparison {
    pub reference: String,
    pub other: String,
    pub objects: Vec<ObjectCompression>,
    /// Share of delicate objects where the other agent closed at least as
    /// tightly on average.
    pub delicate_fraction_narrower: f64,
    pub mushiness: Vec<MushinessDelta>,
}

/// Per-object aperture and force differences between two reports run on
/// identical seeds (`other − reference`).
pub fn compression_comparison(
    reference: &EvalReport,
    other: &EvalReport,
) -> Result<CompressionComparison, EvalError> {
    let (a, b) = (reference, other);
    if a.seed != b.seed {
        return Err(EvalError::Unpaired(format!(
            "seeds {} and {}",
            a.seed, b.seed
        )));
    }
    if a.config != b.config {
        return Err(EvalError::Unpaired("evaluation configs differ".into()));
    }
    if a.objects.len() != b.objects.len() || a.trials.len() != b.trials.len() {
        return Err(EvalError::Unpaired(
            "different object or trial counts".into(),
        ));
    }
    for (x, y) in a.trials.iter().zip(&b.trials) {
        if x.object != y.object
            || x.trial != y.trial
            || x.start_aperture.to_bits() != y.start_aperture.to_bits()
        {
            return Err(EvalError::Unpaired(format!(
                "trial {} on {} does not line up with trial {} on {}",
                x.trial, x.object, y.trial, y.object
            )));
        }
    }
    let objects: Vec<ObjectCompression> = a
        .objects
        .iter()
        .zip(&b.objects)
        .enumerate()
        .map(|(i, (oa, ob))| {
            let traces = |r: &EvalReport| {
                r.trials
                    .iter()
                    .filter(|t| t.object_index == i)
                    .map(|t| t.trace.clone())
                    .collect::<Vec<_>>()
            };
            ObjectCompression {
                name: oa.name.clone(),
                seen: oa.seen,
                delicate: oa.delicate,
                mean_aperture_reference: oa.mean_final_aperture,
                mean_aperture_other: ob.mean_final_aperture,
                aperture_delta: ob.mean_final_aperture - oa.mean_final_aperture,
                mean_force_reference: oa.mean_final_applied_force,
                mean_force_other: ob.mean_final_applied_force,
                force_delta: ob.mean_final_applied_force - oa.mean_final_applied_force,
                traces_reference: traces(a),
                traces_other: traces(b),
            }
        })
        .collect();
    let delicate: Vec<_> = objects.iter().filter(|o| o.delicate).collect();
    let narrower = delicate.iter().filter(|o| o.aperture_delta <= 0.0).count();
    let mushiness = a
        .mushiness
        .iter()
        .filter_map(|ma| {
            let mb = b.mushiness.iter().find(|m| m.object == ma.object)?;
            Some(MushinessDelta {
                object: ma.object.clone(),
                degradation_reference: ma.total_degradation(),
                degradation_other: mb.total_degradation(),
            })
        })
        .collect();
    Ok(CompressionComparison {
        reference: a.agent.clone(),
        other: b.agent.clone(),
        delicate_fraction_narrower: if delicate.is_empty() {
            0.0
        } else {
            narrower as f64 / delicate.len() as f64
        },
        objects,
        mushiness,
    })
}

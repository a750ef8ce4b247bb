//! Episode records laid out like DROID-style RLDS steps, stored as JSON lines.
//!
//! Vector layouts (fixed by this crate, not by any upstream schema):
//!
//! * `observation.state` (16): cartesian_position(6), joint_position(6),
//!   gripper_position, applied_force, contact_force, reserved.
//! * `action` (9): cartesian deltas(6), gripper_position, gripper_force,
//!   reserved.

mod codec;
mod embed;
mod stats;

pub use codec::{
    read_episodes, read_episodes_from, write_episodes, write_episodes_to, Violation, SCHEMA_NAME,
    SCHEMA_VERSION,
};
pub use embed::{cosine, embed_instruction, EMBEDDING_DIM};
pub use stats::{compute_norm_stats, split, NormStats, STD_FLOOR};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_DIM: usize = 16;
pub const ACTION_DIM: usize = 9;

pub const STATE_GRIPPER_POSITION: usize = 12;
pub const STATE_APPLIED_FORCE: usize = 13;
pub const STATE_CONTACT_FORCE: usize = 14;
pub const ACTION_GRIPPER_POSITION: usize = 6;
pub const ACTION_GRIPPER_FORCE: usize = 7;

/// Fixed arm pose used for every step; the arm does not move during a grasp.
pub const HOME_CARTESIAN: [f64; 6] = [0.45, 0.0, 0.12, std::f64::consts::PI, 0.0, 0.0];
pub const HOME_JOINTS: [f64; 6] = [0.0, -1.571, 1.571, -1.571, -1.571, 0.0];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {violation}")]
    Invalid { line: usize, violation: Violation },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("instruction text is empty")]
    EmptyInstruction,
    #[error("split ratio {0} outside (0, 1]")]
    BadRatio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtask {
    Approach,
    Grasp,
    Home,
}

impl Subtask {
    fn rank(self) -> u8 {
        match self {
            Subtask::Approach => 0,
            Subtask::Grasp => 1,
            Subtask::Home => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionDict {
    pub cartesian_position: Vec<f64>,
    pub gripper_force: f64,
    pub gripper_position: f64,
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    pub state: Vec<f64>,
    pub applied_force: f64,
    pub cartesian_position: Vec<f64>,
    pub contact_force: f64,
    pub gripper_position: f64,
    pub joint_position: Vec<f64>,
    /// Opaque reference to an image file; empty when no image was captured.
    pub image_ref: String,
    pub wrist_image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub action: Vec<f64>,
    pub action_dict: ActionDict,
    pub discount: f32,
    pub is_first: bool,
    pub is_last: bool,
    pub is_terminal: bool,
    pub language_embedding: Vec<f32>,
    pub language_instruction: String,
    pub observation: Observation,
    pub reward: f32,
    pub subtask: Subtask,
}

impl Step {
    /// Build a step from the gripper quantities; pose fields stay at the
    /// fixed home pose and episode flags start cleared.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        aperture: f64,
        applied_force: f64,
        contact_force: f64,
        target_aperture: f64,
        force_limit: f64,
        instruction: &str,
        embedding: &[f32],
        subtask: Subtask,
    ) -> Step {
        let mut state = Vec::with_capacity(STATE_DIM);
        state.extend_from_slice(&HOME_CARTESIAN);
        state.extend_from_slice(&HOME_JOINTS);
        state.extend_from_slice(&[aperture, applied_force, contact_force, 0.0]);
        let mut action = vec![0.0; ACTION_DIM];
        action[ACTION_GRIPPER_POSITION] = target_aperture;
        action[ACTION_GRIPPER_FORCE] = force_limit;
        Step {
            action,
            action_dict: ActionDict {
                cartesian_position: HOME_CARTESIAN.to_vec(),
                gripper_force: force_limit,
                gripper_position: target_aperture,
                rotation: vec![0.0; 3],
                translation: vec![0.0; 3],
            },
            discount: 1.0,
            is_first: false,
            is_last: false,
            is_terminal: false,
            language_embedding: embedding.to_vec(),
            language_instruction: instruction.to_string(),
            observation: Observation {
                state,
                applied_force,
                cartesian_position: HOME_CARTESIAN.to_vec(),
                contact_force,
                gripper_position: aperture,
                joint_position: HOME_JOINTS.to_vec(),
                image_ref: String::new(),
                wrist_image_ref: String::new(),
            },
            reward: 0.0,
            subtask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeMetadata {
    pub file_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub metadata: EpisodeMetadata,
    pub object_name: String,
    pub seen: bool,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn id(&self) -> &str {
        &self.metadata.file_path
    }

    /// Set first/last/terminal flags and the terminal reward from step order.
    pub fn stamp_boundaries(&mut self) {
        let n = self.steps.len();
        for (i, step) in self.steps.iter_mut().enumerate() {
            step.is_first = i == 0;
            step.is_last = i + 1 == n;
            step.is_terminal = i + 1 == n;
            step.reward = if i + 1 == n { 1.0 } else { 0.0 };
        }
    }

    /// Check every structural rule, returning the first violation and the
    /// index of the offending step.
    pub fn validate(&self) -> Result<(), (usize, Violation)> {
        if self.steps.len() < 2 {
            return Err((0, Violation::TooFewSteps));
        }
        let last = self.steps.len() - 1;
        let mut prev_rank = 0;
        for (i, step) in self.steps.iter().enumerate() {
            if step.is_first != (i == 0) {
                return Err((
                    i,
                    if step.is_first {
                        Violation::DuplicateFirst
                    } else {
                        Violation::MissingFirst
                    },
                ));
            }
            if step.is_last != (i == last) {
                return Err((
                    i,
                    if step.is_last {
                        Violation::EarlyLast
                    } else {
                        Violation::MissingLast
                    },
                ));
            }
            if step.is_last && !step.is_terminal {
                return Err((i, Violation::LastNotTerminal));
            }
            let rank = step.subtask.rank();
            if rank < prev_rank {
                return Err((i, Violation::SubtaskOrder));
            }
            prev_rank = rank;
            if step.action.len() != ACTION_DIM {
                return Err((i, Violation::VectorLength("action")));
            }
            if step.observation.state.len() != STATE_DIM {
                return Err((i, Violation::VectorLength("observation.state")));
            }
            if step.language_embedding.len() != EMBEDDING_DIM {
                return Err((i, Violation::VectorLength("language_embedding")));
            }
            let lengths = [
                (
                    step.action_dict.cartesian_position.len(),
                    6,
                    "action_dict.cartesian_position",
                ),
                (step.action_dict.rotation.len(), 3, "action_dict.rotation"),
                (
                    step.action_dict.translation.len(),
                    3,
                    "action_dict.translation",
                ),
                (
                    step.observation.cartesian_position.len(),
                    6,
                    "observation.cartesian_position",
                ),
                (
                    step.observation.joint_position.len(),
                    6,
                    "observation.joint_position",
                ),
            ];
            for (got, want, field) in lengths {
                if got != want {
                    return Err((i, Violation::VectorLength(field)));
                }
            }
            if !(step.observation.applied_force >= 0.0) || !(step.observation.contact_force >= 0.0)
            {
                return Err((i, Violation::NegativeForce));
            }
        }
        Ok(())
    }
}

/// Short content hash of a serialized dataset, used to tie policies to the
/// corpus they were trained on.
pub fn fingerprint(bytes: &[u8]) -> String {
    format!("{:016x}", embed::fnv1a(bytes))
}

/// Keep only the contiguous grasp block of each episode and re-stamp its
/// boundary flags. Episodes without at least two grasp steps are dropped.
pub fn grasp_only(episodes: &[Episode]) -> Vec<Episode> {
    episodes
        .iter()
        .filter_map(|ep| {
            let start = ep.steps.iter().position(|s| s.subtask == Subtask::Grasp);
            let Some(start) = start else {
                log::info!("dropping episode {}: no grasp steps", ep.id());
                return None;
            };
            let len = ep.steps[start..]
                .iter()
                .take_while(|s| s.subtask == Subtask::Grasp)
                .count();
            if len < 2 {
                log::info!(
                    "dropping episode {}: grasp block shorter than 2 steps",
                    ep.id()
                );
                return None;
            }
            let mut out = Episode {
                metadata: ep.metadata.clone(),
                object_name: ep.object_name.clone(),
                seen: ep.seen,
                steps: ep.steps[start..start + len].to_vec(),
            };
            out.stamp_boundaries();
            Some(out)
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Episode with the given subtask block sizes and a closing ramp.
    pub fn episode(id: &str, approach: usize, grasp: usize, home: usize) -> Episode {
        let text = "grasp the test object";
        let emb: Vec<f32> = embed_instruction(text)
            .unwrap()
            .into_iter()
            .map(|x| x as f32)
            .collect();
        let mut steps = Vec::new();
        let mut aperture = 40.0;
        for (count, subtask) in [
            (approach, Subtask::Approach),
            (grasp, Subtask::Grasp),
            (home, Subtask::Home),
        ] {
            for _ in 0..count {
                let force = if subtask == Subtask::Approach {
                    0.0
                } else {
                    0.5
                };
                steps.push(Step::new(
                    aperture,
                    0.15,
                    force,
                    aperture - 2.0,
                    0.15,
                    text,
                    &emb,
                    subtask,
                ));
                if subtask == Subtask::Grasp {
                    aperture -= 1.5;
                }
            }
        }
        let mut ep = Episode {
            metadata: EpisodeMetadata {
                file_path: id.to_string(),
            },
            object_name: "test object".into(),
            seen: true,
            steps,
        };
        ep.stamp_boundaries();
        ep
    }
}

use std::collections::VecDeque;

use super::{Policy, PolicyError};
use crate::rng::Rng;
use crate::sim::{Controller, GripperCommand, GripperObservation};

/// Receding-horizon execution of a policy: each replan samples a full
/// action window and queues the first `action_horizon_eval` actions.
pub struct PolicyRunner<'a> {
    policy: &'a Policy,
    instruction: Vec<f64>,
    rng: Rng,
    history: VecDeque<Vec<f64>>,
    queue: VecDeque<Vec<f64>>,
    last: Option<GripperCommand>,
    skipped: usize,
    replans: usize,
}

impl<'a> PolicyRunner<'a> {
    pub fn new(
        policy: &'a Policy,
        instruction: Vec<f64>,
        rng: Rng,
    ) -> Result<PolicyRunner<'a>, PolicyError> {
        if instruction.len() != policy.config.instruction_dim {
            return Err(PolicyError::Shape(format!(
                "instruction embedding has {} values, expected {}",
                instruction.len(),
                policy.config.instruction_dim
            )));
        }
        Ok(PolicyRunner {
            policy,
            instruction,
            rng,
            history: VecDeque::new(),
            queue: VecDeque::new(),
            last: None,
            skipped: 0,
            replans: 0,
        })
    }

    /// Ticks whose observation was missing or unusable.
    pub fn skipped_ticks(&self) -> usize {
        self.skipped
    }

    pub fn replans(&self) -> usize {
        self.replans
    }

    fn to_command(&self, action: &[f64]) -> GripperCommand {
        let force = match self.policy.variant.constant_force() {
            Some(f) => f,
            None => action[1].max(self.policy.config.min_force),
        };
        GripperCommand {
            target_aperture: action[0],
            force_limit: force,
        }
    }

    /// Repeat the previous command, or stay open if there is none.
    fn fallback(&self) -> GripperCommand {
        self.last.unwrap_or(GripperCommand {
            target_aperture: self.policy.config.max_aperture,
            force_limit: self.initial_force(),
        })
    }

    /// One control tick. A missing observation is counted and the previous
    /// command repeated.
    pub fn tick(
        &mut self,
        obs: Option<&GripperObservation>,
    ) -> Result<GripperCommand, PolicyError> {
        let usable = obs.filter(|o| {
            o.aperture.is_finite() && o.applied_force.is_finite() && o.contact_force.is_finite()
        });
        let Some(obs) = usable else {
            self.skipped += 1;
            return Ok(self.fallback());
        };
        let row = self.policy.variant.observe(obs);
        let horizon = self.policy.config.obs_horizon;
        if self.history.is_empty() {
            self.history.extend(std::iter::repeat_n(row, horizon));
        } else {
            self.history.push_back(row);
            while self.history.len() > horizon {
                self.history.pop_front();
            }
        }
        if self.queue.is_empty() {
            let window: Vec<Vec<f64>> = self.history.iter().cloned().collect();
            let actions = self
                .policy
                .sample_actions(&window, &self.instruction, &mut self.rng)?;
            self.queue.extend(
                actions
                    .into_iter()
                    .take(self.policy.config.action_horizon_eval),
            );
            self.replans += 1;
        }
        let action = self.queue.pop_front().expect("replan fills the queue");
        let command = self.to_command(&action);
        self.last = Some(command);
        Ok(command)
    }
}

impl Controller for PolicyRunner<'_> {
    fn initial_force(&self) -> f64 {
        self.policy
            .variant
            .constant_force()
            .unwrap_or(self.policy.config.min_force)
    }

    fn command(&mut self, obs: &GripperObservation) -> GripperCommand {
        match self.tick(Some(obs)) {
            Ok(c) => c,
            Err(e) => {
                log::error!("policy tick failed: {e}");
                self.skipped += 1;
                self.fallback()
            }
        }
    }
}

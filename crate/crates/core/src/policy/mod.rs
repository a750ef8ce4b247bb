//! Diffusion policies over gripper action windows.
//!
//! A policy predicts `pred_horizon` future actions from the last
//! `obs_horizon` observations and the instruction embedding. Two variants
//! exist: `forceful` observes aperture, applied force and contact force and
//! outputs aperture and force; `position_only` sees and outputs the
//! aperture alone and executes a constant force.

mod denoiser;
mod runner;
mod schedule;

pub use denoiser::{time_embedding, Denoiser, DenoiserCache, DenoiserDims, DenoiserInput};
pub use runner::PolicyRunner;
pub use schedule::{reverse_diffusion, reverse_from, EpsilonModel, NoiseSchedule};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    embed_instruction, DatasetError, Episode, NormStats, ACTION_GRIPPER_FORCE,
    ACTION_GRIPPER_POSITION, EMBEDDING_DIM, STATE_APPLIED_FORCE, STATE_CONTACT_FORCE,
    STATE_GRIPPER_POSITION,
};
use crate::nn::{Adam, AdamConfig, Checkpoint, NnError, Tensor};
use crate::rng::{self, stream, Purpose, Rng};
use crate::sim::GripperObservation;

/// Force executed by position-only policies, N.
pub const POSITION_ONLY_FORCE: f64 = 2.0;

pub const SIDECAR_FORMAT: &str = "forcegrasp.policy";
const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("no training pairs")]
    EmptyPairs,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("policy files disagree: {0}")]
    Mismatch(String),
    #[error("bad sidecar {path}: {message}")]
    Sidecar { path: PathBuf, message: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Forceful,
    PositionOnly,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Forceful, Variant::PositionOnly];

    /// Indices into `observation.state`.
    pub fn state_channels(self) -> &'static [usize] {
        match self {
            Variant::Forceful => &[
                STATE_GRIPPER_POSITION,
                STATE_APPLIED_FORCE,
                STATE_CONTACT_FORCE,
            ],
            Variant::PositionOnly => &[STATE_GRIPPER_POSITION],
        }
    }

    /// Indices into `action`.
    pub fn action_channels(self) -> &'static [usize] {
        match self {
            Variant::Forceful => &[ACTION_GRIPPER_POSITION, ACTION_GRIPPER_FORCE],
            Variant::PositionOnly => &[ACTION_GRIPPER_POSITION],
        }
    }

    pub fn obs_dim(self) -> usize {
        self.state_channels().len()
    }

    pub fn act_dim(self) -> usize {
        self.action_channels().len()
    }

    /// Observation channels of a live gripper reading, in state order.
    pub fn observe(self, obs: &GripperObservation) -> Vec<f64> {
        match self {
            Variant::Forceful => vec![obs.aperture, obs.applied_force, obs.contact_force],
            Variant::PositionOnly => vec![obs.aperture],
        }
    }

    /// Fixed execution force, if the variant does not output one.
    pub fn constant_force(self) -> Option<f64> {
        match self {
            Variant::Forceful => None,
            Variant::PositionOnly => Some(POSITION_ONLY_FORCE),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Forceful => "forceful",
            Variant::PositionOnly => "position_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Variant, PolicyError> {
        match s {
            "forceful" => Ok(Variant::Forceful),
            "position_only" | "position-only" => Ok(Variant::PositionOnly),
            other => Err(PolicyError::Config(format!(
                "unknown variant {other:?} (expected forceful or position-only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub obs_horizon: usize,
    pub pred_horizon: usize,
    /// Actions executed per replan when running open-loop chunks.
    pub action_horizon_train: usize,
    /// Actions executed per replan at evaluation time.
    pub action_horizon_eval: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub instruction_dim: usize,
    pub instruction_projection: usize,
    pub time_embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub train_steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Linear learning-rate warmup, then cosine decay to zero when
    /// `cosine_decay` is set.
    pub lr_warmup_steps: usize,
    pub cosine_decay: bool,
    /// Warmup power of the weight moving average; 0 disables averaging.
    pub ema_power: f64,
    pub ema_max_decay: f64,
    pub max_aperture: f64,
    pub min_force: f64,
    pub max_force: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            obs_horizon: 2,
            pred_horizon: 16,
            action_horizon_train: 8,
            action_horizon_eval: 1,
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            instruction_dim: EMBEDDING_DIM,
            instruction_projection: 32,
            time_embedding_dim: 16,
            hidden: vec![256, 256],
            train_steps: 3000,
            batch_size: 16,
            adam: AdamConfig::default(),
            lr_warmup_steps: 100,
            cosine_decay: true,
            ema_power: 0.75,
            ema_max_decay: 0.9999,
            max_aperture: 85.0,
            min_force: 0.15,
            max_force: 10.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let fail = |m: &str| Err(PolicyError::Config(m.to_string()));
        if self.obs_horizon == 0 {
            return fail("obs_horizon must be at least 1");
        }
        if !(1 <= self.action_horizon_eval
            && self.action_horizon_eval <= self.action_horizon_train
            && self.action_horizon_train <= self.pred_horizon)
        {
            return fail("horizons must satisfy 1 <= action_horizon_eval <= action_horizon_train <= pred_horizon");
        }
        if self.instruction_dim != EMBEDDING_DIM {
            return Err(PolicyError::Config(format!(
                "instruction_dim must equal the embedding width {EMBEDDING_DIM}"
            )));
        }
        if self.instruction_projection == 0
            || self.time_embedding_dim < 2
            || !self.time_embedding_dim.is_multiple_of(2)
        {
            return fail("instruction_projection must be positive and time_embedding_dim even");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden widths must be non-empty and positive");
        }
        if self.train_steps == 0 || self.batch_size == 0 {
            return fail("train_steps and batch_size must be positive");
        }
        if !(self.adam.lr > 0.0) {
            return fail("learning rate must be positive");
        }
        if !(self.ema_power >= 0.0 && (0.0..1.0).contains(&self.ema_max_decay)) {
            return fail("ema_power must be non-negative and ema_max_decay in [0, 1)");
        }
        if !(self.max_aperture > 0.0 && 0.0 <= self.min_force && self.min_force <= self.max_force) {
            return fail(
                "clamp bounds must satisfy 0 < max_aperture and 0 <= min_force <= max_force",
            );
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, PolicyError> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn dims(&self, variant: Variant) -> DenoiserDims {
        DenoiserDims {
            obs: self.obs_horizon * variant.obs_dim(),
            instruction: self.instruction_dim,
            projection: self.instruction_projection,
            time: self.time_embedding_dim,
            action: self.pred_horizon * variant.act_dim(),
        }
    }
}

/// Normalization of the variant's own channels, cut from the full-vector
/// dataset statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub act_mean: Vec<f64>,
    pub act_std: Vec<f64>,
}

impl ChannelNorm {
    pub fn from_stats(stats: &NormStats, variant: Variant) -> ChannelNorm {
        let pick = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).collect();
        ChannelNorm {
            obs_mean: pick(&stats.state_mean, variant.state_channels()),
            obs_std: pick(&stats.state_std, variant.state_channels()),
            act_mean: pick(&stats.action_mean, variant.action_channels()),
            act_std: pick(&stats.action_std, variant.action_channels()),
        }
    }

    fn normalize_obs<'s>(&'s self, raw: &'s [f64]) -> impl Iterator<Item = f64> + 's {
        raw.iter()
            .zip(self.obs_mean.iter().zip(&self.obs_std))
            .map(|(x, (m, s))| (x - m) / s)
    }

    fn normalize_act<'s>(&'s self, raw: &'s [f64]) -> impl Iterator<Item = f64> + 's {
        raw.iter()
            .zip(self.act_mean.iter().zip(&self.act_std))
            .map(|(x, (m, s))| (x - m) / s)
    }
}

/// One supervised window: normalized observations (oldest first), the
/// instruction embedding, and normalized future actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub obs: Vec<f64>,
    pub instruction: Vec<f64>,
    pub actions: Vec<f64>,
}

/// Slide observation and action windows over each grasp-only episode.
/// Observation windows are front-padded with the first step and action
/// windows back-padded with the final action.
pub fn build_training_pairs(
    episodes: &[Episode],
    cfg: &PolicyConfig,
    variant: Variant,
    norm: &ChannelNorm,
) -> Vec<TrainingPair> {
    let mut pairs = Vec::new();
    for ep in episodes {
        let n = ep.steps.len();
        if n < 2 {
            log::info!("skipping episode {} with {n} step(s)", ep.id());
            continue;
        }
        let raw_obs: Vec<Vec<f64>> = ep
            .steps
            .iter()
            .map(|s| {
                variant
                    .state_channels()
                    .iter()
                    .map(|&i| s.observation.state[i])
                    .collect()
            })
            .collect();
        let raw_act: Vec<Vec<f64>> = ep
            .steps
            .iter()
            .map(|s| {
                variant
                    .action_channels()
                    .iter()
                    .map(|&i| s.action[i])
                    .collect()
            })
            .collect();
        for t in 0..n {
            let mut obs = Vec::with_capacity(cfg.obs_horizon * variant.obs_dim());
            for k in 0..cfg.obs_horizon {
                let idx = (t + k + 1).saturating_sub(cfg.obs_horizon);
                obs.extend(norm.normalize_obs(&raw_obs[idx]));
            }
            let mut actions = Vec::with_capacity(cfg.pred_horizon * variant.act_dim());
            for k in 0..cfg.pred_horizon {
                actions.extend(norm.normalize_act(&raw_act[(t + k).min(n - 1)]));
            }
            let instruction = ep.steps[t]
                .language_embedding
                .iter()
                .map(|&x| f64::from(x))
                .collect();
            pairs.push(TrainingPair {
                obs,
                instruction,
                actions,
            });
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub steps: usize,
    pub pairs: usize,
    pub param_count: usize,
    /// Batch loss at every step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    fn decile_mean(&self, last: bool) -> f64 {
        let n = (self.losses.len() / 10).max(1);
        let slice = if last {
            &self.losses[self.losses.len() - n..]
        } else {
            &self.losses[..n]
        };
        slice.iter().sum::<f64>() / slice.len() as f64
    }

    pub fn first_decile_mean(&self) -> f64 {
        self.decile_mean(false)
    }

    pub fn last_decile_mean(&self) -> f64 {
        self.decile_mean(true)
    }
}

/// Sidecar written next to a checkpoint; everything needed to rebuild and
/// run the policy apart from the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySidecar {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub config: PolicyConfig,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub param_count: usize,
    pub norm: ChannelNorm,
    /// Training episodes the normalization came from.
    pub norm_episodes: usize,
    pub dataset_fingerprint: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub variant: Variant,
    pub config: PolicyConfig,
    pub norm: ChannelNorm,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub seed: u64,
    pub norm_episodes: usize,
    pub dataset_fingerprint: Option<String>,
}

/// Instruction embedding as stored in episodes (rounded through `f32`), so
/// live conditioning matches training exactly.
pub fn instruction_embedding(text: &str) -> Result<Vec<f64>, PolicyError> {
    Ok(embed_instruction(text)?
        .into_iter()
        .map(|x| f64::from(x as f32))
        .collect())
}

/// Sidecar path for a checkpoint path (`x.ckpt` → `x.policy.json`).
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("policy.json")
}

struct Conditioned<'a> {
    denoiser: &'a Denoiser,
    obs: Tensor,
    projected: Tensor,
    instruction: Tensor,
}

impl EpsilonModel for Conditioned<'_> {
    fn predict(&self, xt: &[f64], t: usize) -> Result<Vec<f64>, PolicyError> {
        let input = DenoiserInput {
            obs: self.obs.clone(),
            instruction: self.instruction.clone(),
            timesteps: vec![t],
            noisy_actions: Tensor::from_vec(&[1, xt.len()], xt.to_vec())?,
        };
        Ok(self
            .denoiser
            .forward_projected(&input, &self.projected)?
            .data()
            .to_vec())
    }
}

impl Policy {
    /// Freshly initialized (untrained) policy.
    pub fn new(
        variant: Variant,
        config: PolicyConfig,
        stats: &NormStats,
        seed: u64,
    ) -> Result<Policy, PolicyError> {
        config.validate()?;
        let mut init = stream(seed, Purpose::Init, &[variant as u64]);
        Ok(Policy {
            variant,
            norm: ChannelNorm::from_stats(stats, variant),
            denoiser: Denoiser::new(config.dims(variant), &config.hidden, &mut init),
            schedule: config.schedule()?,
            config,
            seed,
            norm_episodes: stats.episode_ids.len(),
            dataset_fingerprint: None,
        })
    }

    /// Draw an action window for a raw observation window (oldest first,
    /// `obs_horizon` rows of the variant's channels). Returns
    /// `pred_horizon` denormalized, clamped rows.
    pub fn sample_actions(
        &self,
        obs_window: &[Vec<f64>],
        instruction: &[f64],
        rng: &mut Rng,
    ) -> Result<Vec<Vec<f64>>, PolicyError> {
        let (obs_dim, act_dim) = (self.variant.obs_dim(), self.variant.act_dim());
        if obs_window.len() != self.config.obs_horizon
            || obs_window.iter().any(|r| r.len() != obs_dim)
        {
            return Err(PolicyError::Shape(format!(
                "observation window must be {} rows of {obs_dim} channels",
                self.config.obs_horizon
            )));
        }
        if instruction.len() != self.config.instruction_dim {
            return Err(PolicyError::Shape(format!(
                "instruction embedding has {} values, expected {}",
                instruction.len(),
                self.config.instruction_dim
            )));
        }
        let obs: Vec<f64> = obs_window
            .iter()
            .flat_map(|r| self.norm.normalize_obs(r))
            .collect();
        let instruction = Tensor::from_vec(&[1, instruction.len()], instruction.to_vec())?;
        let model = Conditioned {
            denoiser: &self.denoiser,
            obs: Tensor::from_vec(&[1, obs.len()], obs)?,
            projected: self.denoiser.project(&instruction)?,
            instruction,
        };
        let x = reverse_diffusion(
            &model,
            &self.schedule,
            self.config.pred_horizon * act_dim,
            rng,
        )?;
        Ok(x.chunks(act_dim)
            .map(|row| self.denormalize_and_clamp(row))
            .collect())
    }

    fn denormalize_and_clamp(&self, row: &[f64]) -> Vec<f64> {
        let c = &self.config;
        row.iter()
            .enumerate()
            .map(|(i, z)| {
                let x = z * self.norm.act_std[i] + self.norm.act_mean[i];
                if i == 0 {
                    if x.is_finite() {
                        x.clamp(0.0, c.max_aperture)
                    } else {
                        c.max_aperture
                    }
                } else if x.is_finite() {
                    x.clamp(c.min_force, c.max_force)
                } else {
                    c.min_force
                }
            })
            .collect()
    }

    pub fn sidecar(&self) -> PolicySidecar {
        PolicySidecar {
            format: SIDECAR_FORMAT.into(),
            version: SIDECAR_VERSION,
            variant: self.variant,
            config: self.config.clone(),
            obs_dim: self.variant.obs_dim(),
            act_dim: self.variant.act_dim(),
            param_count: self.denoiser.param_count(),
            norm: self.norm.clone(),
            norm_episodes: self.norm_episodes,
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            seed: self.seed,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            seed: self.seed,
            step: self.config.train_steps as u64,
            tensors: self
                .denoiser
                .param_names()
                .into_iter()
                .zip(self.denoiser.params().into_iter().cloned())
                .collect(),
        }
    }

    /// Write the checkpoint and its sidecar.
    pub fn save(&self, checkpoint: &Path) -> Result<(), PolicyError> {
        self.checkpoint().save(checkpoint)?;
        let json = serde_json::to_string_pretty(&self.sidecar()).expect("sidecar serializes");
        fs::write(sidecar_path(checkpoint), json + "\n")?;
        Ok(())
    }

    pub fn load(checkpoint: &Path) -> Result<Policy, PolicyError> {
        let path = sidecar_path(checkpoint);
        let text = fs::read_to_string(&path).map_err(|e| PolicyError::Sidecar {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let sidecar: PolicySidecar =
            serde_json::from_str(&text).map_err(|e| PolicyError::Sidecar {
                path: path.clone(),
                message: e.to_string(),
            })?;
        Policy::from_parts(sidecar, &Checkpoint::load(checkpoint)?)
    }

    /// Rebuild a policy, refusing when the sidecar and the weights disagree.
    pub fn from_parts(sidecar: PolicySidecar, ck: &Checkpoint) -> Result<Policy, PolicyError> {
        if sidecar.format != SIDECAR_FORMAT || sidecar.version != SIDECAR_VERSION {
            return Err(PolicyError::Mismatch(format!(
                "unsupported sidecar {} v{}",
                sidecar.format, sidecar.version
            )));
        }
        let v = sidecar.variant;
        if sidecar.obs_dim != v.obs_dim() || sidecar.act_dim != v.act_dim() {
            return Err(PolicyError::Mismatch(format!(
                "{v} expects obs/act dims {}/{}, sidecar declares {}/{}",
                v.obs_dim(),
                v.act_dim(),
                sidecar.obs_dim,
                sidecar.act_dim
            )));
        }
        let n = &sidecar.norm;
        if n.obs_mean.len() != v.obs_dim()
            || n.obs_std.len() != v.obs_dim()
            || n.act_mean.len() != v.act_dim()
            || n.act_std.len() != v.act_dim()
        {
            return Err(PolicyError::Mismatch(
                "normalization statistics do not match the variant".into(),
            ));
        }
        sidecar.config.validate()?;
        let mut rng = stream(0, Purpose::Init, &[]);
        let mut denoiser = Denoiser::new(sidecar.config.dims(v), &sidecar.config.hidden, &mut rng);
        let names = denoiser.param_names();
        if ck.tensors.len() != names.len() {
            return Err(PolicyError::Mismatch(format!(
                "checkpoint holds {} tensors, sidecar layout needs {}",
                ck.tensors.len(),
                names.len()
            )));
        }
        for (name, param) in names.iter().zip(denoiser.params_mut()) {
            let shape = param.shape().to_vec();
            *param = ck
                .tensor(name, &shape)
                .map_err(|e| PolicyError::Mismatch(e.to_string()))?;
        }
        if denoiser.param_count() != sidecar.param_count {
            return Err(PolicyError::Mismatch(
                "parameter count differs from sidecar".into(),
            ));
        }
        Ok(Policy {
            variant: v,
            schedule: sidecar.config.schedule()?,
            config: sidecar.config,
            norm: sidecar.norm,
            denoiser,
            seed: ck.seed,
            norm_episodes: sidecar.norm_episodes,
            dataset_fingerprint: sidecar.dataset_fingerprint,
        })
    }
}

fn batch_input(
    pairs: &[TrainingPair],
    idx: &[usize],
    timesteps: Vec<usize>,
    noisy: Vec<f64>,
) -> Result<DenoiserInput, NnError> {
    let b = idx.len();
    let (od, id, ad) = (
        pairs[0].obs.len(),
        pairs[0].instruction.len(),
        pairs[0].actions.len(),
    );
    let mut obs = Vec::with_capacity(b * od);
    let mut ins = Vec::with_capacity(b * id);
    for &i in idx {
        obs.extend_from_slice(&pairs[i].obs);
        ins.extend_from_slice(&pairs[i].instruction);
    }
    Ok(DenoiserInput {
        obs: Tensor::from_vec(&[b, od], obs)?,
        instruction: Tensor::from_vec(&[b, id], ins)?,
        timesteps,
        noisy_actions: Tensor::from_vec(&[b, ad], noisy)?,
    })
}

/// ε-prediction training with Adam. Minibatches come from per-epoch
/// shuffles; timesteps and noise come from a separate stream.
pub fn train(
    pairs: &[TrainingPair],
    variant: Variant,
    config: &PolicyConfig,
    stats: &NormStats,
    seed: u64,
) -> Result<(Policy, TrainReport), PolicyError> {
    if pairs.is_empty() {
        return Err(PolicyError::EmptyPairs);
    }
    let mut policy = Policy::new(variant, config.clone(), stats, seed)?;
    let dims = config.dims(variant);
    if let Some(p) = pairs.iter().find(|p| {
        p.obs.len() != dims.obs
            || p.actions.len() != dims.action
            || p.instruction.len() != dims.instruction
    }) {
        return Err(PolicyError::Shape(format!(
            "training pair has obs/instruction/action widths {}/{}/{}, expected {}/{}/{}",
            p.obs.len(),
            p.instruction.len(),
            p.actions.len(),
            dims.obs,
            dims.instruction,
            dims.action
        )));
    }
    let mut shuffle = stream(seed, Purpose::Shuffle, &[variant as u64]);
    let mut noise = stream(seed, Purpose::Noise, &[variant as u64]);
    let mut adam = Adam::new(&policy.denoiser.params(), config.adam);
    let schedule = policy.schedule.clone();
    let batch = config.batch_size;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(config.train_steps);
    let mut ema: Vec<Tensor> = policy.denoiser.params().into_iter().cloned().collect();

    for step in 0..config.train_steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut shuffle);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let mut timesteps = Vec::with_capacity(batch);
        let mut eps = Vec::with_capacity(batch * dims.action);
        let mut noisy = Vec::with_capacity(batch * dims.action);
        for &i in &idx {
            let t = noise.random_range(1..=schedule.steps());
            let e: Vec<f64> = (0..dims.action)
                .map(|_| rng::gaussian(&mut noise))
                .collect();
            noisy.extend(schedule.corrupt(&pairs[i].actions, &e, t));
            eps.extend(e);
            timesteps.push(t);
        }
        let input = batch_input(pairs, &idx, timesteps, noisy)?;
        let (pred, cache) = policy.denoiser.forward_cached(&input)?;
        let scale = 1.0 / pred.len() as f64;
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(pred.len());
        for (p, e) in pred.data().iter().zip(&eps) {
            let d = p - e;
            loss += d * d * scale;
            grad.push(2.0 * d * scale);
        }
        if !loss.is_finite() {
            return Err(PolicyError::NonFinite {
                step,
                detail: format!(
                    "batch {:?}, prediction finite: {}, last finite loss {:?}",
                    idx,
                    pred.is_finite(),
                    losses.last()
                ),
            });
        }
        losses.push(loss);
        let grad = Tensor::from_vec(pred.shape(), grad)?;
        let grads = policy.denoiser.backward(&cache, &grad)?;
        adam.config.lr = learning_rate(config, step);
        adam.step(&mut policy.denoiser.params_mut(), &grads)
            .map_err(|e| PolicyError::NonFinite {
                step,
                detail: e.to_string(),
            })?;
        let decay = ema_decay(config, step + 1);
        for (avg, p) in ema.iter_mut().zip(policy.denoiser.params()) {
            for (a, v) in avg.data_mut().iter_mut().zip(p.data()) {
                *a = decay * *a + (1.0 - decay) * v;
            }
        }
        if (step + 1) % 500 == 0 {
            log::debug!("{variant} step {}: loss {loss:.5}", step + 1);
        }
    }
    if config.ema_power > 0.0 {
        for (p, avg) in policy.denoiser.params_mut().into_iter().zip(ema) {
            *p = avg;
        }
    }
    let report = TrainReport {
        seed,
        steps: config.train_steps,
        pairs: pairs.len(),
        param_count: policy.denoiser.param_count(),
        losses,
    };
    Ok((policy, report))
}

fn learning_rate(config: &PolicyConfig, step: usize) -> f64 {
    let base = config.adam.lr;
    if step < config.lr_warmup_steps {
        return base * (step + 1) as f64 / config.lr_warmup_steps as f64;
    }
    if !config.cosine_decay {
        return base;
    }
    let span = config
        .train_steps
        .saturating_sub(config.lr_warmup_steps)
        .max(1);
    let progress = (step - config.lr_warmup_steps) as f64 / span as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decay of the weight average after `step` updates; starts at 0 so the
/// average begins as a copy of the weights.
fn ema_decay(config: &PolicyConfig, step: usize) -> f64 {
    if config.ema_power == 0.0 {
        return 0.0;
    }
    (1.0 - (1.0 + step as f64).powf(-config.ema_power)).clamp(0.0, config.ema_max_decay)
}

/// Mean ε-prediction error over `pairs` with one fixed draw of timesteps
/// and noise per pair; used as a held-out loss.
pub fn mean_loss(policy: &Policy, pairs: &[TrainingPair], seed: u64) -> Result<f64, PolicyError> {
    if pairs.is_empty() {
        return Err(PolicyError::EmptyPairs);
    }
    let mut noise = stream(seed, Purpose::Noise, &[policy.variant as u64, 1]);
    let mut total = 0.0;
    let mut count = 0usize;
    let all: Vec<usize> = (0..pairs.len()).collect();
    for idx in all.chunks(64) {
        let mut timesteps = Vec::with_capacity(idx.len());
        let mut eps = Vec::new();
        let mut noisy = Vec::new();
        for &i in idx {
            let t = noise.random_range(1..=policy.schedule.steps());
            let e: Vec<f64> = (0..pairs[i].actions.len())
                .map(|_| rng::gaussian(&mut noise))
                .collect();
            noisy.extend(policy.schedule.corrupt(&pairs[i].actions, &e, t));
            eps.extend(e);
            timesteps.push(t);
        }
        let pred = policy
            .denoiser
            .forward(&batch_input(pairs, idx, timesteps, noisy)?)?;
        total += pred
            .data()
            .iter()
            .zip(&eps)
            .map(|(p, e)| (p - e) * (p - e))
            .sum::<f64>();
        count += pred.len();
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{compute_norm_stats, grasp_only, test_support::episode};

    fn stats() -> NormStats {
        compute_norm_stats(&[episode("a", 1, 10, 1)]).unwrap()
    }

    fn tiny() -> PolicyConfig {
        PolicyConfig {
            hidden: vec![32, 32],
            diffusion_steps: 20,
            train_steps: 50,
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn ten_step_episode_gives_ten_pairs() {
        let eps = grasp_only(&[episode("a", 1, 10, 1)]);
        let cfg = PolicyConfig::default();
        let norm = ChannelNorm::from_stats(&stats(), Variant::Forceful);
        let pairs = build_training_pairs(&eps, &cfg, Variant::Forceful, &norm);
        assert_eq!(pairs.len(), 10);
        assert_eq!(pairs[0].obs.len(), 6);
        assert_eq!(&pairs[0].obs[..3], &pairs[0].obs[3..]);
        assert_eq!(pairs[0].actions.len(), 32);
        assert_eq!(pairs[0].instruction.len(), EMBEDDING_DIM);
    }

    #[test]
    fn last_window_repeats_final_action() {
        let eps = grasp_only(&[episode("a", 0, 10, 0)]);
        let cfg = PolicyConfig::default();
        let norm = ChannelNorm::from_stats(&stats(), Variant::PositionOnly);
        let pairs = build_training_pairs(&eps, &cfg, Variant::PositionOnly, &norm);
        let last = &pairs[9].actions;
        assert!(last.iter().all(|x| *x == last[0]));
    }

    #[test]
    fn short_episodes_are_skipped() {
        let mut ep = episode("a", 0, 2, 0);
        ep.steps.truncate(1);
        let norm = ChannelNorm::from_stats(&stats(), Variant::Forceful);
        assert!(
            build_training_pairs(&[ep], &PolicyConfig::default(), Variant::Forceful, &norm)
                .is_empty()
        );
    }

    #[test]
    fn config_invariants() {
        assert!(PolicyConfig::default().validate().is_ok());
        let bad = PolicyConfig {
            action_horizon_eval: 9,
            ..PolicyConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PolicyConfig {
            obs_horizon: 0,
            ..PolicyConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PolicyConfig {
            beta_end: 1e-5,
            ..PolicyConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn variant_dimensions() {
        let cfg = PolicyConfig::default();
        assert_eq!(cfg.dims(Variant::Forceful).mlp_input(), 6 + 32 + 16 + 32);
        assert_eq!(
            cfg.dims(Variant::PositionOnly).mlp_input(),
            2 + 32 + 16 + 16
        );
        assert_eq!(
            "position-only".parse::<Variant>().unwrap(),
            Variant::PositionOnly
        );
        assert!("gripper".parse::<Variant>().is_err());
    }

    #[test]
    fn untrained_samples_are_clamped() {
        let mut policy = Policy::new(Variant::Forceful, tiny(), &stats(), 3).unwrap();
        for p in policy.denoiser.params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let emb = vec![0.0; EMBEDDING_DIM];
        let mut rng = stream(1, Purpose::Sampling, &[]);
        let out = policy
            .sample_actions(
                &[vec![50.0, 0.15, 0.0], vec![48.0, 0.15, 0.0]],
                &emb,
                &mut rng,
            )
            .unwrap();
        assert_eq!(out.len(), 16);
        for row in out {
            assert!((0.0..=85.0).contains(&row[0]));
            assert!((0.15..=10.0).contains(&row[1]));
        }
        assert!(policy
            .sample_actions(&[vec![50.0, 0.15]], &emb, &mut rng)
            .is_err());
    }

    #[test]
    fn save_load_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let policy = Policy::new(Variant::Forceful, tiny(), &stats(), 3).unwrap();
        policy.save(&path).unwrap();
        assert_eq!(Policy::load(&path).unwrap(), policy);

        let mut sidecar = policy.sidecar();
        sidecar.variant = Variant::PositionOnly;
        sidecar.obs_dim = 1;
        sidecar.act_dim = 1;
        assert!(matches!(
            Policy::from_parts(sidecar, &policy.checkpoint()),
            Err(PolicyError::Mismatch(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let eps = grasp_only(&[episode("a", 1, 10, 1), episode("b", 1, 8, 1)]);
        let st = compute_norm_stats(&eps).unwrap();
        let norm = ChannelNorm::from_stats(&st, Variant::Forceful);
        let pairs = build_training_pairs(&eps, &tiny(), Variant::Forceful, &norm);
        let (p1, r1) = train(&pairs, Variant::Forceful, &tiny(), &st, 4).unwrap();
        let (p2, r2) = train(&pairs, Variant::Forceful, &tiny(), &st, 4).unwrap();
        assert_eq!(r1.losses, r2.losses);
        assert_eq!(p1, p2);
        assert!(r1.losses.iter().all(|l| l.is_finite()));
    }
}

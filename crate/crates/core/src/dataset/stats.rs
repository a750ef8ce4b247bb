use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DatasetError, Episode, Subtask, ACTION_DIM, STATE_DIM};
use crate::rng::{stream, Purpose};

pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension normalization for the state and action vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    /// Episodes the statistics were computed from.
    pub episode_ids: Vec<String>,
    pub step_count: usize,
}

impl NormStats {
    pub fn normalize_state(&self, index: usize, value: f64) -> f64 {
        (value - self.state_mean[index]) / self.state_std[index]
    }

    pub fn normalize_action(&self, index: usize, value: f64) -> f64 {
        (value - self.action_mean[index]) / self.action_std[index]
    }

    pub fn denormalize_action(&self, index: usize, value: f64) -> f64 {
        value * self.action_std[index] + self.action_mean[index]
    }
}

fn mean_std(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row.iter()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for row in rows {
        for ((v, x), m) in var.iter_mut().zip(row.iter()).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / n).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

/// Population mean and floored standard deviation over the grasp steps of
/// the given (training) episodes.
pub fn compute_norm_stats(train: &[Episode]) -> Result<NormStats, DatasetError> {
    let steps: Vec<_> = train
        .iter()
        .flat_map(|ep| ep.steps.iter())
        .filter(|s| s.subtask == Subtask::Grasp)
        .collect();
    if steps.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    let states: Vec<&[f64]> = steps
        .iter()
        .map(|s| s.observation.state.as_slice())
        .collect();
    let actions: Vec<&[f64]> = steps.iter().map(|s| s.action.as_slice()).collect();
    let (state_mean, state_std) = mean_std(&states, STATE_DIM);
    let (action_mean, action_std) = mean_std(&actions, ACTION_DIM);
    Ok(NormStats {
        state_mean,
        state_std,
        action_mean,
        action_std,
        episode_ids: train.iter().map(|e| e.id().to_string()).collect(),
        step_count: steps.len(),
    })
}

/// Per-episode split stratified by object: every object keeps at least one
/// training episode, and the validation size is `round(n * (1 - ratio))`
/// up to that constraint.
pub fn split(
    episodes: &[Episode],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<Episode>, Vec<Episode>), DatasetError> {
    if episodes.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(DatasetError::BadRatio(ratio));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ep) in episodes.iter().enumerate() {
        groups.entry(ep.object_name.as_str()).or_default().push(i);
    }
    let val_fraction = 1.0 - ratio;
    let target_val = (episodes.len() as f64 * val_fraction).round() as usize;

    let mut rng = stream(seed, Purpose::Split, &[]);
    let mut quotas: Vec<(&str, usize, f64, usize)> = groups
        .iter()
        .map(|(name, idx)| {
            let exact = idx.len() as f64 * val_fraction;
            let cap = idx.len() - 1;
            (
                *name,
                (exact.floor() as usize).min(cap),
                exact - exact.floor(),
                cap,
            )
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|q| q.1).sum();
    // largest remainder first; seeded shuffle breaks ties
    quotas.shuffle(&mut rng);
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2));
    for &i in order.iter().cycle().take(order.len() * 2) {
        if assigned >= target_val {
            break;
        }
        if quotas[i].1 < quotas[i].3 {
            quotas[i].1 += 1;
            assigned += 1;
        }
    }

    let mut val_set = HashSet::new();
    quotas.sort_by(|a, b| a.0.cmp(b.0));
    for (name, quota, _, _) in quotas {
        let mut members = groups[name].clone();
        members.shuffle(&mut rng);
        val_set.extend(members.into_iter().take(quota));
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, ep) in episodes.iter().enumerate() {
        if val_set.contains(&i) {
            val.push(ep.clone());
        } else {
            train.push(ep.clone());
        }
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::episode;
    use super::*;

    fn corpus(objects: usize, per: &[usize]) -> Vec<Episode> {
        let mut out = Vec::new();
        for o in 0..objects {
            for r in 0..per[o % per.len()] {
                let mut ep = episode(&format!("sim/{o}/{r}"), 1, 5, 1);
                ep.object_name = format!("object {o}");
                out.push(ep);
            }
        }
        out
    }

    #[test]
    fn constant_channels_are_floored() {
        let stats = compute_norm_stats(&corpus(2, &[3])).unwrap();
        assert_eq!(stats.action_mean[0], 0.0);
        assert_eq!(stats.action_std[0], STD_FLOOR);
        assert_eq!(stats.state_std[0], STD_FLOOR);
        assert!(stats.state_std[12] > 0.1);
    }

    #[test]
    fn zscored_data_has_unit_stats() {
        let eps = corpus(3, &[4]);
        let stats = compute_norm_stats(&eps).unwrap();
        let mut normed = eps.clone();
        for ep in &mut normed {
            for s in &mut ep.steps {
                for i in 0..STATE_DIM {
                    s.observation.state[i] = stats.normalize_state(i, s.observation.state[i]);
                }
            }
        }
        let again = compute_norm_stats(&normed).unwrap();
        assert!((again.state_mean[12]).abs() < 1e-9);
        assert!((again.state_std[12] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(matches!(
            compute_norm_stats(&[]),
            Err(DatasetError::EmptyCorpus)
        ));
        assert!(matches!(split(&[], 0.9, 0), Err(DatasetError::EmptyCorpus)));
    }

    #[test]
    fn split_130_episodes() {
        // 30 objects with 4 or 5 episodes each, 130 in total
        let eps = corpus(30, &[4, 5, 4, 5, 4, 4]);
        assert_eq!(eps.len(), 130);
        let (train, val) = split(&eps, 0.9, 17).unwrap();
        assert_eq!(train.len(), 117);
        assert_eq!(val.len(), 13);
        let objects: HashSet<_> = train.iter().map(|e| e.object_name.clone()).collect();
        assert_eq!(objects.len(), 30);
        let train_ids: HashSet<_> = train.iter().map(|e| e.id().to_string()).collect();
        assert!(val.iter().all(|e| !train_ids.contains(e.id())));
        let (train2, val2) = split(&eps, 0.9, 17).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
    }

    #[test]
    fn stats_only_see_training_ids() {
        let eps = corpus(5, &[4]);
        let (train, val) = split(&eps, 0.75, 1).unwrap();
        let stats = compute_norm_stats(&train).unwrap();
        let ids: HashSet<_> = stats.episode_ids.iter().collect();
        assert!(val.iter().all(|e| !ids.contains(&e.id().to_string())));
    }
}

//! Trajectory semantic score, group normalization and composite advantages.

use thiserror::Error;

use crate::config::{RunConfig, SemNormalization, SemanticScoring};
use crate::policy::Trajectory;

pub const STD_EPSILON: f64 = 1e-8;
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// `(1/T) Σ_t λ^{T-t} z_t`, zero when there were no tool calls.
pub fn trajectory_semantic_score(z: &[f64], lambda: f64) -> Result<f64, RewardError> {
    check_scores(z, lambda)?;
    let t = z.len();
    if t == 0 {
        return Ok(0.0);
    }
    // Horner from the oldest step: each later step multiplies earlier ones by λ.
    let discounted = z.iter().fold(0.0, |acc, &zt| acc * lambda + zt);
    Ok(discounted / t as f64)
}

/// Undiscounted sum of per-step scores; only used for the length ablation.
pub fn sum_semantic_score(z: &[f64]) -> Result<f64, RewardError> {
    check_scores(z, 1.0)?;
    Ok(z.iter().sum())
}

pub fn semantic_return(z: &[f64], scoring: SemanticScoring, lambda: f64) -> Result<f64, RewardError> {
    match scoring {
        SemanticScoring::Discounted => trajectory_semantic_score(z, lambda),
        SemanticScoring::Sum => sum_semantic_score(z),
    }
}

fn check_scores(z: &[f64], lambda: f64) -> Result<(), RewardError> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(RewardError::Input(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    match z.iter().find(|v| !(v.abs() <= 1.0)) {
        Some(v) => Err(RewardError::Input(format!("semantic score {v} outside [-1, 1]"))),
        None => Ok(()),
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `(v - mean) / max(std, 1e-8)` with population std; all zeros when the
/// group is degenerate.
pub fn group_normalize(values: &[f64]) -> Result<Vec<f64>, RewardError> {
    if values.len() < 2 {
        return Err(RewardError::Config(format!("group size must be at least 2, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(RewardError::Input("non-finite reward".into()));
    }
    let m = mean(values);
    let std = (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; values.len()]);
    }
    let denom = std.max(STD_EPSILON);
    Ok(values.iter().map(|v| (v - m) / denom).collect())
}

/// Mean-centring only; the ablation for the semantic channel.
pub fn group_center(values: &[f64]) -> Result<Vec<f64>, RewardError> {
    if values.len() < 2 {
        return Err(RewardError::Config(format!("group size must be at least 2, got {}", values.len())));
    }
    let m = mean(values);
    Ok(values.iter().map(|v| v - m).collect())
}

pub fn composite_advantage(a_out: f64, a_sem: f64, beta: f64) -> f64 {
    a_out + beta * a_sem
}

/// G trajectories for one query with their rewards and advantages.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub trajectories: Vec<Trajectory>,
    pub r_out: Vec<f64>,
    pub r_sem: Vec<f64>,
    pub a_out: Vec<f64>,
    pub a_sem: Vec<f64>,
    pub a_tilde: Vec<f64>,
}

impl GroupBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Scores a group with an explicit semantic weight.
pub fn score_group_with_beta(
    trajectories: Vec<Trajectory>,
    normalization: SemNormalization,
    beta: f64,
) -> Result<GroupBatch, RewardError> {
    let first = trajectories.first().ok_or_else(|| RewardError::Config("empty group".into()))?;
    let key = (first.scene_seed, first.query);
    if trajectories.iter().any(|t| (t.scene_seed, t.query) != key) {
        return Err(RewardError::Input("group mixes trajectories from different queries".into()));
    }
    let r_out: Vec<f64> = trajectories.iter().map(|t| t.r_out as f64).collect();
    let r_sem: Vec<f64> = trajectories.iter().map(|t| t.r_sem).collect();
    let a_out = group_normalize(&r_out)?;
    let a_sem = match normalization {
        SemNormalization::ZScore => group_normalize(&r_sem)?,
        SemNormalization::Mean => group_center(&r_sem)?,
    };
    let a_tilde = a_out.iter().zip(&a_sem).map(|(&o, &s)| composite_advantage(o, s, beta)).collect();
    Ok(GroupBatch { trajectories, r_out, r_sem, a_out, a_sem, a_tilde })
}

pub fn score_group(trajectories: Vec<Trajectory>, config: &RunConfig) -> Result<GroupBatch, RewardError> {
    score_group_with_beta(trajectories, config.sem_normalization, config.effective_beta())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Attribute, Query};

    fn traj(r_out: u8, r_sem: f64) -> Trajectory {
        Trajectory {
            scene_seed: 1,
            query: Query { target_class: 0, asked_attribute: Attribute::Color, ground_truth: 2 },
            steps: vec![],
            answer: 0,
            r_out,
            r_sem,
            temperature: 1.0,
            behavior: 0,
            verifier_incidents: 0,
        }
    }

    #[test]
    fn semantic_score_examples() {
        assert_eq!(trajectory_semantic_score(&[0.6], 0.3).unwrap(), 0.6);
        assert!((trajectory_semantic_score(&[0.5, 0.8], 0.95).unwrap() - 0.6375).abs() < 1e-12);
        let v = trajectory_semantic_score(&[1.0, 1.0, 1.0], 0.95).unwrap();
        assert!((v - (0.9025 + 0.95 + 1.0) / 3.0).abs() < 1e-12);
        assert!((v - 0.950833).abs() < 1e-6);
        assert_eq!(trajectory_semantic_score(&[], 0.95).unwrap(), 0.0);
        assert!(trajectory_semantic_score(&[1.2], 0.95).is_err());
        assert!(trajectory_semantic_score(&[0.5], 0.0).is_err());
        assert!(trajectory_semantic_score(&[f64::NAN], 0.5).is_err());
    }

    #[test]
    fn repeated_score_decreases_with_length() {
        let mut prev = f64::INFINITY;
        for t in 1..=6 {
            let v = trajectory_semantic_score(&vec![0.8; t], 0.95).unwrap();
            let closed = 0.8 * (1.0 - 0.95f64.powi(t as i32)) / (t as f64 * 0.05);
            assert!((v - closed).abs() < 1e-12);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(group_normalize(&[1.0; 4]).unwrap(), vec![0.0; 4]);
        let two = group_normalize(&[2.0, 0.0]).unwrap();
        assert!((two[0] - 1.0).abs() < 1e-12 && (two[1] + 1.0).abs() < 1e-12);
        let mut v = vec![0.0; 8];
        v[0] = 1.0;
        let a = group_normalize(&v).unwrap();
        assert!((a[0] - 7f64.sqrt()).abs() < 1e-12);
        assert!(a[1..].iter().all(|x| (x + 1.0 / 7f64.sqrt()).abs() < 1e-12));
        assert!(matches!(group_normalize(&[1.0]), Err(RewardError::Config(_))));
    }

    #[test]
    fn composite_examples() {
        assert!((composite_advantage(1.0, 0.5, 0.4) - 1.2).abs() < 1e-12);
        assert_eq!(composite_advantage(0.3, 9.0, 0.0), 0.3);
        assert!((composite_advantage(0.0, 1.0, 0.4) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn group_scoring_examples() {
        let cfg = RunConfig::default();
        let all = score_group((0..8).map(|_| traj(1, 0.5)).collect(), &cfg).unwrap();
        assert!(all.a_tilde.iter().all(|&a| a == 0.0));

        let one = score_group((0..8).map(|i| traj((i == 0) as u8, 0.5)).collect(), &cfg).unwrap();
        assert!((one.a_tilde[0] - 7f64.sqrt()).abs() < 1e-12);
        assert!(one.a_tilde[1..].iter().all(|x| (x + 1.0 / 7f64.sqrt()).abs() < 1e-12));

        let sem = score_group(vec![traj(0, 0.9), traj(0, 0.1)], &cfg).unwrap();
        assert!((sem.a_tilde[0] - 0.4).abs() < 1e-12 && (sem.a_tilde[1] + 0.4).abs() < 1e-12);

        let mut other = traj(0, 0.1);
        other.scene_seed = 2;
        assert!(matches!(score_group(vec![traj(0, 0.9), other], &cfg), Err(RewardError::Input(_))));
    }

    #[test]
    fn mean_only_switch_centres_without_scaling() {
        let cfg = RunConfig { sem_normalization: SemNormalization::Mean, ..RunConfig::default() };
        let g = score_group(vec![traj(0, 0.9), traj(0, 0.1)], &cfg).unwrap();
        assert!((g.a_sem[0] - 0.4).abs() < 1e-12 && (g.a_sem[1] + 0.4).abs() < 1e-12);
    }
}

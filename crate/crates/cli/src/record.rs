//! JSON-lines record types. Fields that were not computed are omitted, never zero-filled.

use serde::{Deserialize, Serialize};

use eruption_core::env::Episode;
use eruption_core::trainer::StepRecord;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub reward_mean: f64,
    pub valid_action_ratio: f64,
    pub duplication_ratio: f64,
    pub hallucination_rate: f64,
    /// Mean next-token entropy along the rollout group.
    pub token_entropy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_entropy: Option<f64>,
    /// Exact format mass, averaged over prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_p_fmt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_p_sem: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_ll_correct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_ll_valid: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_drift: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_drift: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosine_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_accuracy: Option<f64>,
    /// Classifier loss of the current head on the held-out trajectories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout_seal_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rl_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seal_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

/// One training step as written to `steps.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub snapshot_version: u64,
    pub episodes: Vec<Episode>,
    pub advantages: Vec<f64>,
    pub log_likelihoods: Vec<f64>,
    pub token_log_probs: Vec<Vec<f64>>,
}

impl From<&StepRecord> for StepLog {
    fn from(r: &StepRecord) -> Self {
        Self {
            step: r.step,
            snapshot_version: r.snapshot_version,
            episodes: r.group.episodes.clone(),
            advantages: r.group.advantages.clone(),
            log_likelihoods: r.log_likelihoods.clone(),
            token_log_probs: r.token_log_probs.clone(),
        }
    }
}

/// One exported episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    pub r_fmt: u8,
    pub r_sem: u8,
    pub reward: f64,
    pub advantage: f64,
    pub log_likelihood: f64,
    pub token_log_probs: Vec<f64>,
}

impl StepLog {
    pub fn trajectories(&self) -> impl Iterator<Item = TrajectoryRecord> + '_ {
        self.episodes
            .iter()
            .enumerate()
            .map(move |(i, e)| TrajectoryRecord {
                step: self.step,
                prompt: e.prompt.clone(),
                response: e.response.clone(),
                r_fmt: e.r_fmt,
                r_sem: e.r_sem,
                reward: e.reward,
                advantage: self.advantages[i],
                log_likelihood: self.log_likelihoods[i],
                token_log_probs: self.token_log_probs[i].clone(),
            })
    }
}

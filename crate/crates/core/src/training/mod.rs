//! Reward shaping, rollout collection and PPO optimization.

mod gae;
mod ppo;
mod reward;
mod rollout;
mod trainer;

pub use gae::{compute_gae, normalize};
pub use ppo::{batch_targets, ppo_loss, ppo_update, PpoConfig, PpoLoss, UpdateStats};
pub use reward::{final_reward, step_reward, RewardConfig};
pub use rollout::{Collector, EpisodeStats, RolloutBatch};
pub use trainer::{
    load_model, save_model, train, CheckpointMeta, TrainConfig, TrainOutcome, UpdateLog, CHECKPOINT_DIR, LOG_FILE,
};

use thiserror::Error;

use crate::numkit::NumError;
use crate::worldsim::WorldError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch}, minibatch {minibatch} (environments {envs:?})")]
    NonFiniteLoss { epoch: usize, minibatch: usize, envs: Vec<usize> },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("validation run failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

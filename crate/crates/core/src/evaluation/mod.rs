//! Episode-set evaluation, metrics, trajectory images and ablation tables.

mod ablation;
mod controller;
mod metrics;
mod run;
mod trajectory;

pub use ablation::{ablation_run, write_ablation_csv, AblationCell, AblationPlan};
pub use controller::{Controller, NetController, OracleController, RandomController};
pub use metrics::{spl, summarize, EpisodeResult, MetricSummary};
pub use run::{evaluate, evaluate_seeds, load_policy, run_episodes, write_results, EvalReport};
pub use trajectory::{render_trajectory, TrajectoryImage};

use thiserror::Error;

use crate::correlation::CueVariant;
use crate::numkit::NumError;
use crate::training::TrainError;
use crate::worldsim::WorldError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("checkpoint was trained with the {found} variant but the configuration selects {expected}")]
    VariantMismatch { expected: CueVariant, found: CueVariant },
    #[error("episode {episode_id} has a {rays}-ray goal camera but the policy expects {expected}x{expected} images")]
    ImageSize { episode_id: u64, rays: usize, expected: usize },
    #[error("no episodes to evaluate")]
    NoEpisodes,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

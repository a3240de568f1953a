//! Planar gridworld: procedural scenes, raycast views, goal cameras,
//! discrete kinematics and the navigation episode lifecycle.

mod camera;
mod env;
mod episode;
mod geodesic;
mod kinematics;
mod pose;
mod render;
mod scene;

pub use camera::{sample_goal_camera, CameraParams, GoalCameraSetting};
pub use env::{EpisodePool, NavEnv, World};
pub use episode::{read_episodes, sample_episode, sample_episodes, write_episodes, EpisodeSpec, MIN_GEODESIC};
pub use geodesic::{geodesic_distance, geodesic_distance_with, segment_clear, GoalField, NavGraph};
pub use kinematics::{apply_action, Action, StepOutcome, FORWARD_STEP, MAX_STEPS, SUCCESS_DISTANCE, TURN_ANGLE};
pub use pose::{angle_to_goal, wrap_angle, wrap_pi, Pose};
pub use render::{
    band_height, cast_ray, encode_ppm, ray_angle, render, Observation, RayHit, CEILING_GRAY, FLOOR_GRAY, WALL_HEIGHT,
};
pub use scene::{generate_scene, Rgb, SceneFile, SceneGrid, WallColor, DEFAULT_CELL_SIZE, MAX_ATTEMPTS};

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error(
        "no connected scene after {} attempts (seed {seed}, size {size}, wall density {wall_density})",
        MAX_ATTEMPTS
    )]
    Unsatisfiable { seed: u64, size: usize, wall_density: f64 },
    #[error("point ({x:.3}, {y:.3}) is not in free space")]
    NotFree { x: f64, y: f64 },
    #[error("goal unreachable in scene {scene_id}: free space is disconnected")]
    Unreachable { scene_id: String },
    #[error("episode file line {line}: {message}")]
    EpisodeFile { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

use std::collections::BTreeMap;
use std::sync::Arc;

use super::camera::CameraParams;
use super::episode::EpisodeSpec;
use super::geodesic::{geodesic_distance_with, GoalField, NavGraph};
use super::kinematics::{apply_action, Action, StepOutcome, FORWARD_STEP, MAX_STEPS, SUCCESS_DISTANCE};
use super::pose::{angle_to_goal, Pose};
use super::render::{render, Observation};
use super::scene::SceneGrid;
use super::WorldError;

/// A scene with its precomputed visibility graph. Immutable and shared
/// between environments.
#[derive(Debug, Clone)]
pub struct World {
    scene: SceneGrid,
    graph: NavGraph,
}

impl World {
    pub fn new(scene: SceneGrid) -> Self {
        let graph = NavGraph::build(&scene);
        Self { scene, graph }
    }

    pub fn scene(&self) -> &SceneGrid {
        &self.scene
    }

    pub fn graph(&self) -> &NavGraph {
        &self.graph
    }

    pub fn goal_field(&self, goal: &Pose) -> GoalField {
        GoalField::new(&self.scene, &self.graph, goal.position())
    }

    pub fn geodesic(&self, from: &Pose, to: &Pose) -> Result<f64, WorldError> {
        geodesic_distance_with(&self.scene, &self.graph, from, to)
    }
}

/// Scenes keyed by id together with an episode list over them.
#[derive(Debug, Clone)]
pub struct EpisodePool {
    worlds: BTreeMap<String, Arc<World>>,
    episodes: Vec<EpisodeSpec>,
}

impl EpisodePool {
    /// Fails when an episode names a scene that is not supplied.
    pub fn new(scenes: Vec<SceneGrid>, episodes: Vec<EpisodeSpec>) -> Result<Self, WorldError> {
        let worlds: BTreeMap<String, Arc<World>> =
            scenes.into_iter().map(|s| (s.scene_id.clone(), Arc::new(World::new(s)))).collect();
        if let Some(ep) = episodes.iter().find(|ep| !worlds.contains_key(&ep.scene_id)) {
            return Err(WorldError::InvalidParameter(format!(
                "episode {} refers to unknown scene {}",
                ep.episode_id, ep.scene_id
            )));
        }
        Ok(Self { worlds, episodes })
    }

    pub fn episodes(&self) -> &[EpisodeSpec] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn world(&self, scene_id: &str) -> Option<&Arc<World>> {
        self.worlds.get(scene_id)
    }

    pub fn make_env(&self, episode: &EpisodeSpec, h_img: usize) -> Result<NavEnv, WorldError> {
        let world = self
            .world(&episode.scene_id)
            .ok_or_else(|| WorldError::InvalidParameter(format!("unknown scene {}", episode.scene_id)))?;
        NavEnv::new(Arc::clone(world), episode.clone(), h_img)
    }
}

/// One running navigation episode.
#[derive(Debug, Clone)]
pub struct NavEnv {
    world: Arc<World>,
    episode: EpisodeSpec,
    field: GoalField,
    agent_cam: CameraParams,
    h_img: usize,
    pose: Pose,
    steps: u32,
    forward_moves: u32,
    d: f64,
    alpha: f64,
    done: bool,
    success: bool,
    trajectory: Vec<Pose>,
    goal_image: Observation,
    observation: Observation,
}

impl NavEnv {
    /// Starts `episode`; the agent camera is 90° wide with as many rays as
    /// the goal camera.
    pub fn new(world: Arc<World>, episode: EpisodeSpec, h_img: usize) -> Result<Self, WorldError> {
        if episode.scene_id != world.scene().scene_id {
            return Err(WorldError::InvalidParameter(format!(
                "episode {} belongs to scene {}, not {}",
                episode.episode_id,
                episode.scene_id,
                world.scene().scene_id
            )));
        }
        if h_img == 0 {
            return Err(WorldError::InvalidParameter("image height must be positive".into()));
        }
        episode.goal_camera.validate()?;
        let scene = world.scene();
        for p in [&episode.start, &episode.goal] {
            if !scene.is_free_point(p.x, p.y) {
                return Err(WorldError::NotFree { x: p.x, y: p.y });
            }
        }
        let field = world.goal_field(&episode.goal);
        let agent_cam = CameraParams::agent(episode.goal_camera.n_rays);
        let pose = episode.start;
        let d = field.distance_from(scene, world.graph(), pose.position());
        if !d.is_finite() {
            return Err(WorldError::Unreachable { scene_id: scene.scene_id.clone() });
        }
        let goal_image = render(scene, &episode.goal, &episode.goal_camera, h_img);
        let observation = render(scene, &pose, &agent_cam, h_img);
        let alpha = angle_to_goal(&pose, &episode.goal);
        Ok(Self {
            field,
            agent_cam,
            h_img,
            pose,
            steps: 0,
            forward_moves: 0,
            d,
            alpha,
            done: false,
            success: false,
            trajectory: vec![pose],
            goal_image,
            observation,
            episode,
            world,
        })
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome, WorldError> {
        if self.done {
            return Err(WorldError::InvalidParameter(format!("episode {} already finished", self.episode.episode_id)));
        }
        let scene = self.world.scene();
        let (pose, collided) = apply_action(scene, &self.pose, action);
        self.steps += 1;
        if action == Action::Forward && !collided {
            self.forward_moves += 1;
        }
        if pose.x != self.pose.x || pose.y != self.pose.y {
            self.d = self.field.distance_from(scene, self.world.graph(), pose.position());
        }
        self.pose = pose;
        self.alpha = angle_to_goal(&pose, &self.episode.goal);
        self.trajectory.push(pose);
        if action == Action::Stop {
            self.done = true;
            self.success = self.d <= SUCCESS_DISTANCE;
        } else if self.steps >= MAX_STEPS {
            self.done = true;
        }
        let mut observation = render(scene, &pose, &self.agent_cam, self.h_img);
        observation.step_index = self.steps;
        self.observation = observation.clone();
        Ok(StepOutcome {
            observation,
            d_t: self.d,
            alpha_t: self.alpha,
            done: self.done,
            success: self.success,
            collided,
        })
    }

    pub fn world(&self) -> &Arc<World> {
        &self.world
    }

    pub fn episode(&self) -> &EpisodeSpec {
        &self.episode
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn distance(&self) -> f64 {
        self.d
    }

    pub fn angle(&self) -> f64 {
        self.alpha
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn is_success(&self) -> bool {
        self.success
    }

    /// Meters travelled: one forward step per uncollided forward action.
    pub fn path_length(&self) -> f64 {
        FORWARD_STEP * self.forward_moves as f64
    }

    pub fn trajectory(&self) -> &[Pose] {
        &self.trajectory
    }

    pub fn observation(&self) -> &Observation {
        &self.observation
    }

    pub fn goal_image(&self) -> &Observation {
        &self.goal_image
    }

    /// Geodesic distance from `(x, y)` to the goal.
    pub fn distance_at(&self, x: f64, y: f64) -> f64 {
        self.field.distance_from(self.world.scene(), self.world.graph(), (x, y))
    }

    /// Next point on a shortest path to the goal.
    pub fn next_waypoint(&self) -> Option<(f64, f64)> {
        self.field.next_waypoint(self.world.scene(), self.world.graph(), self.pose.position())
    }
}

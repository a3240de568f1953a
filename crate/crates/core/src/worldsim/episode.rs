use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::camera::{sample_goal_camera, CameraParams, GoalCameraSetting};
use super::env::World;
use super::kinematics::TURN_ANGLE;
use super::pose::Pose;
use super::WorldError;

/// Episodes whose start already lies within this geodesic range of the goal
/// are discarded.
pub const MIN_GEODESIC: f64 = 1.0;
const MAX_SAMPLE_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub scene_id: String,
    pub start: Pose,
    pub goal: Pose,
    pub goal_camera: CameraParams,
    pub geodesic_length: f64,
    pub episode_id: u64,
}

impl EpisodeSpec {
    fn check(&self) -> Result<(), String> {
        if !(self.geodesic_length.is_finite() && self.geodesic_length > 0.0) {
            return Err(format!("geodesic_length {} must be finite and positive", self.geodesic_length));
        }
        for (name, p) in [("start", &self.start), ("goal", &self.goal)] {
            if !(0.0..std::f64::consts::TAU).contains(&p.theta) || !p.x.is_finite() || !p.y.is_finite() {
                return Err(format!("{name} pose {p:?} is malformed"));
            }
        }
        self.goal_camera.validate().map_err(|e| e.to_string())
    }
}

fn random_heading<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0..12) as f64 * TURN_ANGLE
}

/// Draws start and goal at free cell centers with headings on the 30° grid,
/// keeping only pairs more than [`MIN_GEODESIC`] apart.
pub fn sample_episode<R: Rng + ?Sized>(
    world: &World,
    setting: GoalCameraSetting,
    n_rays: usize,
    episode_id: u64,
    rng: &mut R,
) -> Result<EpisodeSpec, WorldError> {
    let scene = world.scene();
    let free = scene.free_cells();
    if free.len() < 2 {
        return Err(WorldError::InvalidScene(format!("scene {} has fewer than two free cells", scene.scene_id)));
    }
    for _ in 0..MAX_SAMPLE_TRIES {
        let (sx, sy) = free[rng.random_range(0..free.len())];
        let (gx, gy) = free[rng.random_range(0..free.len())];
        let (sx, sy) = scene.cell_center(sx, sy);
        let (gx, gy) = scene.cell_center(gx, gy);
        let start = Pose::new(sx, sy, random_heading(rng));
        let goal = Pose::new(gx, gy, random_heading(rng));
        let geodesic_length = world.geodesic(&start, &goal)?;
        if geodesic_length > MIN_GEODESIC {
            let goal_camera = sample_goal_camera(setting, n_rays, rng);
            return Ok(EpisodeSpec {
                scene_id: scene.scene_id.clone(),
                start,
                goal,
                goal_camera,
                geodesic_length,
                episode_id,
            });
        }
    }
    Err(WorldError::InvalidScene(format!(
        "scene {} has no start/goal pair farther than {MIN_GEODESIC} m",
        scene.scene_id
    )))
}

/// `count` episodes with consecutive ids starting at `first_id`.
pub fn sample_episodes<R: Rng + ?Sized>(
    world: &World,
    setting: GoalCameraSetting,
    n_rays: usize,
    count: usize,
    first_id: u64,
    rng: &mut R,
) -> Result<Vec<EpisodeSpec>, WorldError> {
    (0..count as u64).map(|i| sample_episode(world, setting, n_rays, first_id + i, rng)).collect()
}

/// Writes one JSON record per line.
pub fn write_episodes(path: &Path, episodes: &[EpisodeSpec]) -> Result<(), WorldError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for ep in episodes {
        serde_json::to_writer(&mut out, ep)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeSpec>, WorldError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut episodes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| WorldError::EpisodeFile { line: i + 1, message };
        let ep: EpisodeSpec = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        ep.check().map_err(bad)?;
        episodes.push(ep);
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::generate_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world() -> World {
        World::new(generate_scene(3, 12, 0.2).unwrap())
    }

    #[test]
    fn sampled_episodes_satisfy_invariants() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = sample_episodes(&w, GoalCameraSetting::UserMatched, 32, 50, 100, &mut rng).unwrap();
        for (k, ep) in eps.iter().enumerate() {
            assert_eq!(ep.episode_id, 100 + k as u64);
            assert!(ep.geodesic_length > MIN_GEODESIC && ep.geodesic_length.is_finite());
            assert!(w.scene().is_free_point(ep.start.x, ep.start.y));
            assert!(w.scene().is_free_point(ep.goal.x, ep.goal.y));
            assert!(ep.geodesic_length >= ep.start.distance_to(&ep.goal) - 1e-12);
            assert_eq!(ep.goal_camera.n_rays, 32);
            let k = ep.start.theta / TURN_ANGLE;
            assert!((k - k.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps = sample_episodes(&w, GoalCameraSetting::Extreme, 16, 5, 0, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eps.jsonl");
        write_episodes(&path, &eps).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(read_episodes(&path).unwrap(), eps);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ep = sample_episode(&w, GoalCameraSetting::AgentMatched, 16, 0, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eps.jsonl");
        ep.geodesic_length = -1.0;
        let good = serde_json::to_string(&EpisodeSpec { geodesic_length: 2.0, ..ep.clone() }).unwrap();
        let bad = serde_json::to_string(&ep).unwrap();
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match read_episodes(&path) {
            Err(WorldError::EpisodeFile { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "{\"scene_id\": 3}\n").unwrap();
        assert!(matches!(read_episodes(&path), Err(WorldError::EpisodeFile { line: 1, .. })));
    }
}

use std::f64::consts::FRAC_PI_6;

use serde::{Deserialize, Serialize};

use super::geodesic::segment_clear;
use super::pose::Pose;
use super::render::Observation;
use super::scene::SceneGrid;

pub const FORWARD_STEP: f64 = 0.25;
pub const TURN_ANGLE: f64 = FRAC_PI_6;
pub const SUCCESS_DISTANCE: f64 = 1.0;
pub const MAX_STEPS: u32 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forward,
    Left,
    Right,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Forward, Action::Left, Action::Right, Action::Stop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    /// Geodesic distance to the goal after the step.
    pub d_t: f64,
    /// Heading error against the goal view, in `[0, π]`.
    pub alpha_t: f64,
    pub done: bool,
    pub success: bool,
    pub collided: bool,
}

/// Pure kinematics. Returns the new pose and whether a forward move was
/// blocked; blocked moves leave the pose unchanged.
pub fn apply_action(scene: &SceneGrid, pose: &Pose, action: Action) -> (Pose, bool) {
    match action {
        Action::Forward => {
            let nx = pose.x + FORWARD_STEP * pose.theta.cos();
            let ny = pose.y + FORWARD_STEP * pose.theta.sin();
            if scene.is_free_point(nx, ny) && segment_clear(scene, pose.position(), (nx, ny)) {
                (Pose { x: nx, y: ny, theta: pose.theta }, false)
            } else {
                (*pose, true)
            }
        }
        Action::Left => (Pose::new(pose.x, pose.y, pose.theta + TURN_ANGLE), false),
        Action::Right => (Pose::new(pose.x, pose.y, pose.theta - TURN_ANGLE), false),
        Action::Stop => (*pose, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn forward_in_open_space() {
        let s = SceneGrid::empty_room(16, 16, 0.25);
        let (p, hit) = apply_action(&s, &Pose::new(2.0, 2.0, 0.0), Action::Forward);
        assert!(!hit);
        assert_eq!((p.x, p.y, p.theta), (2.25, 2.0, 0.0));
    }

    #[test]
    fn turns_are_thirty_degrees() {
        let s = SceneGrid::empty_room(16, 16, 0.25);
        let (p, _) = apply_action(&s, &Pose::new(2.0, 2.0, 0.0), Action::Left);
        assert!((p.theta - std::f64::consts::PI / 6.0).abs() < 1e-15);
        let (p, _) = apply_action(&s, &Pose::new(2.0, 2.0, 0.0), Action::Right);
        assert!((p.theta - 11.0 * std::f64::consts::PI / 6.0).abs() < 1e-12);
    }

    #[test]
    fn blocked_forward_keeps_pose() {
        let s = SceneGrid::empty_room(8, 8, 0.25);
        let start = Pose::new(1.85, 1.0, 0.0);
        let (p, hit) = apply_action(&s, &start, Action::Forward);
        assert!(hit);
        assert_eq!(p, start);
    }

    #[test]
    fn action_indices_round_trip() {
        for a in Action::ALL {
            assert_eq!(Action::from_index(a.index()), Some(a));
        }
        assert_eq!(Action::from_index(4), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn random_walks_never_enter_walls(seed in 0u64..1000, actions in prop::collection::vec(0usize..3, 10_000)) {
            let s = crate::worldsim::generate_scene(seed, 12, 0.3).unwrap();
            let (cx, cy) = s.free_cells()[0];
            let (x, y) = s.cell_center(cx, cy);
            let mut pose = Pose::new(x, y, 0.0);
            for a in actions {
                pose = apply_action(&s, &pose, Action::from_index(a).unwrap()).0;
                prop_assert!(s.is_free_point(pose.x, pose.y));
            }
        }
    }
}

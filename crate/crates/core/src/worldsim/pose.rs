use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

/// Planar position in meters plus heading in radians, wrapped to `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta) }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Wraps into `[0, 2π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Signed difference wrapped into `[-π, π]`.
pub fn wrap_pi(delta: f64) -> f64 {
    let w = wrap_angle(delta + PI) - PI;
    if w < -PI {
        w + TAU
    } else {
        w
    }
}

/// Heading error between the agent and the goal view, folded into `[0, π]`.
pub fn angle_to_goal(pose: &Pose, goal: &Pose) -> f64 {
    wrap_pi(pose.theta - goal.theta).abs().min(PI)
}

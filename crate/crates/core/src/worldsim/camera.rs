use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::WorldError;

/// Planar camera. Height and pitch have no 2D counterpart; they are
/// represented by a vertical texture stretch (`v_scale`) and a yaw offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraParams {
    pub hfov: f64,
    pub n_rays: usize,
    pub v_scale: f64,
    pub yaw_offset: f64,
}

impl CameraParams {
    /// The agent's own camera: 90° HFOV, no stretch, no yaw offset.
    pub fn agent(n_rays: usize) -> Self {
        Self { hfov: FRAC_PI_2, n_rays, v_scale: 1.0, yaw_offset: 0.0 }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if !(self.hfov > 0.0 && self.hfov <= std::f64::consts::PI) {
            return Err(WorldError::InvalidParameter(format!("hfov {} outside (0, π]", self.hfov)));
        }
        if self.n_rays < 8 {
            return Err(WorldError::InvalidParameter(format!("n_rays {} < 8", self.n_rays)));
        }
        if !(self.v_scale > 0.0 && self.v_scale.is_finite()) {
            return Err(WorldError::InvalidParameter(format!("v_scale {} must be positive", self.v_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalCameraSetting {
    AgentMatched,
    UserMatched,
    Extreme,
}

impl GoalCameraSetting {
    pub const ALL: [GoalCameraSetting; 3] = [Self::AgentMatched, Self::UserMatched, Self::Extreme];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::AgentMatched => "agent_matched",
            Self::UserMatched => "user_matched",
            Self::Extreme => "extreme",
        }
    }
}

impl fmt::Display for GoalCameraSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GoalCameraSetting {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "agent_matched" => Ok(Self::AgentMatched),
            "user_matched" => Ok(Self::UserMatched),
            "extreme" => Ok(Self::Extreme),
            other => Err(WorldError::InvalidParameter(format!("unknown goal-camera setting `{other}`"))),
        }
    }
}

/// Draws goal-camera parameters for a setting. `agent_matched` copies the
/// agent camera; the user settings draw HFOV from U(60°, 120°), v_scale
/// from U(0.8, 1.5) and yaw offset from U(−5°, 5°) (`user_matched`) or
/// U(−45°, 45°) (`extreme`).
pub fn sample_goal_camera<R: Rng + ?Sized>(setting: GoalCameraSetting, n_rays: usize, rng: &mut R) -> CameraParams {
    let yaw_limit = match setting {
        GoalCameraSetting::AgentMatched => return CameraParams::agent(n_rays),
        GoalCameraSetting::UserMatched => 5f64.to_radians(),
        GoalCameraSetting::Extreme => 45f64.to_radians(),
    };
    let hfov = rng.random_range(60f64.to_radians()..=120f64.to_radians());
    let v_scale = rng.random_range(0.8..=1.5);
    let yaw_offset = rng.random_range(-yaw_limit..=yaw_limit);
    CameraParams { hfov, n_rays, v_scale, yaw_offset }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn agent_matched_copies_the_agent_camera() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = sample_goal_camera(GoalCameraSetting::AgentMatched, 32, &mut rng);
        assert_eq!(c.hfov, FRAC_PI_2);
        assert_eq!(c.v_scale, 1.0);
        assert_eq!(c.yaw_offset, 0.0);
    }

    #[test]
    fn user_matched_ranges_hold_over_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<_> =
            (0..10_000).map(|_| sample_goal_camera(GoalCameraSetting::UserMatched, 32, &mut rng)).collect();
        let min = draws.iter().map(|c| c.hfov).fold(f64::INFINITY, f64::min);
        let max = draws.iter().map(|c| c.hfov).fold(f64::NEG_INFINITY, f64::max);
        assert!(min >= 60f64.to_radians() && max <= 120f64.to_radians());
        // the draw should actually spread over the interval
        assert!(min < 62f64.to_radians() && max > 118f64.to_radians());
        assert!(draws.iter().all(|c| (0.8..=1.5).contains(&c.v_scale)));
        assert!(draws.iter().all(|c| c.yaw_offset.abs() <= 5f64.to_radians()));
        assert!(draws.iter().all(|c| c.validate().is_ok()));
    }

    #[test]
    fn extreme_yaw_stays_within_45_degrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut widest: f64 = 0.0;
        for _ in 0..10_000 {
            let c = sample_goal_camera(GoalCameraSetting::Extreme, 32, &mut rng);
            assert!(c.yaw_offset.abs() <= 45f64.to_radians());
            widest = widest.max(c.yaw_offset.abs());
        }
        assert!(widest > 40f64.to_radians());
    }

    #[test]
    fn setting_names_parse() {
        for s in GoalCameraSetting::ALL {
            assert_eq!(s.as_str().parse::<GoalCameraSetting>().unwrap(), s);
        }
        assert!("sideways".parse::<GoalCameraSetting>().is_err());
    }
}

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Per-step slack penalty.
    pub gamma_slack: f64,
    /// Distance below which the angle term and terminal bonus apply, meters.
    pub d_s: f64,
    /// Heading tolerance for the second terminal bonus, degrees.
    pub alpha_s_deg: f64,
    pub terminal_bonus: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { gamma_slack: 0.01, d_s: 1.0, alpha_s_deg: 25.0, terminal_bonus: 5.0 }
    }
}

impl RewardConfig {
    pub fn alpha_s(&self) -> f64 {
        self.alpha_s_deg.to_radians()
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("gamma_slack", self.gamma_slack),
            ("d_s", self.d_s),
            ("alpha_s_deg", self.alpha_s_deg),
            ("terminal_bonus", self.terminal_bonus),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("reward.{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// `(d_prev - d_t) + [d_t <= d_s] (alpha_prev - alpha_t) - gamma`.
pub fn step_reward(d_t: f64, d_prev: f64, alpha_t: f64, alpha_prev: f64, cfg: &RewardConfig) -> f64 {
    let r_d = d_prev - d_t;
    let r_a = if d_t <= cfg.d_s { alpha_prev - alpha_t } else { 0.0 };
    r_d + r_a - cfg.gamma_slack
}

/// Terminal reward: one bonus for stopping within `d_s`, a second when the
/// heading is also within `alpha_s`.
pub fn final_reward(d_t: f64, alpha_t: f64, cfg: &RewardConfig) -> f64 {
    let near = d_t <= cfg.d_s;
    let aligned = near && alpha_t <= cfg.alpha_s();
    cfg.terminal_bonus * (near as u8 as f64 + aligned as u8 as f64)
}

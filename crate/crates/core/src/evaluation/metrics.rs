use serde::{Deserialize, Serialize};

use crate::worldsim::Pose;

/// Outcome of one evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: u64,
    pub success: bool,
    pub path_length: f64,
    pub geodesic_length: f64,
    pub final_d: f64,
    pub final_alpha: f64,
    pub steps: u32,
    pub trajectory: Vec<Pose>,
}

impl EpisodeResult {
    /// `S * l / max(p, l)`.
    pub fn spl_term(&self) -> f64 {
        if self.success {
            self.geodesic_length / self.path_length.max(self.geodesic_length)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub sr: f64,
    pub spl: f64,
    pub mean_final_d: f64,
    pub mean_final_alpha: f64,
    pub n_episodes: usize,
    pub seed_set: Vec<u64>,
}

/// Success weighted by path length, averaged over episodes. Empty input gives 0.
pub fn spl(results: &[EpisodeResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().map(EpisodeResult::spl_term).sum::<f64>() / results.len() as f64
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn summarize(results: &[EpisodeResult], seeds: &[u64]) -> MetricSummary {
    MetricSummary {
        sr: mean(results.iter().map(|r| r.success as u8 as f64)),
        spl: spl(results),
        mean_final_d: mean(results.iter().map(|r| r.final_d)),
        mean_final_alpha: mean(results.iter().map(|r| r.final_alpha)),
        n_episodes: results.len(),
        seed_set: seeds.to_vec(),
    }
}

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::run::evaluate_seeds;
use super::{EvalError, NetController};
use crate::correlation::CueVariant;
use crate::policy::NetConfig;
use crate::training::{train, PpoConfig, RewardConfig, TrainConfig, UpdateLog};
use crate::worldsim::{EpisodePool, EpisodeSpec, GoalCameraSetting};

/// Variants x seeds to train, and settings to evaluate each run under.
#[derive(Debug, Clone)]
pub struct AblationPlan {
    pub variants: Vec<CueVariant>,
    pub seeds: Vec<u64>,
    /// Network layout shared by all variants; its `variant` is replaced.
    pub net: NetConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub train: TrainConfig,
    pub eval_batch: usize,
}

/// One cell of the variant x setting grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: CueVariant,
    pub setting: GoalCameraSetting,
    pub sr_mean: f64,
    pub sr_std: f64,
    pub spl_mean: f64,
    pub spl_std: f64,
    pub n_seeds: usize,
    pub n_episodes: usize,
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Trains every variant under every seed with the same budget, then scores
/// each run greedily on each test set. Runs are written to
/// `out_dir/{variant}/seed_{seed}`.
pub fn ablation_run(
    plan: &AblationPlan,
    train_pool: Arc<EpisodePool>,
    test_pool: &EpisodePool,
    test_sets: &[(GoalCameraSetting, Vec<EpisodeSpec>)],
    out_dir: &Path,
    on_update: &mut dyn FnMut(CueVariant, u64, &UpdateLog),
) -> Result<Vec<AblationCell>, EvalError> {
    let mut cells = Vec::new();
    for &variant in &plan.variants {
        let net = NetConfig { variant, ..plan.net.clone() };
        // scores[setting][seed]
        let mut sr = vec![Vec::new(); test_sets.len()];
        let mut spl = vec![Vec::new(); test_sets.len()];
        for &seed in &plan.seeds {
            let dir = out_dir.join(variant.as_str()).join(format!("seed_{seed}"));
            std::fs::create_dir_all(&dir)?;
            let outcome =
                train(Arc::clone(&train_pool), &net, &plan.reward, &plan.ppo, &plan.train, seed, &dir, &mut |l| {
                    on_update(variant, seed, l)
                })?;
            let store = Arc::new(outcome.params);
            for (k, (_, episodes)) in test_sets.iter().enumerate() {
                let report = evaluate_seeds(test_pool, episodes, net.image_size, plan.eval_batch, &[seed], |_| {
                    NetController::new(Arc::clone(&store), net.clone())
                })?;
                sr[k].push(report.mean.sr);
                spl[k].push(report.mean.spl);
            }
        }
        for (k, (setting, episodes)) in test_sets.iter().enumerate() {
            let (sr_mean, sr_std) = mean_std(&sr[k]);
            let (spl_mean, spl_std) = mean_std(&spl[k]);
            cells.push(AblationCell {
                variant,
                setting: *setting,
                sr_mean,
                sr_std,
                spl_mean,
                spl_std,
                n_seeds: plan.seeds.len(),
                n_episodes: episodes.len(),
            });
        }
    }
    Ok(cells)
}

pub fn write_ablation_csv(path: &Path, cells: &[AblationCell]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

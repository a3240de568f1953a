use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ppo::{ppo_update, PpoConfig};
use super::reward::RewardConfig;
use super::rollout::Collector;
use super::TrainError;
use crate::evaluation::{run_episodes, NetController};
use crate::numkit::checkpoint::{self, Checkpoint};
use crate::numkit::optim::Adam;
use crate::numkit::ParamStore;
use crate::policy::{check_layout, init_network, NetConfig};
use crate::seed::rng_for;
use crate::worldsim::{EpisodePool, EpisodeSpec};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_env_steps: u64,
    /// Write `ckpt_{update}.bin` every this many updates (0 disables).
    pub checkpoint_every: u64,
    /// Stop once the success rate reaches this value: the greedy
    /// validation rate when validation is on, else the rate over the last
    /// 100 training episodes.
    pub target_sr: Option<f64>,
    /// Greedy validation on training episodes every this many updates
    /// (0 disables). When on, `best.bin` tracks the validation rate.
    pub eval_every: u64,
    /// Training episodes used for validation, spread evenly over the pool.
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { total_env_steps: 2_000_000, checkpoint_every: 50, target_sr: None, eval_every: 0, eval_episodes: 100 }
    }
}

/// Metadata stored alongside the parameters of a saved policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    pub update: u64,
    pub env_steps: u64,
    pub sr_last100: Option<f64>,
    #[serde(default)]
    pub val_sr: Option<f64>,
}

pub fn save_model(path: &Path, meta: &CheckpointMeta, params: &ParamStore<f32>) -> Result<(), TrainError> {
    let ckpt = Checkpoint { meta: serde_json::to_string(meta)?, params: params.clone() };
    checkpoint::save(path, &ckpt)?;
    Ok(())
}

/// Loads a policy and checks its parameters against the stored config.
pub fn load_model(path: &Path) -> Result<(CheckpointMeta, ParamStore<f32>), TrainError> {
    let fail = |message: String| TrainError::Checkpoint { path: path.display().to_string(), message };
    let ckpt = checkpoint::load(path).map_err(|e| fail(e.to_string()))?;
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta).map_err(|e| fail(format!("bad metadata: {e}")))?;
    meta.net.validate().map_err(fail)?;
    check_layout(&meta.net, &ckpt.params).map_err(fail)?;
    Ok((meta, ckpt.params))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update: u64,
    pub env_steps: u64,
    pub episodes: u64,
    /// Mean return of the episodes finished during this update.
    pub mean_episode_reward: Option<f64>,
    pub sr_last100: Option<f64>,
    /// Greedy success rate on validation episodes, on validation updates.
    pub val_sr: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub updates: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub sr_last100: Option<f64>,
    pub val_sr: Option<f64>,
    pub params: ParamStore<f32>,
}

fn validation_episodes(pool: &EpisodePool, n: usize) -> Vec<EpisodeSpec> {
    let all = pool.episodes();
    let n = n.min(all.len());
    (0..n).map(|i| all[i * all.len() / n].clone()).collect()
}

/// Greedy success rate of `params` on `episodes`.
fn validate(
    pool: &EpisodePool,
    episodes: &[EpisodeSpec],
    net: &NetConfig,
    params: &ParamStore<f32>,
) -> Result<f64, TrainError> {
    let store = Arc::new(params.clone());
    let results =
        run_episodes(pool, episodes, net.image_size, 32, || NetController::new(Arc::clone(&store), net.clone()))
            .map_err(|e| TrainError::Validation(e.to_string()))?;
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

/// Trains a policy from scratch, writing the log and checkpoints under
/// `out_dir`. Seed streams: `"init"`, `"ppo"` and those of [`Collector`].
#[allow(clippy::too_many_arguments)]
pub fn train(
    pool: Arc<EpisodePool>,
    net: &NetConfig,
    reward: &RewardConfig,
    ppo: &PpoConfig,
    cfg: &TrainConfig,
    seed: u64,
    out_dir: &Path,
    on_update: &mut dyn FnMut(&UpdateLog),
) -> Result<TrainOutcome, TrainError> {
    net.validate().map_err(TrainError::Config)?;
    ppo.validate().map_err(TrainError::Config)?;
    reward.validate().map_err(TrainError::Config)?;
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)?;
    let mut log = BufWriter::new(File::create(out_dir.join(LOG_FILE))?);

    let mut params = init_network::<f32, _>(net, &mut rng_for(seed, "init"));
    let mut adam = Adam::new(ppo.lr);
    let mut ppo_rng = rng_for(seed, "ppo");
    let val_eps = if cfg.eval_every > 0 { validation_episodes(&pool, cfg.eval_episodes) } else { Vec::new() };
    let mut collector = Collector::new(Arc::clone(&pool), net, ppo.num_envs, reward.clone(), seed)?;

    let per_update = (ppo.horizon * ppo.num_envs) as u64;
    let updates = cfg.total_env_steps.div_ceil(per_update).max(1);
    let mut recent: VecDeque<bool> = VecDeque::with_capacity(100);
    let mut best_sr = f64::NEG_INFINITY;
    let mut env_steps = 0;
    let mut episodes = 0;
    let mut done_updates = 0;
    let mut sr_last100 = None;
    let mut last_val = None;

    for update in 1..=updates {
        let batch = collector.collect(&params, net, ppo.horizon)?;
        env_steps += per_update;
        let stats = ppo_update(&mut params, &mut adam, net, &batch, ppo, &mut ppo_rng)?;
        let finished = collector.drain_finished();
        episodes += finished.len() as u64;
        for ep in &finished {
            if recent.len() == 100 {
                recent.pop_front();
            }
            recent.push_back(ep.success);
        }
        let mean_episode_reward = (!finished.is_empty())
            .then(|| finished.iter().map(|e| e.total_reward).sum::<f64>() / finished.len() as f64);
        sr_last100 = (!recent.is_empty()).then(|| recent.iter().filter(|&&s| s).count() as f64 / recent.len() as f64);
        let val_sr = if cfg.eval_every > 0 && (update % cfg.eval_every == 0 || update == updates) {
            Some(validate(&pool, &val_eps, net, &params)?)
        } else {
            None
        };
        last_val = val_sr.or(last_val);
        let line = UpdateLog {
            update,
            env_steps,
            episodes,
            mean_episode_reward,
            sr_last100,
            val_sr,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            grad_norm: stats.grad_norm,
        };
        serde_json::to_writer(&mut log, &line)?;
        log.write_all(b"\n")?;
        log.flush()?;
        on_update(&line);
        done_updates = update;

        let meta = CheckpointMeta { net: net.clone(), update, env_steps, sr_last100, val_sr };
        if cfg.checkpoint_every > 0 && update % cfg.checkpoint_every == 0 {
            save_model(&ckpt_dir.join(format!("ckpt_{update:06}.bin")), &meta, &params)?;
        }
        let (score, reached) = if cfg.eval_every > 0 {
            (val_sr, val_sr.zip(cfg.target_sr).is_some_and(|(sr, t)| sr >= t))
        } else {
            (sr_last100, sr_last100.zip(cfg.target_sr).is_some_and(|(sr, t)| recent.len() == 100 && sr >= t))
        };
        if let Some(sr) = score {
            if sr > best_sr {
                best_sr = sr;
                save_model(&ckpt_dir.join("best.bin"), &meta, &params)?;
            }
        }
        if reached {
            break;
        }
    }
    let meta = CheckpointMeta { net: net.clone(), update: done_updates, env_steps, sr_last100, val_sr: last_val };
    save_model(&ckpt_dir.join("last.bin"), &meta, &params)?;
    Ok(TrainOutcome { updates: done_updates, env_steps, episodes, sr_last100, val_sr: last_val, params })
}

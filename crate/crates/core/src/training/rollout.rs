use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::reward::{final_reward, step_reward, RewardConfig};
use super::TrainError;
use crate::numkit::{Graph, ParamStore, Tensor};
use crate::perception::images_to_tensor;
use crate::policy::{self, pick_action, ActionMode, NetConfig, PolicyState, START_TOKEN};
use crate::seed::rng_for;
use crate::worldsim::{Action, EpisodePool, NavEnv, Observation};

/// Summary of an episode finished during collection.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStats {
    pub episode_id: u64,
    pub total_reward: f64,
    pub success: bool,
    pub steps: u32,
    pub spl: f64,
}

/// Fixed-horizon trajectories, time-major: row `t * envs + e`.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub steps: usize,
    pub envs: usize,
    pub image_size: usize,
    /// `[steps * envs, 3, S, S]` observation images.
    pub obs: Vec<f32>,
    /// Goal images of every episode seen, each `[3, S, S]`.
    pub goal_images: Vec<Vec<f32>>,
    /// Row -> index into `goal_images`.
    pub goal_index: Vec<usize>,
    pub prev_actions: Vec<usize>,
    pub starts: Vec<bool>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f32>,
    pub values: Vec<f32>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Hidden state entering step 0, `[layers, envs, H]`.
    pub h0: Tensor<f32>,
    /// Critic values of the states following the last step.
    pub last_values: Vec<f32>,
}

impl RolloutBatch {
    fn new(steps: usize, envs: usize, image_size: usize, h0: Tensor<f32>) -> Self {
        let rows = steps * envs;
        Self {
            steps,
            envs,
            image_size,
            obs: Vec::with_capacity(rows * 3 * image_size * image_size),
            goal_images: Vec::new(),
            goal_index: Vec::with_capacity(rows),
            prev_actions: Vec::with_capacity(rows),
            starts: Vec::with_capacity(rows),
            actions: Vec::with_capacity(rows),
            log_probs: Vec::with_capacity(rows),
            values: Vec::with_capacity(rows),
            rewards: Vec::with_capacity(rows),
            dones: Vec::with_capacity(rows),
            h0,
            last_values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.steps * self.envs
    }

    pub fn image_len(&self) -> usize {
        3 * self.image_size * self.image_size
    }
}

struct Slot {
    env: NavEnv,
    episode_rng: ChaCha8Rng,
    goal_features: Option<Tensor<f32>>,
    goal_id: usize,
    prev_action: usize,
    start: bool,
    total_reward: f64,
}

struct StepResult {
    reward: f64,
    done: bool,
    finished: Option<EpisodeStats>,
}

impl Slot {
    fn step(&mut self, action: Action, reward_cfg: &RewardConfig) -> Result<StepResult, TrainError> {
        let (d_prev, a_prev) = (self.env.distance(), self.env.angle());
        let out = self.env.step(action)?;
        let mut reward = step_reward(out.d_t, d_prev, out.alpha_t, a_prev, reward_cfg);
        if out.done {
            reward += final_reward(out.d_t, out.alpha_t, reward_cfg);
        }
        self.total_reward += reward;
        self.prev_action = action.index();
        self.start = false;
        let finished = out.done.then(|| {
            let ep = self.env.episode();
            let spl =
                if out.success { ep.geodesic_length / self.env.path_length().max(ep.geodesic_length) } else { 0.0 };
            EpisodeStats {
                episode_id: ep.episode_id,
                total_reward: self.total_reward,
                success: out.success,
                steps: self.env.steps(),
                spl,
            }
        });
        Ok(StepResult { reward, done: out.done, finished })
    }

    fn restart(&mut self, pool: &EpisodePool, h_img: usize) -> Result<(), TrainError> {
        let i = self.episode_rng.random_range(0..pool.len());
        self.env = pool.make_env(&pool.episodes()[i], h_img)?;
        self.goal_features = None;
        self.prev_action = START_TOKEN;
        self.start = true;
        self.total_reward = 0.0;
        Ok(())
    }
}

/// Steps `num_envs` environments with a shared policy and records
/// trajectories. Finished episodes restart on a uniformly drawn episode.
pub struct Collector {
    pool: Arc<EpisodePool>,
    h_img: usize,
    slots: Vec<Slot>,
    hidden: Tensor<f32>,
    action_rng: ChaCha8Rng,
    reward: RewardConfig,
    finished: Vec<EpisodeStats>,
}

impl Collector {
    /// Streams: `"episodes/{e}"` per environment, `"actions"` for sampling.
    pub fn new(
        pool: Arc<EpisodePool>,
        net: &NetConfig,
        num_envs: usize,
        reward: RewardConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if pool.is_empty() {
            return Err(TrainError::Config("no training episodes".into()));
        }
        if num_envs == 0 {
            return Err(TrainError::Config("num_envs must be positive".into()));
        }
        let h_img = net.image_size;
        let mut slots = Vec::with_capacity(num_envs);
        for e in 0..num_envs {
            let mut episode_rng = rng_for(seed, &format!("episodes/{e}"));
            let i = episode_rng.random_range(0..pool.len());
            let env = pool.make_env(&pool.episodes()[i], h_img)?;
            if env.observation().width != net.image_size {
                return Err(TrainError::Config(format!(
                    "episode goal cameras have {} rays but the network expects {}x{} images",
                    env.observation().width,
                    net.image_size,
                    net.image_size
                )));
            }
            slots.push(Slot {
                env,
                episode_rng,
                goal_features: None,
                goal_id: 0,
                prev_action: START_TOKEN,
                start: true,
                total_reward: 0.0,
            });
        }
        Ok(Self {
            pool,
            h_img,
            slots,
            hidden: PolicyState::<f32>::zeros(&net.policy, num_envs).hidden,
            action_rng: rng_for(seed, "actions"),
            reward,
            finished: Vec::new(),
        })
    }

    pub fn num_envs(&self) -> usize {
        self.slots.len()
    }

    /// Episodes finished since the last call.
    pub fn drain_finished(&mut self) -> Vec<EpisodeStats> {
        std::mem::take(&mut self.finished)
    }

    fn refresh_goal_features(&mut self, store: &ParamStore<f32>, net: &NetConfig) -> Result<(), TrainError> {
        let need: Vec<usize> = (0..self.slots.len()).filter(|&i| self.slots[i].goal_features.is_none()).collect();
        if need.is_empty() {
            return Ok(());
        }
        let images: Vec<&Observation> = need.iter().map(|&i| self.slots[i].env.goal_image()).collect();
        let mut g = Graph::inference();
        let x = g.constant(images_to_tensor(&images)?);
        let f = policy::encode(&mut g, store, net, x)?;
        let t = g.value(f);
        let per = t.numel() / need.len();
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        for (k, &i) in need.iter().enumerate() {
            let data = t.data()[k * per..(k + 1) * per].to_vec();
            self.slots[i].goal_features = Some(Tensor::new(&shape, data)?);
        }
        Ok(())
    }

    /// Policy outputs for the current observations of all slots:
    /// `(log-probabilities [N, 4], values [N], next hidden)`.
    #[allow(clippy::type_complexity)]
    fn forward(
        &mut self,
        store: &ParamStore<f32>,
        net: &NetConfig,
    ) -> Result<(Tensor<f32>, Vec<f32>, Tensor<f32>), TrainError> {
        self.refresh_goal_features(store, net)?;
        let n = self.slots.len();
        let mut g = Graph::inference();
        let feats: Vec<&Tensor<f32>> =
            self.slots.iter().map(|s| s.goal_features.as_ref().expect("refreshed")).collect();
        let mut shape = feats[0].shape().to_vec();
        shape[0] = n;
        let data = feats.iter().flat_map(|t| t.data().iter().copied()).collect();
        let goal = g.constant(Tensor::new(&shape, data)?);
        let obs: Vec<&Observation> = self.slots.iter().map(|s| s.env.observation()).collect();
        let images = g.constant(images_to_tensor(&obs)?);
        let cue = policy::observe(&mut g, store, net, goal, images)?;
        let prev: Vec<usize> = self.slots.iter().map(|s| s.prev_action).collect();
        let starts: Vec<bool> = self.slots.iter().map(|s| s.start).collect();
        let h0 = g.constant(self.hidden.clone());
        let out = policy::policy_forward(&mut g, store, net, cue, &prev, &starts, h0, 1, n)?;
        let lp = g.log_softmax(out.logits, 1)?;
        let layers: Vec<&Tensor<f32>> = out.final_hidden.iter().map(|&v| g.value(v)).collect();
        let next = PolicyState::from_layers(&layers).hidden;
        Ok((g.value(lp).clone(), g.value(out.values).data().to_vec(), next))
    }

    /// Runs `horizon` steps in every environment.
    pub fn collect(
        &mut self,
        store: &ParamStore<f32>,
        net: &NetConfig,
        horizon: usize,
    ) -> Result<RolloutBatch, TrainError> {
        let n = self.slots.len();
        // goal features depend on the parameters, which changed since the last call
        for s in &mut self.slots {
            s.goal_features = None;
        }
        let mut batch = RolloutBatch::new(horizon, n, net.image_size, self.hidden.clone());
        for s in &mut self.slots {
            s.goal_id = batch.goal_images.len();
            batch.goal_images.push(s.env.goal_image().to_chw());
        }
        for _ in 0..horizon {
            let (lp, values, next_hidden) = self.forward(store, net)?;
            let mut actions = Vec::with_capacity(n);
            for (e, slot) in self.slots.iter().enumerate() {
                let (a, logp) = pick_action(&lp.data()[e * 4..(e + 1) * 4], &mut self.action_rng, ActionMode::Sample);
                batch.obs.extend(slot.env.observation().to_chw());
                batch.goal_index.push(slot.goal_id);
                batch.prev_actions.push(slot.prev_action);
                batch.starts.push(slot.start);
                batch.actions.push(a);
                batch.log_probs.push(logp);
                batch.values.push(values[e]);
                actions.push(Action::from_index(a).expect("4 logits"));
            }
            let reward_cfg = &self.reward;
            let results: Vec<Result<StepResult, TrainError>> =
                self.slots.par_iter_mut().zip(actions.par_iter()).map(|(slot, &a)| slot.step(a, reward_cfg)).collect();
            self.hidden = next_hidden;
            for (e, r) in results.into_iter().enumerate() {
                let r = r?;
                batch.rewards.push(r.reward);
                batch.dones.push(r.done);
                if let Some(stats) = r.finished {
                    self.finished.push(stats);
                    self.slots[e].restart(&self.pool, self.h_img)?;
                    self.slots[e].goal_id = batch.goal_images.len();
                    batch.goal_images.push(self.slots[e].env.goal_image().to_chw());
                }
            }
        }
        let (_, last_values, _) = self.forward(store, net)?;
        batch.last_values = last_values;
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::CueVariant;
    use crate::perception::EncoderConfig;
    use crate::policy::{init_network, PolicyConfig};
    use crate::worldsim::{sample_episodes, CameraParams, EpisodeSpec, GoalCameraSetting, Pose, SceneGrid, World};
    use rand::SeedableRng;

    fn slot_for(start: Pose, goal: Pose) -> Slot {
        let world = Arc::new(World::new(SceneGrid::empty_room(16, 16, 1.0)));
        let ep = EpisodeSpec {
            scene_id: world.scene().scene_id.clone(),
            start,
            goal,
            goal_camera: CameraParams::agent(32),
            geodesic_length: world.geodesic(&start, &goal).unwrap(),
            episode_id: 0,
        };
        Slot {
            env: NavEnv::new(world, ep, 32).unwrap(),
            episode_rng: ChaCha8Rng::seed_from_u64(0),
            goal_features: None,
            goal_id: 0,
            prev_action: START_TOKEN,
            start: true,
            total_reward: 0.0,
        }
    }

    #[test]
    fn forward_toward_goal_earns_distance_minus_slack() {
        let cfg = RewardConfig::default();
        let mut slot = slot_for(Pose::new(2.5, 2.5, 0.0), Pose::new(6.5, 2.5, 0.0));
        // 4 m away, heading exactly at the goal: 12 moves keep d > d_s
        for _ in 0..12 {
            let r = slot.step(Action::Forward, &cfg).unwrap();
            assert!((r.reward - 0.24).abs() < 1e-12, "{}", r.reward);
            assert!(!r.done);
        }
        assert_eq!(slot.prev_action, Action::Forward.index());
        assert!(!slot.start);
    }

    #[test]
    fn immediate_stop_is_one_step_with_slack_only() {
        let cfg = RewardConfig::default();
        let mut slot = slot_for(Pose::new(2.5, 2.5, 0.0), Pose::new(6.5, 2.5, 0.0));
        let r = slot.step(Action::Stop, &cfg).unwrap();
        assert!(r.done);
        assert!((r.reward + 0.01).abs() < 1e-12);
        let stats = r.finished.unwrap();
        assert_eq!(stats.steps, 1);
        assert!(!stats.success);
        assert_eq!(stats.spl, 0.0);
    }

    fn tiny_net() -> NetConfig {
        NetConfig {
            variant: CueVariant::DirectionAware,
            image_size: 32,
            encoder: EncoderConfig { channels: [4, 8, 8, 8], feature_dim: 4, groups: 2 },
            policy: PolicyConfig { hidden: 8, action_embed: 3, layers: 2 },
        }
    }

    fn tiny_pool() -> Arc<EpisodePool> {
        let scene = SceneGrid::empty_room(8, 8, 1.0);
        let world = World::new(scene.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = sample_episodes(&world, GoalCameraSetting::AgentMatched, 32, 6, 0, &mut rng).unwrap();
        Arc::new(EpisodePool::new(vec![scene], eps).unwrap())
    }

    #[test]
    fn batch_fields_have_horizon_by_envs_rows() {
        let net = tiny_net();
        let store = init_network::<f32, _>(&net, &mut ChaCha8Rng::seed_from_u64(1));
        let mut c = Collector::new(tiny_pool(), &net, 3, RewardConfig::default(), 7).unwrap();
        let b = c.collect(&store, &net, 5).unwrap();
        let rows = 15;
        assert_eq!((b.steps, b.envs, b.rows()), (5, 3, rows));
        assert_eq!(b.obs.len(), rows * b.image_len());
        for len in [
            b.goal_index.len(),
            b.prev_actions.len(),
            b.starts.len(),
            b.actions.len(),
            b.log_probs.len(),
            b.values.len(),
            b.rewards.len(),
            b.dones.len(),
        ] {
            assert_eq!(len, rows);
        }
        assert_eq!(b.last_values.len(), 3);
        assert_eq!(b.h0.shape(), &[2, 3, 8]);
        assert!(b.starts[..3].iter().all(|&s| s));
        // a start flag follows every done
        for t in 1..5 {
            for e in 0..3 {
                assert_eq!(b.starts[t * 3 + e], b.dones[(t - 1) * 3 + e]);
                if !b.starts[t * 3 + e] {
                    assert_eq!(b.prev_actions[t * 3 + e], b.actions[(t - 1) * 3 + e]);
                } else {
                    assert_eq!(b.prev_actions[t * 3 + e], START_TOKEN);
                }
            }
        }
        assert!(b.goal_index.iter().all(|&g| g < b.goal_images.len()));
    }

    #[test]
    fn collection_is_deterministic() {
        let net = tiny_net();
        let store = init_network::<f32, _>(&net, &mut ChaCha8Rng::seed_from_u64(1));
        let run = || {
            let mut c = Collector::new(tiny_pool(), &net, 2, RewardConfig::default(), 11).unwrap();
            let b = c.collect(&store, &net, 4).unwrap();
            (b.actions, b.log_probs, b.rewards)
        };
        assert_eq!(run(), run());
    }
}

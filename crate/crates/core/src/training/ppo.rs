use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gae::{compute_gae, normalize};
use super::rollout::RolloutBatch;
use super::TrainError;
use crate::numkit::optim::{clip_grad_norm, Adam};
use crate::numkit::{Graph, NumError, ParamStore, Real, Tensor, Var};
use crate::policy::{self, NetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub horizon: usize,
    pub num_envs: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            discount: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            minibatches: 4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 2.5e-4,
            max_grad_norm: 0.5,
            horizon: 128,
            num_envs: 8,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(format!("clip_eps must be in (0, 1), got {}", self.clip_eps));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(format!("discount must be in (0, 1], got {}", self.discount));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(format!("gae_lambda must be in [0, 1], got {}", self.gae_lambda));
        }
        if self.epochs == 0 || self.horizon == 0 || self.num_envs == 0 {
            return Err("epochs, horizon and num_envs must be positive".into());
        }
        if self.minibatches == 0 || self.minibatches > self.num_envs {
            return Err(format!(
                "minibatches must be in 1..={} (minibatches split environments), got {}",
                self.num_envs, self.minibatches
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0 && self.max_grad_norm.is_finite() && self.max_grad_norm > 0.0) {
            return Err("lr and max_grad_norm must be positive".into());
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return Err("value_coef and entropy_coef must be non-negative".into());
        }
        Ok(())
    }
}

/// Graph nodes of the PPO objective.
#[derive(Debug, Clone, Copy)]
pub struct PpoLoss {
    pub total: Var,
    /// `-mean(min(rho * A, clip(rho) * A))`.
    pub policy: Var,
    /// `mean((V - R)^2)`.
    pub value: Var,
    /// Mean policy entropy.
    pub entropy: Var,
    /// `[M]` probability ratios.
    pub ratio: Var,
}

/// Clipped-surrogate objective plus weighted value error minus weighted
/// entropy, for `[M, A]` logits and `[M]` values.
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    values: Var,
    actions: &[usize],
    old_log_probs: &[T],
    advantages: &[T],
    returns: &[T],
    cfg: &PpoConfig,
) -> Result<PpoLoss, NumError> {
    let shape = g.shape(logits).to_vec();
    let m = actions.len();
    if shape.len() != 2 || shape[0] != m || old_log_probs.len() != m || advantages.len() != m || returns.len() != m {
        return Err(NumError::shape(
            "ppo_loss",
            format!(
                "logits {shape:?} with {m} actions, {} old log-probs, {} advantages, {} returns",
                old_log_probs.len(),
                advantages.len(),
                returns.len()
            ),
        ));
    }
    let a_dim = shape[1];
    let index = actions.iter().enumerate().map(|(i, &a)| (a < a_dim).then_some(i * a_dim + a)).collect::<Vec<_>>();
    if index.iter().any(Option::is_none) {
        return Err(NumError::shape("ppo_loss", format!("action out of range for {a_dim} logits")));
    }
    let lp = g.log_softmax(logits, 1)?;
    let taken = g.gather(lp, Arc::new(index), &[m])?;
    let old = g.constant(Tensor::new(&[m], old_log_probs.to_vec())?);
    let diff = g.sub(taken, old)?;
    let ratio = g.exp(diff)?;
    let adv = g.constant(Tensor::new(&[m], advantages.to_vec())?);
    let s1 = g.mul(ratio, adv)?;
    let eps = T::of(cfg.clip_eps);
    let clipped = g.clamp(ratio, T::one() - eps, T::one() + eps)?;
    let s2 = g.mul(clipped, adv)?;
    let obj = g.minimum(s1, s2)?;
    let obj = g.mean(obj)?;
    let policy = g.scale(obj, -T::one())?;

    let ret = g.constant(Tensor::new(&[m], returns.to_vec())?);
    let err = g.sub(values, ret)?;
    let sq = g.mul(err, err)?;
    let value = g.mean(sq)?;

    let p = g.softmax(logits, 1)?;
    let plogp = g.mul(p, lp)?;
    let s = g.sum(plogp)?;
    let entropy = g.scale(s, -T::one() / T::of(m as f64))?;

    let v = g.scale(value, T::of(cfg.value_coef))?;
    let e = g.scale(entropy, -T::of(cfg.entropy_coef))?;
    let total = g.add(policy, v)?;
    let total = g.add(total, e)?;
    Ok(PpoLoss { total, policy, value, entropy, ratio })
}

/// Diagnostics averaged over every minibatch of an update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Largest `|rho - 1|` in the first minibatch of the first epoch.
    pub first_ratio_dev: f64,
}

/// Rows of `envs` (in that order) for every time step, time-major.
fn minibatch_rows(batch: &RolloutBatch, envs: &[usize]) -> Vec<usize> {
    (0..batch.steps).flat_map(|t| envs.iter().map(move |&e| t * batch.envs + e)).collect()
}

struct Minibatch {
    rows: Vec<usize>,
    envs: Vec<usize>,
}

fn forward_minibatch(
    g: &mut Graph<f32>,
    store: &ParamStore<f32>,
    net: &NetConfig,
    batch: &RolloutBatch,
    mb: &Minibatch,
) -> Result<policy::PolicyOutput, NumError> {
    let il = batch.image_len();
    let s = batch.image_size;
    let m = mb.rows.len();

    let mut goals: Vec<usize> = mb.rows.iter().map(|&r| batch.goal_index[r]).collect();
    goals.sort_unstable();
    goals.dedup();
    let slot_of: BTreeMap<usize, usize> = goals.iter().enumerate().map(|(k, &gi)| (gi, k)).collect();
    let goal_data = goals.iter().flat_map(|&gi| batch.goal_images[gi].iter().copied()).collect();
    let goal_images = g.constant(Tensor::new(&[goals.len(), 3, s, s], goal_data)?);
    let unique = policy::encode(g, store, net, goal_images)?;
    let mut fshape = g.shape(unique).to_vec();
    let per = fshape[1..].iter().product::<usize>();
    let index: Vec<Option<usize>> = mb
        .rows
        .iter()
        .flat_map(|&r| {
            let base = slot_of[&batch.goal_index[r]] * per;
            (base..base + per).map(Some)
        })
        .collect();
    fshape[0] = m;
    let goal_features = g.gather(unique, Arc::new(index), &fshape)?;

    let obs_data = mb.rows.iter().flat_map(|&r| batch.obs[r * il..(r + 1) * il].iter().copied()).collect();
    let obs = g.constant(Tensor::new(&[m, 3, s, s], obs_data)?);
    let cue = policy::observe(g, store, net, goal_features, obs)?;

    let (layers, h) = (batch.h0.shape()[0], batch.h0.shape()[2]);
    let mut h0 = Vec::with_capacity(layers * mb.envs.len() * h);
    for l in 0..layers {
        for &e in &mb.envs {
            let off = (l * batch.envs + e) * h;
            h0.extend_from_slice(&batch.h0.data()[off..off + h]);
        }
    }
    let h0 = g.constant(Tensor::new(&[layers, mb.envs.len(), h], h0)?);
    let prev: Vec<usize> = mb.rows.iter().map(|&r| batch.prev_actions[r]).collect();
    let starts: Vec<bool> = mb.rows.iter().map(|&r| batch.starts[r]).collect();
    policy::policy_forward(g, store, net, cue, &prev, &starts, h0, batch.steps, mb.envs.len())
}

/// Advantages (normalized) and returns for a batch.
pub fn batch_targets(batch: &RolloutBatch, cfg: &PpoConfig) -> (Vec<f64>, Vec<f64>) {
    let values: Vec<f64> = batch.values.iter().map(|&v| v as f64).collect();
    let last: Vec<f64> = batch.last_values.iter().map(|&v| v as f64).collect();
    let (mut adv, ret) = compute_gae(&batch.rewards, &values, &batch.dones, &last, cfg.discount, cfg.gae_lambda);
    normalize(&mut adv);
    (adv, ret)
}

/// `epochs` passes over the batch in shuffled minibatches of whole
/// environment sequences, one Adam step per minibatch.
pub fn ppo_update<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    net: &NetConfig,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats, TrainError> {
    let (adv, ret) = batch_targets(batch, cfg);
    let mut stats = UpdateStats::default();
    let mut count = 0usize;
    let groups = cfg.minibatches.min(batch.envs).max(1);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..batch.envs).collect();
        order.shuffle(rng);
        let per = batch.envs.div_ceil(groups);
        for (k, envs) in order.chunks(per).enumerate() {
            let mut envs = envs.to_vec();
            envs.sort_unstable();
            let rows = minibatch_rows(batch, &envs);
            let mb = Minibatch { rows, envs };
            let mut g = Graph::new();
            let out = forward_minibatch(&mut g, store, net, batch, &mb)?;
            let actions: Vec<usize> = mb.rows.iter().map(|&r| batch.actions[r]).collect();
            let old: Vec<f32> = mb.rows.iter().map(|&r| batch.log_probs[r]).collect();
            let a: Vec<f32> = mb.rows.iter().map(|&r| adv[r] as f32).collect();
            let rt: Vec<f32> = mb.rows.iter().map(|&r| ret[r] as f32).collect();
            let loss = ppo_loss(&mut g, out.logits, out.values, &actions, &old, &a, &rt, cfg)?;
            let total = g.value(loss.total).data()[0];
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, minibatch: k, envs: mb.envs });
            }
            let ratio = g.value(loss.ratio).data().to_vec();
            let clipped = ratio.iter().filter(|&&r| ((r - 1.0).abs() as f64) > cfg.clip_eps).count();
            if epoch == 0 && k == 0 {
                stats.first_ratio_dev = ratio.iter().map(|&r| (r as f64 - 1.0).abs()).fold(0.0, f64::max);
            }
            stats.policy_loss += g.value(loss.policy).data()[0] as f64;
            stats.value_loss += g.value(loss.value).data()[0] as f64;
            stats.entropy += g.value(loss.entropy).data()[0] as f64;
            stats.clip_fraction += clipped as f64 / ratio.len() as f64;
            g.backward(loss.total)?;
            let mut grads: BTreeMap<String, Vec<f32>> =
                g.param_grads().into_iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect();
            drop(g);
            stats.grad_norm += clip_grad_norm(&mut grads, cfg.max_grad_norm);
            if !stats.grad_norm.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, minibatch: k, envs: mb.envs });
            }
            adam.step(store, &grads);
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    stats.policy_loss /= c;
    stats.value_loss /= c;
    stats.entropy /= c;
    stats.clip_fraction /= c;
    stats.grad_norm /= c;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::NUM_ACTIONS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval_loss(logits: &[f64], actions: &[usize], old: &[f64], adv: &[f64], cfg: &PpoConfig) -> (f64, f64, f64) {
        let m = actions.len();
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::new(&[m, NUM_ACTIONS], logits.to_vec()).unwrap());
        let v = g.constant(Tensor::zeros(&[m]));
        let loss = ppo_loss(&mut g, l, v, actions, old, adv, &vec![0.0; m], cfg).unwrap();
        let r = g.value(loss.ratio).data()[0];
        (g.value(loss.policy).data()[0], r, g.value(loss.entropy).data()[0])
    }

    fn log_softmax_row(x: &[f64]) -> Vec<f64> {
        let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        x.iter().map(|v| v - lse).collect()
    }

    #[test]
    fn identity_ratio_gives_negative_mean_advantage() {
        let cfg = PpoConfig::default();
        let logits = [0.3, -1.0, 0.5, 2.0, 0.0, 0.0, 0.0, 0.0];
        let actions = [3, 1];
        let old = [log_softmax_row(&logits[..4])[3], log_softmax_row(&logits[4..])[1]];
        let (pl, r, _) = eval_loss(&logits, &actions, &old, &[0.7, -0.1], &cfg);
        assert_eq!(r, 1.0);
        assert!((pl + 0.3).abs() < 1e-12);
    }

    #[test]
    fn ratio_two_is_clipped() {
        let cfg = PpoConfig::default();
        let logits = [0.0; 4];
        // old log-prob ln(0.25) - ln 2 gives rho = 2
        let old = [(0.25f64).ln() - 2f64.ln()];
        let (pl, r, ent) = eval_loss(&logits, &[0], &old, &[1.0], &cfg);
        assert!((r - 2.0).abs() < 1e-12);
        assert!((pl + 1.2).abs() < 1e-12);
        assert!((ent - 4f64.ln()).abs() < 1e-12);
        // negative advantage keeps the unclipped (more pessimistic) term
        let (pl, _, _) = eval_loss(&logits, &[0], &old, &[-1.0], &cfg);
        assert!((pl - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bandit_converges_to_rewarded_arm() {
        // one parameter vector of logits, +1 reward for action 2
        let cfg = PpoConfig { lr: 0.05, entropy_coef: 0.0, ..PpoConfig::default() };
        let mut store = ParamStore::<f32>::new();
        store.insert("logits", Tensor::zeros(&[1, NUM_ACTIONS]));
        let mut adam = Adam::<f32>::new(cfg.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = 32;
        let mut p2 = 0.0;
        for _ in 0..200 {
            let lp = policy::log_probs(store.get("logits").unwrap()).unwrap();
            let mut actions = Vec::new();
            let mut old = Vec::new();
            let mut rewards = Vec::new();
            for _ in 0..batch {
                let (a, l) = policy::pick_action(lp.data(), &mut rng, policy::ActionMode::Sample);
                actions.push(a);
                old.push(l);
                rewards.push(if a == 2 { 1.0 } else { 0.0 });
            }
            let mean = rewards.iter().sum::<f64>() / batch as f64;
            let adv: Vec<f32> = rewards.iter().map(|r| (r - mean) as f32).collect();
            for _ in 0..cfg.epochs {
                let mut g = Graph::<f32>::new();
                let w = g.param(&store, "logits").unwrap();
                let idx = Arc::new((0..batch * NUM_ACTIONS).map(|k| Some(k % NUM_ACTIONS)).collect());
                let logits = g.gather(w, idx, &[batch, NUM_ACTIONS]).unwrap();
                let v = g.constant(Tensor::zeros(&[batch]));
                let loss = ppo_loss(&mut g, logits, v, &actions, &old, &adv, &vec![0.0; batch], &cfg).unwrap();
                g.backward(loss.total).unwrap();
                let grads = g.param_grads().into_iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect();
                adam.step(&mut store, &grads);
            }
            p2 = policy::log_probs(store.get("logits").unwrap()).unwrap().data()[2].exp();
        }
        assert!(p2 >= 0.95, "P(action 2) = {p2}");
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        assert!(PpoConfig { clip_eps: 1.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { discount: 0.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { minibatches: 9, ..Default::default() }.validate().is_err());
    }
}

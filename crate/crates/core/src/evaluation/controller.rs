use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EvalError;
use crate::numkit::{Graph, ParamStore, Tensor};
use crate::perception::images_to_tensor;
use crate::policy::{self, pick_action, ActionMode, NetConfig, START_TOKEN};
use crate::seed::rng_for;
use crate::worldsim::{apply_action, wrap_pi, Action, NavEnv, Observation, Pose, SUCCESS_DISTANCE, TURN_ANGLE};

/// Chooses actions for a batch of environments that run in lockstep.
pub trait Controller {
    /// Called once before the first step of a batch.
    fn begin(&mut self, envs: &[NavEnv]) -> Result<(), EvalError>;
    /// One action for each index in `active`, in that order.
    fn act(&mut self, envs: &[NavEnv], active: &[usize]) -> Result<Vec<Action>, EvalError>;
}

/// Greedy (argmax) trained policy.
pub struct NetController {
    store: Arc<ParamStore<f32>>,
    net: NetConfig,
    goal: Vec<Tensor<f32>>,
    hidden: Vec<Vec<f32>>,
    prev: Vec<usize>,
}

impl NetController {
    pub fn new(store: Arc<ParamStore<f32>>, net: NetConfig) -> Self {
        Self { store, net, goal: Vec::new(), hidden: Vec::new(), prev: Vec::new() }
    }
}

impl Controller for NetController {
    fn begin(&mut self, envs: &[NavEnv]) -> Result<(), EvalError> {
        for env in envs {
            if env.goal_image().width != self.net.image_size || env.observation().height != self.net.image_size {
                return Err(EvalError::ImageSize {
                    episode_id: env.episode().episode_id,
                    rays: env.goal_image().width,
                    expected: self.net.image_size,
                });
            }
        }
        let images: Vec<&Observation> = envs.iter().map(NavEnv::goal_image).collect();
        let mut g = Graph::inference();
        let x = g.constant(images_to_tensor(&images)?);
        let f = policy::encode(&mut g, &self.store, &self.net, x)?;
        let t = g.value(f);
        let per = t.numel() / envs.len().max(1);
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        self.goal = (0..envs.len())
            .map(|i| Tensor::new(&shape, t.data()[i * per..(i + 1) * per].to_vec()))
            .collect::<Result<_, _>>()?;
        let p = &self.net.policy;
        self.hidden = vec![vec![0.0; p.layers * p.hidden]; envs.len()];
        self.prev = vec![START_TOKEN; envs.len()];
        Ok(())
    }

    fn act(&mut self, envs: &[NavEnv], active: &[usize]) -> Result<Vec<Action>, EvalError> {
        let n = active.len();
        let (layers, h) = (self.net.policy.layers, self.net.policy.hidden);
        let mut g = Graph::inference();
        let mut shape = self.goal[0].shape().to_vec();
        shape[0] = n;
        let data = active.iter().flat_map(|&i| self.goal[i].data().iter().copied()).collect();
        let goal = g.constant(Tensor::new(&shape, data)?);
        let obs: Vec<&Observation> = active.iter().map(|&i| envs[i].observation()).collect();
        let images = g.constant(images_to_tensor(&obs)?);
        let cue = policy::observe(&mut g, &self.store, &self.net, goal, images)?;
        let mut h0 = Vec::with_capacity(layers * n * h);
        for l in 0..layers {
            for &i in active {
                h0.extend_from_slice(&self.hidden[i][l * h..(l + 1) * h]);
            }
        }
        let h0 = g.constant(Tensor::new(&[layers, n, h], h0)?);
        let prev: Vec<usize> = active.iter().map(|&i| self.prev[i]).collect();
        let out = policy::policy_forward(&mut g, &self.store, &self.net, cue, &prev, &vec![false; n], h0, 1, n)?;
        let lp = g.log_softmax(out.logits, 1)?;
        let lp = g.value(lp).data().to_vec();
        let a_dim = lp.len() / n;
        let mut actions = Vec::with_capacity(n);
        // argmax never consumes randomness
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        for (k, &i) in active.iter().enumerate() {
            for (l, &v) in out.final_hidden.iter().enumerate() {
                self.hidden[i][l * h..(l + 1) * h].copy_from_slice(&g.value(v).data()[k * h..(k + 1) * h]);
            }
            let (a, _) = pick_action(&lp[k * a_dim..(k + 1) * a_dim], &mut unused, ActionMode::Argmax);
            self.prev[i] = a;
            actions.push(Action::from_index(a).expect("policy has 4 actions"));
        }
        Ok(actions)
    }
}

/// Uniform random actions, one stream per episode: `"random/{episode_id}"`.
pub struct RandomController {
    seed: u64,
    rngs: Vec<ChaCha8Rng>,
}

impl RandomController {
    pub fn new(seed: u64) -> Self {
        Self { seed, rngs: Vec::new() }
    }
}

impl Controller for RandomController {
    fn begin(&mut self, envs: &[NavEnv]) -> Result<(), EvalError> {
        self.rngs = envs.iter().map(|e| rng_for(self.seed, &format!("random/{}", e.episode().episode_id))).collect();
        Ok(())
    }

    fn act(&mut self, _envs: &[NavEnv], active: &[usize]) -> Result<Vec<Action>, EvalError> {
        Ok(active.iter().map(|&i| Action::ALL[self.rngs[i].random_range(0..Action::ALL.len())]).collect())
    }
}

/// Privileged baseline. Each step it picks, among the 12 reachable
/// headings, the forward move that lowers the geodesic distance most (ties
/// to the smaller turn), turns toward it and walks. When no single move
/// makes progress it searches short forward-move sequences and follows the
/// best one. Stops inside the success radius or when nothing helps.
#[derive(Default)]
pub struct OracleController {
    plans: Vec<VecDeque<f64>>,
}

impl OracleController {
    pub fn new() -> Self {
        Self::default()
    }
}

const ORACLE_SEARCH_DEPTH: usize = 6;

fn headings(theta: f64) -> impl Iterator<Item = (i32, f64)> {
    (-5..=6i32).map(move |k| (k, theta + k as f64 * TURN_ANGLE))
}

/// Turn count in `-5..=6` (positive is left) toward the best single move.
fn best_turn(env: &NavEnv, pose: &Pose) -> Option<i32> {
    let scene = env.world().scene();
    let mut best: Option<(f64, i32)> = None;
    for (k, theta) in headings(pose.theta) {
        let (next, blocked) = apply_action(scene, &Pose::new(pose.x, pose.y, theta), Action::Forward);
        if blocked {
            continue;
        }
        let score = env.distance_at(next.x, next.y) + 1e-3 * k.abs() as f64;
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, k));
        }
    }
    best.filter(|&(score, _)| score < env.distance()).map(|(_, k)| k)
}

/// Breadth-first search over forward moves in any heading; returns the
/// headings leading to the closest position found, if it beats the current
/// one.
fn search_plan(env: &NavEnv, pose: &Pose) -> Option<VecDeque<f64>> {
    let scene = env.world().scene();
    let key = |p: &Pose| ((p.x * 1e6).round() as i64, (p.y * 1e6).round() as i64);
    let mut seen = std::collections::HashSet::from([key(pose)]);
    let mut frontier = vec![(*pose, Vec::<f64>::new())];
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..ORACLE_SEARCH_DEPTH {
        let mut next_frontier = Vec::new();
        for (p, path) in &frontier {
            for (_, theta) in headings(pose.theta) {
                let (q, blocked) = apply_action(scene, &Pose::new(p.x, p.y, theta), Action::Forward);
                if blocked || !seen.insert(key(&q)) {
                    continue;
                }
                let mut path = path.clone();
                path.push(theta);
                let d = env.distance_at(q.x, q.y);
                if best.as_ref().is_none_or(|(b, _)| d < *b) {
                    best = Some((d, path.clone()));
                }
                next_frontier.push((q, path));
            }
        }
        if best.as_ref().is_some_and(|(d, _)| *d <= SUCCESS_DISTANCE) {
            break;
        }
        frontier = next_frontier;
    }
    best.filter(|(d, _)| *d < env.distance()).map(|(_, path)| path.into())
}

impl Controller for OracleController {
    fn begin(&mut self, envs: &[NavEnv]) -> Result<(), EvalError> {
        self.plans = vec![VecDeque::new(); envs.len()];
        Ok(())
    }

    fn act(&mut self, envs: &[NavEnv], active: &[usize]) -> Result<Vec<Action>, EvalError> {
        Ok(active
            .iter()
            .map(|&i| {
                let env = &envs[i];
                let pose = env.pose();
                if env.distance() <= SUCCESS_DISTANCE {
                    return Action::Stop;
                }
                let plan = &mut self.plans[i];
                if plan.is_empty() {
                    match best_turn(env, &pose) {
                        Some(0) => return Action::Forward,
                        Some(k) => return if k > 0 { Action::Left } else { Action::Right },
                        None => match search_plan(env, &pose) {
                            Some(p) => *plan = p,
                            None => return Action::Stop,
                        },
                    }
                }
                let err = wrap_pi(plan[0] - pose.theta);
                if err.abs() < 1e-6 {
                    plan.pop_front();
                    Action::Forward
                } else if err > 0.0 {
                    Action::Left
                } else {
                    Action::Right
                }
            })
            .collect())
    }
}

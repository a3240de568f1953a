//! Recurrent actor-critic over relationship cues.
//!
//! ```text
//! cue -> linear(L, H) -> relu --+
//!                               +-> concat -> GRU x layers -> actor linear(H, 4)
//! prev action one-hot(5) -> linear(5, E)                     -> critic linear(H, 1)
//! ```
//!
//! Sequences are laid out time-major: row `t * envs + e`. Hidden states are
//! multiplied by zero on rows flagged as episode starts, before the update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::{self, CueVariant};
use crate::numkit::nn;
use crate::numkit::{Graph, NumError, ParamStore, Real, Tensor, Var};
use crate::perception::{self, EncoderConfig};

pub const NUM_ACTIONS: usize = 4;
/// Previous-action token used on the first step of an episode.
pub const START_TOKEN: usize = 4;
pub const PREV_ACTION_DIM: usize = 5;
pub const PREFIX: &str = "policy";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub action_embed: usize,
    pub layers: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { hidden: 128, action_embed: 16, layers: 2 }
    }
}

/// Everything that fixes the parameter layout of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub variant: CueVariant,
    pub image_size: usize,
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.encoder.validate(self.image_size)?;
        if self.variant == CueVariant::Minimalist && !self.image_size.is_multiple_of(32) {
            return Err(format!("the minimalist variant needs an image size divisible by 32, got {}", self.image_size));
        }
        let p = &self.policy;
        if p.hidden == 0 || p.action_embed == 0 || p.layers == 0 {
            return Err("policy hidden, action_embed and layers must be positive".into());
        }
        Ok(())
    }

    pub fn cue_len(&self) -> usize {
        self.variant.cue_len(&self.encoder, self.image_size)
    }
}

pub fn init_network<T: Real, R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore::new();
    perception::init_encoder(&mut store, &cfg.encoder, cfg.variant.encoder_kind(), rng);
    if cfg.variant == CueVariant::DirectionAware {
        correlation::init_fusion(&mut store, rng);
    }
    let p = &cfg.policy;
    nn::init_linear(&mut store, &format!("{PREFIX}.proj"), cfg.cue_len(), p.hidden, rng);
    nn::init_linear(&mut store, &format!("{PREFIX}.act_embed"), PREV_ACTION_DIM, p.action_embed, rng);
    for l in 0..p.layers {
        let din = if l == 0 { p.hidden + p.action_embed } else { p.hidden };
        nn::init_gru(&mut store, &format!("{PREFIX}.gru{l}"), din, p.hidden, rng);
    }
    nn::init_linear(&mut store, &format!("{PREFIX}.actor"), p.hidden, NUM_ACTIONS, rng);
    nn::init_linear(&mut store, &format!("{PREFIX}.critic"), p.hidden, 1, rng);
    store
}

/// Checks that `store` holds exactly the layout `cfg` describes.
pub fn check_layout<T: Real>(cfg: &NetConfig, store: &ParamStore<T>) -> Result<(), String> {
    let want: ParamStore<T> = init_network(cfg, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
    let mut problems = Vec::new();
    for (name, t) in want.iter() {
        match store.get(name) {
            None => problems.push(format!("missing {name}")),
            Some(have) if have.shape() != t.shape() => {
                problems.push(format!("{name}: shape {:?}, expected {:?}", have.shape(), t.shape()))
            }
            _ => {}
        }
    }
    problems.extend(store.names().filter(|n| !want.contains(n)).map(|n| format!("unexpected {n}")));
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("; "))
    }
}

/// Encoder output for a batch of goal or observation images. Both branches
/// use the same parameters.
pub fn encode<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &NetConfig, images: Var) -> Result<Var, NumError> {
    perception::encode(g, store, &cfg.encoder, cfg.variant.encoder_kind(), images)
}

/// Cue `[M, L]` from goal features and observation images.
pub fn observe<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &NetConfig,
    goal_features: Var,
    obs_images: Var,
) -> Result<Var, NumError> {
    let ft = encode(g, store, cfg, obs_images)?;
    correlation::cue(g, store, cfg.variant, goal_features, ft)
}

pub fn one_hot<T: Real>(actions: &[usize]) -> Result<Tensor<T>, NumError> {
    let mut data = vec![T::zero(); actions.len() * PREV_ACTION_DIM];
    for (i, &a) in actions.iter().enumerate() {
        if a >= PREV_ACTION_DIM {
            return Err(NumError::shape("one_hot", format!("previous action {a} >= {PREV_ACTION_DIM}")));
        }
        data[i * PREV_ACTION_DIM + a] = T::one();
    }
    Tensor::new(&[actions.len(), PREV_ACTION_DIM], data)
}

/// Outputs of [`policy_forward`].
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    /// `[M, 4]`.
    pub logits: Var,
    /// `[M]` state values.
    pub values: Var,
    /// `[M, H]` top-layer GRU outputs.
    pub embedding: Var,
    /// Per-layer hidden state after the last step, each `[envs, H]`.
    pub final_hidden: Vec<Var>,
}

/// Unrolls the recurrent core over `steps` time steps of `envs` rows each.
/// `h0` is `[layers, envs, H]`; `starts[t * envs + e]` zeroes the hidden
/// state entering that row.
#[allow(clippy::too_many_arguments)]
pub fn policy_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &NetConfig,
    cue: Var,
    prev_actions: &[usize],
    starts: &[bool],
    h0: Var,
    steps: usize,
    envs: usize,
) -> Result<PolicyOutput, NumError> {
    let p = &cfg.policy;
    let m = steps * envs;
    if g.shape(cue) != [m, cfg.cue_len()] {
        return Err(NumError::shape(
            "policy_forward",
            format!("cue {:?}, expected [{m}, {}] for the {} variant", g.shape(cue), cfg.cue_len(), cfg.variant),
        ));
    }
    if prev_actions.len() != m || starts.len() != m || g.shape(h0) != [p.layers, envs, p.hidden] {
        return Err(NumError::shape(
            "policy_forward",
            format!(
                "{} actions, {} start flags, hidden {:?} for {steps} steps x {envs} envs",
                prev_actions.len(),
                starts.len(),
                g.shape(h0)
            ),
        ));
    }
    let proj = nn::linear(g, store, &format!("{PREFIX}.proj"), cue)?;
    let proj = g.relu(proj)?;
    let onehot = g.constant(one_hot(prev_actions)?);
    let emb = nn::linear(g, store, &format!("{PREFIX}.act_embed"), onehot)?;
    let mut x = g.concat(&[proj, emb], 1)?;
    let masks: Vec<Var> = (0..steps)
        .map(|t| {
            let mk = starts[t * envs..(t + 1) * envs].iter().map(|&s| if s { T::zero() } else { T::one() }).collect();
            g.constant(Tensor::new(&[envs], mk).expect("envs entries"))
        })
        .collect();
    let mut final_hidden = Vec::with_capacity(p.layers);
    for l in 0..p.layers {
        let prefix = format!("{PREFIX}.gru{l}");
        let gi = nn::gru_input_gates(g, store, &prefix, x)?;
        let h_init = g.slice(h0, 0, l, 1)?;
        let mut h = g.reshape(h_init, &[envs, p.hidden])?;
        let mut outs = Vec::with_capacity(steps);
        for (t, &mask) in masks.iter().enumerate() {
            let git = if steps == 1 { gi } else { g.slice(gi, 0, t * envs, envs)? };
            let hm = g.mul_rows(h, mask)?;
            h = nn::gru_step(g, store, &prefix, git, hm)?;
            outs.push(h);
        }
        final_hidden.push(h);
        x = if steps == 1 { outs[0] } else { g.concat(&outs, 0)? };
    }
    let logits = nn::linear(g, store, &format!("{PREFIX}.actor"), x)?;
    let v = nn::linear(g, store, &format!("{PREFIX}.critic"), x)?;
    let values = g.reshape(v, &[m])?;
    Ok(PolicyOutput { logits, values, embedding: x, final_hidden })
}

/// Zero recurrent state `[layers, n, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState<T> {
    pub hidden: Tensor<T>,
}

impl<T: Real> PolicyState<T> {
    pub fn zeros(cfg: &PolicyConfig, n: usize) -> Self {
        Self { hidden: Tensor::zeros(&[cfg.layers, n, cfg.hidden]) }
    }

    /// Stacks per-layer `[n, H]` values back into `[layers, n, H]`.
    pub fn from_layers(layers: &[&Tensor<T>]) -> Self {
        let (n, h) = (layers[0].shape()[0], layers[0].shape()[1]);
        let data = layers.iter().flat_map(|t| t.data().iter().copied()).collect();
        Self { hidden: Tensor::new(&[layers.len(), n, h], data).expect("uniform layers") }
    }
}

/// Values of a single-step [`policy_forward`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct StepValues<T> {
    pub logits: Tensor<T>,
    pub values: Tensor<T>,
    pub embedding: Tensor<T>,
}

/// One policy step on cue values. The input state is left untouched.
pub fn policy_step<T: Real>(
    store: &ParamStore<T>,
    cfg: &NetConfig,
    cue: &Tensor<T>,
    prev_actions: &[usize],
    state: &PolicyState<T>,
) -> Result<(StepValues<T>, PolicyState<T>), NumError> {
    let n = prev_actions.len();
    let mut g = Graph::inference();
    let c = g.constant(cue.clone());
    let h0 = g.constant(state.hidden.clone());
    let out = policy_forward(&mut g, store, cfg, c, prev_actions, &vec![false; n], h0, 1, n)?;
    let layers: Vec<&Tensor<T>> = out.final_hidden.iter().map(|&v| g.value(v)).collect();
    let next = PolicyState::from_layers(&layers);
    let values = StepValues {
        logits: g.value(out.logits).clone(),
        values: g.value(out.values).clone(),
        embedding: g.value(out.embedding).clone(),
    };
    Ok((values, next))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Sample,
    Argmax,
}

/// Row-wise log-softmax of `[M, 4]` logits, with the same arithmetic as the
/// graph op.
pub fn log_probs<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    let mut g = Graph::inference();
    let x = g.constant(logits.clone());
    let lp = g.log_softmax(x, 1)?;
    Ok(g.value(lp).clone())
}

/// Picks an action from one row of log-probabilities; returns the action and
/// its log-probability. Ties under argmax go to the lowest index.
pub fn pick_action<T: Real, R: Rng + ?Sized>(log_probs: &[T], rng: &mut R, mode: ActionMode) -> (usize, T) {
    let a = match mode {
        ActionMode::Argmax => {
            let mut best = 0;
            for (i, &v) in log_probs.iter().enumerate() {
                if v > log_probs[best] {
                    best = i;
                }
            }
            best
        }
        ActionMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = log_probs.len() - 1;
            for (i, &v) in log_probs.iter().enumerate() {
                acc += v.to_f64().unwrap_or(f64::NEG_INFINITY).exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    (a, log_probs[a])
}

/// Samples (or takes the argmax of) a single row of logits.
pub fn sample_action<T: Real, R: Rng + ?Sized>(
    logits: &[T],
    rng: &mut R,
    mode: ActionMode,
) -> Result<(usize, T), NumError> {
    let lp = log_probs(&Tensor::new(&[1, logits.len()], logits.to_vec())?)?;
    Ok(pick_action(lp.data(), rng, mode))
}

//! Central finite-difference gradient checks in f64.

use std::collections::HashMap;
use std::sync::Arc;

use corrnav::correlation::{self, CueVariant};
use corrnav::numkit::{nn, Graph, NumError, ParamStore, Tensor, Var};
use corrnav::perception::{self, EncoderConfig, OutKind};
use corrnav::policy::{init_network, policy_forward, NetConfig, PolicyConfig, NUM_ACTIONS};
use corrnav::training::{ppo_loss, PpoConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Magnitude below which gradients count as zero when forming relative
/// errors.
pub const FLOOR: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform in `[-hi, -margin] U [margin, hi]`.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(margin..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub type OpFn = Arc<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumError> + Send + Sync>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: OpFn,
}

fn weighted_sum(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> Result<Var, NumError> {
    let wv = g.constant(w.clone());
    let p = g.mul(out, wv)?;
    g.sum(p)
}

fn eval_loss(case: &OpCase, inputs: &[Tensor<f64>], w: &Tensor<f64>) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.f)(&mut g, &vars).expect("op forward");
    let l = weighted_sum(&mut g, out, w).expect("loss");
    g.value(l).data()[0]
}

/// Worst relative error over every input coordinate of `case`, with the
/// output contracted against random weights drawn from `rng`.
pub fn check_op(case: &OpCase, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = (case.f)(&mut g, &vars).expect("op forward");
    let w = uniform(rng, g.shape(out), -1.0, 1.0);
    let l = weighted_sum(&mut g, out, &w).expect("loss");
    g.backward(l).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut worst = 0.0f64;
    let mut inputs = case.inputs.clone();
    for (i, grad) in analytic.iter().enumerate() {
        for (k, &a) in grad.iter().enumerate() {
            let x = inputs[i].data()[k];
            inputs[i].data_mut()[k] = x + H;
            let up = eval_loss(case, &inputs, &w);
            inputs[i].data_mut()[k] = x - H;
            let down = eval_loss(case, &inputs, &w);
            inputs[i].data_mut()[k] = x;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * H)));
        }
    }
    worst
}

fn op(f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumError> + Send + Sync + 'static) -> OpFn {
    Arc::new(f)
}

/// One randomized instance of every differentiable graph op. Inputs to
/// piecewise ops are kept at least 0.01 away from their kinks.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let mut cases = Vec::new();
    let mut add = |name: &'static str, inputs: Vec<Tensor<f64>>, f: OpFn| cases.push(OpCase { name, inputs, f });

    add("add", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], op(|g, v| g.add(v[0], v[1])));
    add("sub", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], op(|g, v| g.sub(v[0], v[1])));
    add("mul", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], op(|g, v| g.mul(v[0], v[1])));
    let a = uniform(r, &[12], -1.0, 1.0);
    let d = away_from_zero(r, &[12], 0.01, 1.0);
    let b = Tensor::from_fn(&[12], |i| a.data()[i] + d.data()[i]);
    add("minimum", vec![a, b], op(|g, v| g.minimum(v[0], v[1])));
    add("scale", vec![uniform(r, &[5], -1.0, 1.0)], op(|g, v| g.scale(v[0], -1.7)));
    add("add_scalar", vec![uniform(r, &[5], -1.0, 1.0)], op(|g, v| g.add_scalar(v[0], 0.3)));
    add("relu", vec![away_from_zero(r, &[2, 6], 0.01, 1.0)], op(|g, v| g.relu(v[0])));
    add("sigmoid", vec![uniform(r, &[2, 6], -3.0, 3.0)], op(|g, v| g.sigmoid(v[0])));
    add("tanh", vec![uniform(r, &[2, 6], -3.0, 3.0)], op(|g, v| g.tanh(v[0])));
    add("exp", vec![uniform(r, &[2, 6], -2.0, 2.0)], op(|g, v| g.exp(v[0])));
    let c = Tensor::from_fn(&[16], |_| {
        let m = r.random_range(0.01..0.49);
        [-0.5 - m, -0.5 + m, 0.5 - m, 0.5 + m][r.random_range(0..4)]
    });
    add("clamp", vec![c], op(|g, v| g.clamp(v[0], -0.5, 0.5)));
    add(
        "mul_rows",
        vec![uniform(r, &[3, 2, 2], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
        op(|g, v| g.mul_rows(v[0], v[1])),
    );
    add(
        "linear",
        vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)],
        op(|g, v| g.linear(v[0], v[1], Some(v[2]))),
    );
    add(
        "linear_no_bias",
        vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[4, 3], -1.0, 1.0)],
        op(|g, v| g.linear(v[0], v[1], None)),
    );
    for (name, ta, tb) in [
        ("batch_matmul", false, false),
        ("batch_matmul_ta", true, false),
        ("batch_matmul_tb", false, true),
        ("batch_matmul_ta_tb", true, true),
    ] {
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        add(
            name,
            vec![uniform(r, &sa, -1.0, 1.0), uniform(r, &sb, -1.0, 1.0)],
            op(move |g, v| g.batch_matmul(v[0], v[1], ta, tb)),
        );
    }
    for (name, k, stride, pad) in [("conv2d_3x3", 3, 1, 1), ("conv2d_stride2", 3, 2, 1), ("conv2d_1x1", 1, 1, 0)] {
        add(
            name,
            vec![
                uniform(r, &[2, 2, 5, 5], -1.0, 1.0),
                uniform(r, &[3, 2, k, k], -1.0, 1.0),
                uniform(r, &[3], -1.0, 1.0),
            ],
            op(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
        );
    }
    add(
        "conv2d_no_bias",
        vec![uniform(r, &[1, 2, 4, 6], -1.0, 1.0), uniform(r, &[2, 2, 3, 3], -1.0, 1.0)],
        op(|g, v| g.conv2d(v[0], v[1], None, 2, 0)),
    );
    add("avg_pool2d", vec![uniform(r, &[2, 2, 4, 6], -1.0, 1.0)], op(|g, v| g.avg_pool2d(v[0], 2, 2)));
    add("avg_pool2d_overlap", vec![uniform(r, &[1, 2, 5, 5], -1.0, 1.0)], op(|g, v| g.avg_pool2d(v[0], 3, 1)));
    add("softmax", vec![uniform(r, &[3, 4], -2.0, 2.0)], op(|g, v| g.softmax(v[0], 1)));
    add("softmax_axis0", vec![uniform(r, &[3, 4], -2.0, 2.0)], op(|g, v| g.softmax(v[0], 0)));
    add("log_softmax", vec![uniform(r, &[3, 4], -2.0, 2.0)], op(|g, v| g.log_softmax(v[0], 1)));
    add(
        "group_norm",
        vec![uniform(r, &[2, 4, 3, 3], -1.0, 1.0), uniform(r, &[4], 0.5, 1.5), uniform(r, &[4], -0.5, 0.5)],
        op(|g, v| g.group_norm(v[0], 2, v[1], v[2])),
    );
    add("reshape", vec![uniform(r, &[2, 6], -1.0, 1.0)], op(|g, v| g.reshape(v[0], &[3, 4])));
    add("permute", vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], op(|g, v| g.permute(v[0], &[2, 0, 1])));
    add(
        "concat",
        vec![uniform(r, &[2, 3, 2], -1.0, 1.0), uniform(r, &[2, 1, 2], -1.0, 1.0)],
        op(|g, v| g.concat(&[v[0], v[1]], 1)),
    );
    add("slice", vec![uniform(r, &[3, 5], -1.0, 1.0)], op(|g, v| g.slice(v[0], 1, 1, 3)));
    let index: Arc<Vec<Option<usize>>> =
        Arc::new((0..10).map(|_| if r.random_bool(0.2) { None } else { Some(r.random_range(0..6)) }).collect());
    add("gather", vec![uniform(r, &[2, 3], -1.0, 1.0)], op(move |g, v| g.gather(v[0], index.clone(), &[5, 2])));
    add("sum", vec![uniform(r, &[3, 4], -1.0, 1.0)], op(|g, v| g.sum(v[0])));
    add("mean", vec![uniform(r, &[3, 4], -1.0, 1.0)], op(|g, v| g.mean(v[0])));
    add("sum_axis", vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], op(|g, v| g.sum_axis(v[0], 1)));
    add(
        "cosine_similarity",
        vec![uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[3, 5], -1.0, 1.0)],
        op(|g, v| g.cosine_similarity(v[0], v[1], 1e-8)),
    );
    cases
}

/// Composite ops built from graph primitives and named parameters.
pub fn composite_cases(seed: u64) -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = &mut r;
    let mut cases = Vec::new();
    let mut store = ParamStore::<f64>::new();
    nn::init_gru(&mut store, "gru", 3, 4, r);
    for name in ["gru.b_ih", "gru.b_hh"] {
        let shape = store.get(name).unwrap().shape().to_vec();
        store.insert(name, uniform(r, &shape, -0.5, 0.5));
    }
    let gru = Arc::new(store);
    cases.push(OpCase {
        name: "gru_cell",
        inputs: vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 4], -1.0, 1.0)],
        f: op(move |g, v| nn::gru_cell(g, &gru, "gru", v[0], v[1])),
    });
    cases.push(OpCase {
        name: "minimalist_cue",
        inputs: vec![uniform(r, &[2, 2, 5], -1.0, 1.0), uniform(r, &[2, 2, 5], -1.0, 1.0)],
        f: op(|g, v| correlation::minimalist_cue(g, v[0], v[1])),
    });
    cases.push(OpCase {
        name: "dense_volume",
        inputs: vec![uniform(r, &[2, 3, 2, 3], -1.0, 1.0), uniform(r, &[2, 3, 2, 3], -1.0, 1.0)],
        f: op(|g, v| correlation::dense_volume(g, v[0], v[1])),
    });
    cases.push(OpCase {
        name: "lookup_field",
        inputs: vec![uniform(r, &[1, 2, 4, 4], -1.0, 1.0), uniform(r, &[1, 2, 4, 4], -1.0, 1.0)],
        f: op(|g, v| correlation::lookup_field(g, v[0], v[1])),
    });
    cases
}

/// Inputs of the full goal-and-observation to PPO-loss path.
pub struct PathData {
    pub net: NetConfig,
    pub goal: Tensor<f64>,
    pub obs: Tensor<f64>,
    pub prev_actions: Vec<usize>,
    pub starts: Vec<bool>,
    pub h0: Tensor<f64>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

pub const PATH_STEPS: usize = 2;
pub const PATH_ENVS: usize = 2;

pub fn path_net(variant: CueVariant) -> NetConfig {
    NetConfig {
        variant,
        image_size: 32,
        encoder: EncoderConfig { channels: [2, 4, 4, 4], feature_dim: 3, groups: 2 },
        policy: PolicyConfig { hidden: 4, action_embed: 2, layers: 2 },
    }
}

pub fn path_data(variant: CueVariant, seed: u64) -> (PathData, ParamStore<f64>) {
    let net = path_net(variant);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = init_network::<f64, _>(&net, &mut r);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        // Random biases and affine terms so no parameter sits at its init value.
        if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with("b_ih") || name.ends_with("b_hh") {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.insert(name, uniform(&mut r, &shape, -0.2, 0.2));
        }
    }
    let m = PATH_STEPS * PATH_ENVS;
    let s = net.image_size;
    let data = PathData {
        goal: uniform(&mut r, &[PATH_ENVS, 3, s, s], 0.0, 1.0),
        obs: uniform(&mut r, &[m, 3, s, s], 0.0, 1.0),
        prev_actions: (0..m).map(|_| r.random_range(0..5)).collect(),
        // Row `envs` always carries state so the recurrent weights matter.
        starts: (0..m).map(|i| i != PATH_ENVS && r.random_bool(0.4)).collect(),
        h0: uniform(&mut r, &[net.policy.layers, PATH_ENVS, net.policy.hidden], -0.5, 0.5),
        actions: (0..m).map(|_| r.random_range(0..NUM_ACTIONS)).collect(),
        old_log_probs: (0..m).map(|_| r.random_range(-2.0..-0.5)).collect(),
        advantages: (0..m).map(|_| r.random_range(-1.0..1.0)).collect(),
        returns: (0..m).map(|_| r.random_range(-1.0..1.0)).collect(),
        net,
    };
    (data, store)
}

/// Goal images -> encoder -> cue -> recurrent policy -> PPO loss.
pub fn path_loss(g: &mut Graph<f64>, store: &ParamStore<f64>, d: &PathData) -> Result<Var, NumError> {
    let goal_img = g.constant(d.goal.clone());
    let obs_img = g.constant(d.obs.clone());
    let kind: OutKind = d.net.variant.encoder_kind();
    let fg = perception::encode(g, store, &d.net.encoder, kind, goal_img)?;
    // Row t * envs + e uses the goal of env e.
    let per = g.value(fg).numel() / PATH_ENVS;
    let index: Vec<Option<usize>> = (0..PATH_STEPS).flat_map(|_| (0..PATH_ENVS * per).map(Some)).collect();
    let mut shape = g.shape(fg).to_vec();
    shape[0] *= PATH_STEPS;
    let fg_rows = g.gather(fg, Arc::new(index), &shape)?;
    let ft = perception::encode(g, store, &d.net.encoder, kind, obs_img)?;
    let cue = correlation::cue(g, store, d.net.variant, fg_rows, ft)?;
    let h0 = g.constant(d.h0.clone());
    let out = policy_forward(g, store, &d.net, cue, &d.prev_actions, &d.starts, h0, PATH_STEPS, PATH_ENVS)?;
    let loss = ppo_loss(
        g,
        out.logits,
        out.values,
        &d.actions,
        &d.old_log_probs,
        &d.advantages,
        &d.returns,
        &PpoConfig::default(),
    )?;
    Ok(loss.total)
}

#[derive(Debug, Clone, Default)]
pub struct PathCheck {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a relu kink.
    pub kinks: usize,
    pub params_with_grad: usize,
    pub params: usize,
    pub without_grad: Vec<String>,
    /// Parameter, analytic and numeric gradient at the worst coordinate.
    pub worst_at: Option<(String, f64, f64)>,
}

fn path_value(store: &ParamStore<f64>, d: &PathData) -> (f64, Vec<u8>) {
    let mut g = Graph::inference();
    let l = path_loss(&mut g, store, d).expect("path forward");
    (g.value(l).data()[0], g.branch_pattern())
}

/// Checks `per_param` random coordinates of every parameter tensor.
///
/// A coordinate whose perturbation moves any relu, clamp or minimum element
/// onto another branch is counted as a kink crossing and not compared.
pub fn check_path(variant: CueVariant, seed: u64, per_param: usize) -> PathCheck {
    let (d, store) = path_data(variant, seed);
    let mut g = Graph::new();
    let l = path_loss(&mut g, &store, &d).expect("path forward");
    g.backward(l).expect("backward");
    let grads: HashMap<String, Vec<f64>> =
        g.param_grads().into_iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect();
    let pattern = g.branch_pattern();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut out = PathCheck { params: store.len(), ..PathCheck::default() };
    let mut work = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let grad = grads.get(name);
        if grad.is_some_and(|g| g.iter().any(|&x| x != 0.0)) {
            out.params_with_grad += 1;
        } else {
            out.without_grad.push(name.clone());
        }
        let n = store.get(name).unwrap().numel();
        for _ in 0..per_param.min(n) {
            let k = rng.random_range(0..n);
            let a = grad.map_or(0.0, |g| g[k]);
            let x = store.get(name).unwrap().data()[k];
            work.get_mut(name).unwrap().data_mut()[k] = x + H;
            let (up, p_up) = path_value(&work, &d);
            work.get_mut(name).unwrap().data_mut()[k] = x - H;
            let (down, p_down) = path_value(&work, &d);
            work.get_mut(name).unwrap().data_mut()[k] = x;
            out.checked += 1;
            if p_up != pattern || p_down != pattern {
                out.kinks += 1;
                continue;
            }
            let err = rel_err(a, (up - down) / (2.0 * H));
            if err > out.worst {
                out.worst = err;
                out.worst_at = Some((format!("{name}[{k}]"), a, (up - down) / (2.0 * H)));
            }
        }
    }
    out
}

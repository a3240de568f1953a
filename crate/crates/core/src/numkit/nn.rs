//! Layer helpers over [`Graph`]: parameter naming, initialization and the
//! GRU cell.
//!
//! Parameters are stored under `"{prefix}.weight"` / `"{prefix}.bias"`;
//! GRU layers use `w_ih`, `w_hh`, `b_ih`, `b_hh` with gates stacked in
//! reset, update, candidate order.

use rand::Rng;

use super::graph::{Graph, Var};
use super::init::{kaiming_uniform, orthogonal};
use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use super::NumError;

pub fn init_linear<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    din: usize,
    dout: usize,
    rng: &mut R,
) {
    store.insert(format!("{prefix}.weight"), kaiming_uniform(&[dout, din], din, rng));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]));
}

pub fn linear<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var, NumError> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    g.linear(x, w, Some(b))
}

pub fn init_conv<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut R,
) {
    store.insert(format!("{prefix}.weight"), kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
}

pub fn conv<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var, NumError> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

pub fn init_group_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[channels], T::one()));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
}

pub fn group_norm<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    groups: usize,
) -> Result<Var, NumError> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.group_norm(x, groups, gamma, beta)
}

pub fn init_gru<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    din: usize,
    hidden: usize,
    rng: &mut R,
) {
    store.insert(format!("{prefix}.w_ih"), kaiming_uniform(&[3 * hidden, din], din, rng));
    let mut w_hh = Vec::with_capacity(3 * hidden * hidden);
    for _ in 0..3 {
        w_hh.extend_from_slice(orthogonal::<T, R>(hidden, hidden, 1.0, rng).data());
    }
    store.insert(format!("{prefix}.w_hh"), Tensor::new(&[3 * hidden, hidden], w_hh).expect("3 square blocks"));
    store.insert(format!("{prefix}.b_ih"), Tensor::zeros(&[3 * hidden]));
    store.insert(format!("{prefix}.b_hh"), Tensor::zeros(&[3 * hidden]));
}

/// Input-side gate pre-activations `x W_ih^T + b_ih`, `[N, 3H]`. Computing
/// these for a whole sequence at once leaves only the recurrent half inside
/// the time loop.
pub fn gru_input_gates<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var, NumError> {
    let w = g.param(store, &format!("{prefix}.w_ih"))?;
    let b = g.param(store, &format!("{prefix}.b_ih"))?;
    g.linear(x, w, Some(b))
}

/// One GRU update from precomputed input gates:
///
/// ```text
/// r  = sigmoid(gi_r + W_hr h + b_hr)
/// z  = sigmoid(gi_z + W_hz h + b_hz)
/// n  = tanh(gi_n + r * (W_hn h + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
pub fn gru_step<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    gi: Var,
    h: Var,
) -> Result<Var, NumError> {
    let hs = g.shape(h).to_vec();
    if hs.len() != 2 || g.shape(gi) != [hs[0], 3 * hs[1]] {
        return Err(NumError::shape("gru_cell", format!("input gates {:?} vs hidden {hs:?}", g.shape(gi))));
    }
    let hidden = hs[1];
    let w = g.param(store, &format!("{prefix}.w_hh"))?;
    let b = g.param(store, &format!("{prefix}.b_hh"))?;
    if g.shape(w) != [3 * hidden, hidden] {
        return Err(NumError::shape("gru_cell", format!("w_hh {:?} vs hidden {hidden}", g.shape(w))));
    }
    let gh = g.linear(h, w, Some(b))?;
    let gi_r = g.slice(gi, 1, 0, hidden)?;
    let gi_z = g.slice(gi, 1, hidden, hidden)?;
    let gi_n = g.slice(gi, 1, 2 * hidden, hidden)?;
    let gh_r = g.slice(gh, 1, 0, hidden)?;
    let gh_z = g.slice(gh, 1, hidden, hidden)?;
    let gh_n = g.slice(gh, 1, 2 * hidden, hidden)?;
    let r_pre = g.add(gi_r, gh_r)?;
    let r = g.sigmoid(r_pre)?;
    let z_pre = g.add(gi_z, gh_z)?;
    let z = g.sigmoid(z_pre)?;
    let rn = g.mul(r, gh_n)?;
    let n_pre = g.add(gi_n, rn)?;
    let n = g.tanh(n_pre)?;
    // h' = n + z * (h - n)
    let diff = g.sub(h, n)?;
    let zd = g.mul(z, diff)?;
    g.add(n, zd)
}

/// Full GRU cell: `x [N, Din]`, `h [N, H]` -> `h' [N, H]`.
pub fn gru_cell<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    h: Var,
) -> Result<Var, NumError> {
    let w = g.param(store, &format!("{prefix}.w_ih"))?;
    let ws = g.shape(w).to_vec();
    let xs = g.shape(x).to_vec();
    if xs.len() != 2 || ws[1] != xs[1] {
        return Err(NumError::shape("gru_cell", format!("input {xs:?} vs w_ih {ws:?}")));
    }
    let gi = gru_input_gates(g, store, prefix, x)?;
    gru_step(g, store, prefix, gi, h)
}

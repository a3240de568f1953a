//! Spatial-relationship cues between goal and observation features.
//!
//! Feature maps are channels-first, `[N, D, h, w]`, and positions are
//! flattened row-major (`i = row * w + col`). The dense volume is goal-major:
//! `C[n, i, j] = <Fg(i), Ft(j)>`. The direction-aware path works on the
//! transposed volume `[N, j, h, w]`, whose last two axes are goal positions,
//! so pooling and window search run over goal regions for every observation
//! position.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::nn;
use crate::numkit::{Graph, NumError, ParamStore, Real, Var};
use crate::perception::{EncoderConfig, OutKind};

pub const PYRAMID_LEVELS: usize = 3;
pub const WINDOW: usize = 9;
pub const FUSE_HIDDEN: usize = 32;
pub const FUSE_OUT: usize = 16;
pub const FUSE_PREFIX: &str = "fuse";
/// Denominator floor for cosine similarity; zero vectors give cosine 0.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueVariant {
    Minimalist,
    Dense,
    DirectionAware,
}

impl CueVariant {
    pub const ALL: [CueVariant; 3] = [CueVariant::Minimalist, CueVariant::Dense, CueVariant::DirectionAware];

    pub fn as_str(self) -> &'static str {
        match self {
            CueVariant::Minimalist => "minimalist",
            CueVariant::Dense => "dense",
            CueVariant::DirectionAware => "direction_aware",
        }
    }

    pub fn encoder_kind(self) -> OutKind {
        match self {
            CueVariant::Minimalist => OutKind::VectorPair,
            CueVariant::Dense => OutKind::Map4,
            CueVariant::DirectionAware => OutKind::MapFine,
        }
    }

    /// Flat cue length for a square input of side `image_size`.
    pub fn cue_len(self, _enc: &EncoderConfig, image_size: usize) -> usize {
        match self {
            CueVariant::Minimalist => 2,
            CueVariant::Dense => (image_size / 16).pow(4),
            CueVariant::DirectionAware => FUSE_OUT * (image_size / 4).pow(2),
        }
    }
}

impl fmt::Display for CueVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CueVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown cue variant `{s}` (expected minimalist, dense or direction_aware)"))
    }
}

/// `[N, 2, D]` pairs -> `[N, 2]` per-half cosine similarities.
pub fn minimalist_cue<T: Real>(g: &mut Graph<T>, vg: Var, vt: Var) -> Result<Var, NumError> {
    let s = g.shape(vg).to_vec();
    if s.len() != 3 || s[1] != 2 || g.shape(vt) != s.as_slice() {
        return Err(NumError::shape("minimalist_cue", format!("{s:?} vs {:?}", g.shape(vt))));
    }
    let a = g.reshape(vg, &[s[0] * 2, s[2]])?;
    let b = g.reshape(vt, &[s[0] * 2, s[2]])?;
    let c = g.cosine_similarity(a, b, T::of(COSINE_EPS))?;
    g.reshape(c, &[s[0], 2])
}

fn flat_maps<T: Real>(
    g: &mut Graph<T>,
    op: &'static str,
    fg: Var,
    ft: Var,
) -> Result<(Var, Var, [usize; 4]), NumError> {
    let s = g.shape(fg).to_vec();
    if s.len() != 4 || g.shape(ft) != s.as_slice() {
        return Err(NumError::shape(op, format!("goal {s:?} vs observation {:?}", g.shape(ft))));
    }
    let a = g.reshape(fg, &[s[0], s[1], s[2] * s[3]])?;
    let b = g.reshape(ft, &[s[0], s[1], s[2] * s[3]])?;
    Ok((a, b, [s[0], s[1], s[2], s[3]]))
}

/// Goal-major volume `[N, HW, HW]` with `C[n, i, j] = <Fg(i), Ft(j)>`.
pub fn dense_volume<T: Real>(g: &mut Graph<T>, fg: Var, ft: Var) -> Result<Var, NumError> {
    let (a, b, _) = flat_maps(g, "dense_volume", fg, ft)?;
    g.batch_matmul(a, b, true, false)
}

/// Flattens a volume to `[N, HW*HW]`; entry `i * HW + j` is `C[i, j]`.
pub fn dense_cue<T: Real>(g: &mut Graph<T>, volume: Var) -> Result<Var, NumError> {
    let s = g.shape(volume).to_vec();
    if s.len() != 3 || s[1] != s[2] {
        return Err(NumError::shape("dense_cue", format!("expected [N, P, P], got {s:?}")));
    }
    g.reshape(volume, &[s[0], s[1] * s[2]])
}

/// Observation-major volume `[N, HW, h, w]`: entry `[n, j, y, x]` is the
/// inner product of observation position `j` with goal position `(y, x)`.
pub fn observation_volume<T: Real>(g: &mut Graph<T>, fg: Var, ft: Var) -> Result<Var, NumError> {
    let (a, b, [n, _, h, w]) = flat_maps(g, "observation_volume", fg, ft)?;
    let v = g.batch_matmul(b, a, true, false)?;
    g.reshape(v, &[n, h * w, h, w])
}

/// Levels `0..levels`, each the 2x2 average pool of the previous over the
/// last two axes.
pub fn build_pyramid<T: Real>(g: &mut Graph<T>, volume: Var, levels: usize) -> Result<Vec<Var>, NumError> {
    let s = g.shape(volume).to_vec();
    if levels == 0 || s.len() < 2 {
        return Err(NumError::shape("build_pyramid", format!("{levels} levels for {s:?}")));
    }
    let div = 1usize << (levels - 1);
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h % div != 0 || w % div != 0 {
        return Err(NumError::shape("build_pyramid", format!("{h}x{w} is not divisible by {div} for {levels} levels")));
    }
    let mut out = vec![volume];
    for _ in 1..levels {
        let prev = *out.last().expect("non-empty");
        out.push(g.avg_pool2d(prev, 2, 2)?);
    }
    Ok(out)
}

/// Gather indices for [`lookup`]: `n` samples, an `h x w` observation grid,
/// level `s`.
pub fn lookup_index(n: usize, h: usize, w: usize, s: usize) -> Vec<Option<usize>> {
    let (hs, ws) = (h >> s, w >> s);
    let plane = hs * ws;
    let per_sample = h * w * plane;
    let mut index = Vec::with_capacity(n * WINDOW * h * w);
    for b in 0..n {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                for y in 0..h {
                    for x in 0..w {
                        let cy = (y >> s) as i64 + dy;
                        let cx = (x >> s) as i64 + dx;
                        let t = y * w + x;
                        index.push(
                            (cy >= 0 && cx >= 0 && cy < hs as i64 && cx < ws as i64)
                                .then(|| b * per_sample + t * plane + cy as usize * ws + cx as usize),
                        );
                    }
                }
            }
        }
    }
    index
}

/// 3x3 windows from level `s` (`[N, h*w, h>>s, w>>s]`) centered at
/// `floor(x / 2^s)` for every observation position `x`. Output
/// `[N, 9, h, w]`, window offsets row-major from top-left; out-of-range
/// entries are zero.
pub fn lookup<T: Real>(g: &mut Graph<T>, level: Var, s: usize, h: usize, w: usize) -> Result<Var, NumError> {
    let shape = g.shape(level).to_vec();
    if shape.len() != 4 || shape[1] != h * w || shape[2] != h >> s || shape[3] != w >> s {
        return Err(NumError::shape("lookup", format!("level {s} {shape:?} for a {h}x{w} grid")));
    }
    let n = shape[0];
    g.gather(level, Arc::new(lookup_index(n, h, w, s)), &[n, WINDOW, h, w])
}

pub fn init_fusion<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R) {
    nn::init_conv(store, &format!("{FUSE_PREFIX}.conv1"), PYRAMID_LEVELS * WINDOW, FUSE_HIDDEN, 3, rng);
    nn::init_conv(store, &format!("{FUSE_PREFIX}.conv2"), FUSE_HIDDEN, FUSE_OUT, 3, rng);
}

/// Lookup field `[N, 27, h, w]` stacked over all pyramid levels.
pub fn lookup_field<T: Real>(g: &mut Graph<T>, fg: Var, ft: Var) -> Result<Var, NumError> {
    let s = g.shape(ft).to_vec();
    if s.len() != 4 {
        return Err(NumError::shape("lookup_field", format!("expected [N, D, h, w], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let vol = observation_volume(g, fg, ft)?;
    let pyr = build_pyramid(g, vol, PYRAMID_LEVELS)?;
    let fields = pyr.iter().enumerate().map(|(lvl, &p)| lookup(g, p, lvl, h, w)).collect::<Result<Vec<_>, _>>()?;
    g.concat(&fields, 1)
}

/// Pyramid lookup, two 3x3 convs (27 -> 32 -> 16, relu between), flatten
/// to `[N, 16 * h * w]`.
pub fn direction_aware_cue<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fg: Var,
    ft: Var,
) -> Result<Var, NumError> {
    let field = lookup_field(g, fg, ft)?;
    let y = nn::conv(g, store, &format!("{FUSE_PREFIX}.conv1"), field, 1, 1)?;
    let y = g.relu(y)?;
    let y = nn::conv(g, store, &format!("{FUSE_PREFIX}.conv2"), y, 1, 1)?;
    let s = g.shape(y).to_vec();
    g.reshape(y, &[s[0], s[1] * s[2] * s[3]])
}

/// Dispatches on the variant; inputs are the encoder outputs for that
/// variant. Returns `[N, L]`.
pub fn cue<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    variant: CueVariant,
    goal: Var,
    obs: Var,
) -> Result<Var, NumError> {
    match variant {
        CueVariant::Minimalist => minimalist_cue(g, goal, obs),
        CueVariant::Dense => {
            let v = dense_volume(g, goal, obs)?;
            dense_cue(g, v)
        }
        CueVariant::DirectionAware => direction_aware_cue(g, store, goal, obs),
    }
}

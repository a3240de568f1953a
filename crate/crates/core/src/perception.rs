//! Weight-sharing residual encoder for goal and observation images.
//!
//! Layout for a `[N, 3, S, S]` input with channels `(c0, c1, c2, c3)`:
//!
//! ```text
//! stem      conv3x3(3 -> c0), GN, relu                 S     x S
//! stage 0   avgpool2, block(c0 -> c0)                  S/2   x S/2
//! stage 1   avgpool2, block(c0 -> c1)                  S/4   x S/4   -> fine head
//! stage 2   avgpool2, block(c1 -> c2)                  S/8   x S/8
//! stage 3   avgpool2, block(c2 -> c3)                  S/16  x S/16  -> coarse head
//! ```
//!
//! A block is `conv-GN-relu-conv-GN` plus a skip (1x1 projection when the
//! channel count changes), followed by relu. Downsampling by average pooling
//! keeps the network mirror-equivariant whenever the kernels are.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::nn;
use crate::numkit::{Graph, NumError, ParamStore, Real, Tensor, Var};
use crate::worldsim::Observation;

pub const PREFIX: &str = "enc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutKind {
    /// `[N, 2, D]`: left and right halves of the coarse map.
    VectorPair,
    /// `[N, D, S/16, S/16]`.
    Map4,
    /// `[N, D, S/4, S/4]`.
    MapFine,
}

impl OutKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OutKind::VectorPair => "vector_pair",
            OutKind::Map4 => "map4",
            OutKind::MapFine => "map_fine",
        }
    }
}

impl fmt::Display for OutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vector_pair" => Ok(OutKind::VectorPair),
            "map4" => Ok(OutKind::Map4),
            "map_fine" => Ok(OutKind::MapFine),
            other => Err(format!("unknown encoder output `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub feature_dim: usize,
    pub groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64, 64], feature_dim: 32, groups: 4 }
    }
}

impl EncoderConfig {
    pub fn validate(&self, image_size: usize) -> Result<(), String> {
        if image_size < 16 || !image_size.is_multiple_of(16) {
            return Err(format!("image size {image_size} must be a positive multiple of 16"));
        }
        if self.feature_dim == 0 || self.groups == 0 {
            return Err("feature_dim and groups must be positive".into());
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % self.groups != 0) {
            return Err(format!("channel count {c} is not a positive multiple of {} groups", self.groups));
        }
        Ok(())
    }

    /// Side length of the fine map.
    pub fn fine_map_size(&self, image_size: usize) -> usize {
        image_size / 4
    }

    pub fn coarse_map_size(&self, image_size: usize) -> usize {
        image_size / 16
    }

    fn stages(kind: OutKind) -> usize {
        match kind {
            OutKind::MapFine => 2,
            OutKind::Map4 | OutKind::VectorPair => 4,
        }
    }
}

fn init_block<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, p: &str, cin: usize, cout: usize, rng: &mut R) {
    nn::init_conv(store, &format!("{p}.conv1"), cin, cout, 3, rng);
    nn::init_group_norm(store, &format!("{p}.gn1"), cout);
    nn::init_conv(store, &format!("{p}.conv2"), cout, cout, 3, rng);
    nn::init_group_norm(store, &format!("{p}.gn2"), cout);
    if cin != cout {
        nn::init_conv(store, &format!("{p}.proj"), cin, cout, 1, rng);
    }
}

fn block<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, p: &str, x: Var, groups: usize) -> Result<Var, NumError> {
    let y = nn::conv(g, store, &format!("{p}.conv1"), x, 1, 1)?;
    let y = nn::group_norm(g, store, &format!("{p}.gn1"), y, groups)?;
    let y = g.relu(y)?;
    let y = nn::conv(g, store, &format!("{p}.conv2"), y, 1, 1)?;
    let y = nn::group_norm(g, store, &format!("{p}.gn2"), y, groups)?;
    let skip = if store.contains(&format!("{p}.proj.weight")) {
        nn::conv(g, store, &format!("{p}.proj"), x, 1, 0)?
    } else {
        x
    };
    let s = g.add(y, skip)?;
    g.relu(s)
}

/// Registers the parameters needed for `kind` under `enc.*`.
pub fn init_encoder<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    cfg: &EncoderConfig,
    kind: OutKind,
    rng: &mut R,
) {
    let c = cfg.channels;
    nn::init_conv(store, &format!("{PREFIX}.stem"), 3, c[0], 3, rng);
    nn::init_group_norm(store, &format!("{PREFIX}.stem_gn"), c[0]);
    let ins = [c[0], c[0], c[1], c[2]];
    for s in 0..EncoderConfig::stages(kind) {
        init_block(store, &format!("{PREFIX}.stage{s}"), ins[s], c[s], rng);
    }
    match kind {
        OutKind::MapFine => nn::init_conv(store, &format!("{PREFIX}.head_fine"), c[1], cfg.feature_dim, 1, rng),
        _ => nn::init_conv(store, &format!("{PREFIX}.head"), c[3], cfg.feature_dim, 1, rng),
    }
}

/// Encodes a `[N, 3, S, S]` batch; see [`OutKind`] for output shapes.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    kind: OutKind,
    images: Var,
) -> Result<Var, NumError> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != s[3] || !s[2].is_multiple_of(16) {
        return Err(NumError::shape("encode", format!("expected [N, 3, S, S] with S a multiple of 16, got {s:?}")));
    }
    let x = nn::conv(g, store, &format!("{PREFIX}.stem"), images, 1, 1)?;
    let x = nn::group_norm(g, store, &format!("{PREFIX}.stem_gn"), x, cfg.groups)?;
    let mut x = g.relu(x)?;
    for st in 0..EncoderConfig::stages(kind) {
        x = g.avg_pool2d(x, 2, 2)?;
        x = block(g, store, &format!("{PREFIX}.stage{st}"), x, cfg.groups)?;
    }
    match kind {
        OutKind::MapFine => nn::conv(g, store, &format!("{PREFIX}.head_fine"), x, 1, 0),
        OutKind::Map4 => nn::conv(g, store, &format!("{PREFIX}.head"), x, 1, 0),
        OutKind::VectorPair => {
            let m = nn::conv(g, store, &format!("{PREFIX}.head"), x, 1, 0)?;
            halves(g, m)
        }
    }
}

/// `[N, D, h, w]` -> `[N, 2, D]`, averaging each column half over all rows.
pub fn halves<T: Real>(g: &mut Graph<T>, m: Var) -> Result<Var, NumError> {
    let s = g.shape(m).to_vec();
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    if w % 2 != 0 {
        return Err(NumError::shape("halves", format!("odd map width in {s:?}")));
    }
    let rows = g.sum_axis(m, 2)?;
    let left = g.slice(rows, 2, 0, w / 2)?;
    let left = g.sum_axis(left, 2)?;
    let right = g.slice(rows, 2, w / 2, w / 2)?;
    let right = g.sum_axis(right, 2)?;
    let left = g.reshape(left, &[n, d, 1])?;
    let right = g.reshape(right, &[n, d, 1])?;
    let both = g.concat(&[left, right], 2)?;
    let both = g.scale(both, T::one() / T::of((h * w / 2) as f64))?;
    g.permute(both, &[0, 2, 1])
}

/// Stacks observations into a `[N, 3, H, W]` tensor.
pub fn images_to_tensor<T: Real>(images: &[&Observation]) -> Result<Tensor<T>, NumError> {
    let first = images.first().ok_or_else(|| NumError::shape("images", "empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for obs in images {
        if (obs.height, obs.width) != (h, w) {
            return Err(NumError::shape(
                "images",
                format!("mixed image sizes {h}x{w} and {}x{}", obs.height, obs.width),
            ));
        }
        data.extend(obs.to_chw().into_iter().map(|v| T::of(v as f64)));
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: OutKind) -> (EncoderConfig, ParamStore<f64>) {
        let cfg = EncoderConfig { channels: [4, 8, 8, 8], feature_dim: 6, groups: 2 };
        let mut store = ParamStore::new();
        init_encoder(&mut store, &cfg, kind, &mut ChaCha8Rng::seed_from_u64(0));
        (cfg, store)
    }

    fn random_images(n: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, size, size], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn output_shapes_follow_the_contract() {
        for size in [32, 64] {
            for (kind, want) in [
                (OutKind::MapFine, vec![2, 6, size / 4, size / 4]),
                (OutKind::Map4, vec![2, 6, size / 16, size / 16]),
                (OutKind::VectorPair, vec![2, 2, 6]),
            ] {
                let (cfg, store) = setup(kind);
                let mut g = Graph::inference();
                let x = g.constant(random_images(2, size, 1));
                let y = encode(&mut g, &store, &cfg, kind, x).unwrap();
                assert_eq!(g.shape(y), want.as_slice(), "{kind} at {size}");
                assert!(g.value(y).all_finite());
            }
        }
    }

    #[test]
    fn fine_encoder_has_no_deep_stages() {
        let (_, store) = setup(OutKind::MapFine);
        assert!(store.contains("enc.stage1.conv1.weight"));
        assert!(!store.contains("enc.stage2.conv1.weight"));
        assert!(!store.contains("enc.head.weight"));
    }

    #[test]
    fn encoding_is_repeatable() {
        let (cfg, store) = setup(OutKind::Map4);
        let run = || {
            let mut g = Graph::inference();
            let x = g.constant(random_images(1, 32, 4));
            let y = encode(&mut g, &store, &cfg, OutKind::Map4, x).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_input_shapes() {
        let (cfg, store) = setup(OutKind::Map4);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 3, 20, 20]));
        assert!(encode(&mut g, &store, &cfg, OutKind::Map4, x).is_err());
    }

    #[test]
    fn halves_average_each_side() {
        let mut g = Graph::<f64>::inference();
        // [1, 1, 2, 4]: left half {1, 2, 5, 6}, right half {3, 4, 7, 8}
        let m = g.constant(Tensor::new(&[1, 1, 2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let v = halves(&mut g, m).unwrap();
        assert_eq!(g.value(v).data(), &[3.5, 5.5]);
    }
}

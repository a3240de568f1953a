//! Property tests for numkit and the correlation cues.

use std::collections::HashSet;

use corrnav::correlation::{build_pyramid, dense_volume, lookup, lookup_index, minimalist_cue};
use corrnav::numkit::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Gradient of `sum(w * f(x))` with respect to `x`.
fn grad_of(x: &Tensor<f64>, w: &Tensor<f64>, f: &dyn Fn(&mut Graph<f64>, Var) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = f(&mut g, xv);
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv).unwrap();
    let l = g.sum(p).unwrap();
    g.backward(l).unwrap();
    g.grad(xv).unwrap().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut r, &[3, 5], -2.0, 2.0);
        let w = random(&mut r, &[3, 5], -1.0, 1.0);
        let f = |g: &mut Graph<f64>, x: Var| g.tanh(x).unwrap();
        let h = |g: &mut Graph<f64>, x: Var| {
            let s = g.softmax(x, 1).unwrap();
            g.mul(s, x).unwrap()
        };
        let combined = move |g: &mut Graph<f64>, x: Var| {
            let fx = f(g, x);
            let hx = h(g, x);
            let fa = g.scale(fx, a).unwrap();
            let hb = g.scale(hx, b).unwrap();
            g.add(fa, hb).unwrap()
        };
        let gf = grad_of(&x, &w, &f);
        let gh = grad_of(&x, &w, &h);
        let gc = grad_of(&x, &w, &combined);
        for k in 0..gc.len() {
            prop_assert!((gc[k] - (a * gf[k] + b * gh[k])).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, spread in 0.1f64..30.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::inference();
        let x = g.constant(random(&mut r, &[rows, cols], -spread, spread));
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn group_norm_standardizes_each_group(seed in any::<u64>(), groups in 1usize..4, per in 1usize..4, side in 2usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let c = groups * per;
        let n = 2;
        let mut g = Graph::inference();
        let shift = r.random_range(-5.0..5.0);
        let x = g.constant(random(&mut r, &[n, c, side, side], shift - 3.0, shift + 3.0));
        let gamma = g.constant(Tensor::from_fn(&[c], |_| 1.0));
        let beta = g.constant(Tensor::from_fn(&[c], |_| 0.0));
        let y = g.group_norm(x, groups, gamma, beta).unwrap();
        let block = per * side * side;
        for grp in g.value(y).data().chunks(block) {
            let mean = grp.iter().sum::<f64>() / block as f64;
            let var = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / block as f64;
            prop_assert!(mean.abs() <= 1e-5);
            prop_assert!((var - 1.0).abs() <= 1e-3, "var {}", var);
        }
    }

    #[test]
    fn minimalist_cue_is_a_cosine(seed in any::<u64>(), n in 1usize..4, d in 1usize..10, scale in 1e-3f64..1e3) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::inference();
        let a = g.constant(random(&mut r, &[n, 2, d], -scale, scale));
        let b = g.constant(random(&mut r, &[n, 2, d], -scale, scale));
        let c = minimalist_cue(&mut g, a, b).unwrap();
        prop_assert_eq!(g.shape(c), &[n, 2]);
        prop_assert!(g.value(c).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn pyramid_levels_keep_the_mean(seed in any::<u64>(), n in 1usize..3, p in 1usize..5, side in prop::sample::select(vec![4usize, 8, 12])) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::inference();
        let v = g.constant(random(&mut r, &[n, p, side, side], -4.0, 4.0));
        let levels = build_pyramid(&mut g, v, 3).unwrap();
        let mean = |t: &Tensor<f64>| t.data().iter().sum::<f64>() / t.numel() as f64;
        let m0 = mean(g.value(levels[0]));
        for (s, &l) in levels.iter().enumerate() {
            prop_assert_eq!(g.shape(l)[2], side >> s);
            prop_assert!((mean(g.value(l)) - m0).abs() <= 1e-6);
        }
    }

    #[test]
    fn lookup_ignores_entries_outside_every_window(seed in any::<u64>(), side in prop::sample::select(vec![4usize, 8]), s in 0usize..3) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (side, side);
        let shape = [1, h * w, h >> s, w >> s];
        let level = random(&mut r, &shape, -1.0, 1.0);
        let used: HashSet<usize> = lookup_index(1, h, w, s).into_iter().flatten().collect();
        let mut masked = level.clone();
        for (k, v) in masked.data_mut().iter_mut().enumerate() {
            if !used.contains(&k) {
                *v = r.random_range(-100.0..100.0);
            }
        }
        let run = |t: &Tensor<f64>| {
            let mut g = Graph::inference();
            let l = g.constant(t.clone());
            let out = lookup(&mut g, l, s, h, w).unwrap();
            g.value(out).data().to_vec()
        };
        prop_assert_eq!(run(&level), run(&masked));
    }

    #[test]
    fn width_shift_moves_the_volume_argmax(seed in any::<u64>(), side in 2usize..5, k in 0usize..4) {
        let (h, w) = (side, side);
        let hw = h * w;
        let d = hw + 2;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        // orthonormal goal features, one per position
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < hw {
            let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let k = k % w;
        let fg = Tensor::from_fn(&[1, d, h, w], |i| {
            let (c, pos) = (i / hw, i % hw);
            basis[pos][c]
        });
        // observation position (y, x) sees goal position (y, x - k)
        let ft = Tensor::from_fn(&[1, d, h, w], |i| {
            let (c, pos) = (i / hw, i % hw);
            let (y, x) = (pos / w, pos % w);
            basis[y * w + (x + w - k) % w][c]
        });
        let mut g = Graph::inference();
        let a = g.constant(fg);
        let b = g.constant(ft);
        let vol = dense_volume(&mut g, a, b).unwrap();
        let c = g.value(vol).data();
        for i in 0..hw {
            let row = &c[i * hw..(i + 1) * hw];
            let j = (0..hw).max_by(|&p, &q| row[p].total_cmp(&row[q])).unwrap();
            let (y, x) = (i / w, i % w);
            prop_assert_eq!(j, y * w + (x + k) % w);
        }
    }
}

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Real;

/// Global L2 norm over a set of gradients.
pub fn global_norm<T: Real>(grads: &BTreeMap<String, Vec<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / (norm + 1e-6));
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-5, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<T>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let step_size = T::of(self.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(self.eps);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p = *p - step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tensor;

    #[test]
    fn clipping_caps_the_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![3.0f64, 4.0]);
        let before = clip_grad_norm(&mut grads, 0.5);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((global_norm(&grads) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = ParamStore::<f64>::new();
        params.insert("x", Tensor::new(&[1], vec![2.0]).unwrap());
        let mut opt = Adam::new(0.1);
        for _ in 0..200 {
            let x = params.get("x").unwrap().data()[0];
            let mut g = BTreeMap::new();
            g.insert("x".to_string(), vec![2.0 * x]);
            opt.step(&mut params, &g);
        }
        assert!(params.get("x").unwrap().data()[0].abs() < 0.05);
    }
}

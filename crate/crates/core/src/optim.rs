//! Adam with global gradient-norm clipping.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// Number of updates applied so far.
    pub steps: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, steps: 0, moments: HashMap::new() }
    }

    /// Applies one bias-corrected update. Parameters absent from `grads`
    /// keep their value and their moment estimates.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            p.check_same_shape(g)?;
            let (m, v) = self.moments.entry(*id).or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors keyed by parameter, for serialization.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (id, name, value) in store.iter() {
            if let Some((m, v)) = self.moments.get(&id) {
                out.push((
                    format!("adam.m.{name}"),
                    Tensor::new(value.shape().to_vec(), m.clone()).expect("moment shape"),
                ));
                out.push((
                    format!("adam.v.{name}"),
                    Tensor::new(value.shape().to_vec(), v.clone()).expect("moment shape"),
                ));
            }
        }
        out.push(("adam.steps".into(), Tensor::from_vec(vec![self.steps as f64])));
        out
    }

    pub fn import(cfg: AdamConfig, store: &ParamStore, records: &HashMap<String, Tensor>) -> Result<Self> {
        let mut adam = Adam::new(cfg);
        if let Some(s) = records.get("adam.steps") {
            adam.steps = s.item()? as u64;
        }
        for (id, name, value) in store.iter() {
            let m = records.get(&format!("adam.m.{name}"));
            let v = records.get(&format!("adam.v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    value.check_same_shape(m)?;
                    value.check_same_shape(v)?;
                    adam.moments.insert(id, (m.data().to_vec(), v.data().to_vec()));
                }
                (None, None) => {}
                _ => return Err(Error::Format(format!("incomplete optimizer state for {name}"))),
            }
        }
        Ok(adam)
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &[(ParamId, Tensor)]) -> f64 {
    grads.iter().flat_map(|(_, g)| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![1.0, -1.0]), true).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[(id, Tensor::from_vec(vec![3.0, -0.5]))], 0.1).unwrap();
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![5.0]), true).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let x = store.get(id).data()[0];
            adam.step(&mut store, &[(id, Tensor::from_vec(vec![2.0 * (x - 2.0)]))], 0.05).unwrap();
        }
        assert!((store.get(id).data()[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn clipping() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::zeros(&[2]), true).unwrap();
        let mut g = vec![(id, Tensor::from_vec(vec![30.0, 40.0]))];
        assert_eq!(clip_grad_norm(&mut g, 50.0), 50.0);
        assert_eq!(g[0].1.data(), &[30.0, 40.0]);
        assert_eq!(clip_grad_norm(&mut g, 5.0), 50.0);
        assert!((grad_norm(&g) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn state_round_trip() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::zeros(&[3]), true).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[(id, Tensor::from_vec(vec![1.0, 2.0, 3.0]))], 0.01).unwrap();
        let records: HashMap<_, _> = adam.export(&store).into_iter().collect();
        let back = Adam::import(AdamConfig::default(), &store, &records).unwrap();
        assert_eq!(back.steps, 1);
        assert_eq!(back.moments, adam.moments);
    }
}

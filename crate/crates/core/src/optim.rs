//! Adam without weight decay or warmup.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Float, Gradients, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor<F>, Tensor<F>)>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let c = &config;
        if !(c.lr > 0.0 && (0.0..1.0).contains(&c.beta1) && (0.0..1.0).contains(&c.beta2) && c.eps > 0.0) {
            return Err(Error::Config {
                field: "train.lr".into(),
                reason: format!("invalid Adam settings {c:?}"),
            });
        }
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Update every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (lr, eps) = (F::lit(c.lr / bc1), F::lit(c.eps));
        let inv_bc2 = F::lit(1.0 / bc2);
        for (&id, g) in grads.params() {
            if !store.entry(id).trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (m, v) = (m.data_mut(), v.data_mut());
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (F::one() - b1) * gi;
                v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
                p[i] -= lr * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "adam update" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", "base", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let g = Graph::new();
        let w = store.var(&g, id);
        let loss = g.sum(&g.mul(&w, &w).unwrap()).unwrap();
        let grads = g.backward(&loss).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        })
        .unwrap();
        opt.step(&mut store, &grads).unwrap();
        let got = store.value(id).data().to_vec();
        for (x, want) in got.iter().zip([0.9, -1.9, 0.4]) {
            assert!((x - want).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", "base", Tensor::new(&[2], vec![3.0, -4.0]).unwrap());
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            ..Default::default()
        })
        .unwrap();
        for _ in 0..2000 {
            let g = Graph::new();
            let w = store.var(&g, id);
            let loss = g.sum(&g.mul(&w, &w).unwrap()).unwrap();
            opt.step(&mut store, &g.backward(&loss).unwrap()).unwrap();
        }
        assert!(store.value(id).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(Adam::<f32>::new(AdamConfig {
            lr: 0.0,
            ..Default::default()
        })
        .is_err());
        assert!(Adam::<f32>::new(AdamConfig {
            beta2: 1.0,
            ..Default::default()
        })
        .is_err());
    }
}

//! Adam optimizer with bias correction. Moment tensors are keyed by parameter
//! name in sorted maps so serialization order is stable.

use super::{fr, Params, Scalar};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.lr > 0.0) {
            return Err(crate::Error::invalid("learning rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(crate::Error::invalid(format!("{name} must be in [0, 1)")));
            }
        }
        Ok(())
    }
}

pub struct Adam<F: Scalar> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, ArrayD<F>>,
    pub v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, net: &mut impl Params<F>) {
        self.t += 1;
        let b1 = fr::<F>(self.cfg.beta1);
        let b2 = fr::<F>(self.cfg.beta2);
        let one = fr::<F>(1.0);
        let lr = fr::<F>(self.cfg.lr);
        let eps = fr::<F>(self.cfg.eps);
        let c1 = one / fr::<F>(1.0 - self.cfg.beta1.powi(self.t as i32));
        let c2 = one / fr::<F>(1.0 - self.cfg.beta2.powi(self.t as i32));
        let (m, v) = (&mut self.m, &mut self.v);
        net.visit_params(&mut |name, mut p| {
            let m = m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.grad.raw_dim()));
            let v = v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.grad.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m * c1;
                    let vhat = *v * c2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
        });
    }
}

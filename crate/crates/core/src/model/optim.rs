//! Adam over flat parameter slices, keyed so state survives across steps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamKey;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

pub struct Adam {
    config: AdamConfig,
    learning_rate: f64,
    state: BTreeMap<ParamKey, Moments>,
}

impl Adam {
    pub fn new(learning_rate: f64, config: AdamConfig) -> Self {
        Adam {
            config,
            learning_rate,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, key: ParamKey, param: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(param.len(), grad.len());
        let AdamConfig { beta1, beta2, eps } = self.config;
        let s = self.state.entry(key).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            t: 0,
        });
        s.t += 1;
        let c1 = 1.0 - beta1.powi(s.t);
        let c2 = 1.0 - beta2.powi(s.t);
        for ((p, g), (m, v)) in param.iter_mut().zip(grad).zip(s.m.iter_mut().zip(s.v.iter_mut())) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

//! Adam and the reduce-on-plateau learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Arr;
use super::params::ParamSet;

/// Standard Adam. Moments are keyed by parameter name so optimizer state
/// survives checkpointing byte-exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Arr>,
    pub v: BTreeMap<String, Arr>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from (name, gradient) pairs. Parameters without a
    /// gradient this step are left untouched (their moments too).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(&str, &Arr)]) {
        self.t += 1;
        self.apply("", params, grads);
    }

    /// One update over several models sharing this optimizer (e.g. both
    /// generators). Exactly one bias-correction step; moments are keyed
    /// `prefix.name` so the groups never collide.
    pub fn step_groups(&mut self, groups: Vec<(&str, &mut ParamSet, Vec<(String, Arr)>)>) {
        self.t += 1;
        for (prefix, params, grads) in groups {
            let refs: Vec<(&str, &Arr)> =
                grads.iter().map(|(n, a)| (n.as_str(), a)).collect();
            self.apply(prefix, params, &refs);
        }
    }

    fn apply(&mut self, prefix: &str, params: &mut ParamSet, grads: &[(&str, &Arr)]) {
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let key = if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            };
            let p = params
                .params
                .get_mut(*name)
                .unwrap_or_else(|| panic!("optimizer step for unknown parameter {name}"));
            let m = self
                .m
                .entry(key.clone())
                .or_insert_with(|| Arr::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(key)
                .or_insert_with(|| Arr::zeros(p.raw_dim()));
            ndarray::Zip::from(&mut *m).and(*g).for_each(|mv, &gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(*g).for_each(|vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Multiply the learning rate by `factor` once a monitored loss has not
/// improved (relative threshold) for `patience` consecutive epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feed one epoch's monitored value; returns true when the lr was reduced.
    pub fn step(&mut self, metric: f64, lr: &mut f64) -> bool {
        let improved = metric < self.best * (1.0 - self.threshold);
        if improved {
            self.best = metric;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            *lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

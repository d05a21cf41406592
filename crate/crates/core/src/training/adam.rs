use std::collections::BTreeMap;

use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Adaptive-moment optimizer with bias correction. Moments are keyed by
/// parameter name so several stores can share one optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Starts a new update; call once before [`Adam::apply`] on each store.
    pub fn next_step(&mut self) {
        self.step += 1;
    }

    pub fn apply(&mut self, ps: &mut ParamStore, grads: &[(ParamId, &Tensor)]) {
        assert!(self.step > 0, "call next_step before apply");
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for &(id, g) in grads {
            let name = ps.name(id).to_string();
            let shape = g.shape();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(shape));
            let v = self.second.entry(name).or_insert_with(|| Tensor::zeros(shape));
            let p = ps.get_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn state(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        for (k, t) in &self.first {
            out.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("v/{k}"), t.clone());
        }
        out
    }

    pub fn restore(&mut self, state: &NamedTensors, step: u64) -> Result<()> {
        self.first.clear();
        self.second.clear();
        for (k, t) in state {
            if let Some(name) = k.strip_prefix("m/") {
                self.first.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v/") {
                self.second.insert(name.to_string(), t.clone());
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer entry {k}")));
            }
        }
        self.step = step;
        Ok(())
    }
}

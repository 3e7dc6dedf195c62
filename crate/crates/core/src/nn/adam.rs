//! Adam optimizer with bias correction. State layout follows parameter id
//! order, and the moment buffers round-trip through checkpoints so a resumed
//! run continues bit-for-bit.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
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
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.tensor(super::params::ParamId(i)).shape().to_vec()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam { cfg, t: 0, m, v }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update; `grads[i]` pairs with parameter id `i`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(super::params::ParamId(i)).data_mut();
            assert_eq!(g.len(), p.len(), "gradient shape mismatch at parameter {i}");
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }

    /// Moment buffers as named tensors for checkpointing; names mirror the
    /// parameter names with `m.`/`v.` prefixes, then the step counter.
    pub fn export_state(&self, params: &ParamSet) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, (name, _)) in params.iter().enumerate() {
            out.push((format!("m.{name}"), self.m[i].clone()));
            out.push((format!("v.{name}"), self.v[i].clone()));
        }
        out
    }

    pub fn import_state(
        &mut self,
        params: &ParamSet,
        t: u64,
        entries: &[(String, Tensor)],
    ) -> Result<()> {
        if entries.len() != 2 * self.m.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} tensors, expected {}",
                entries.len(),
                2 * self.m.len()
            )));
        }
        for (i, (name, _)) in params.iter().enumerate() {
            for (prefix, buf) in [("m", &mut self.m), ("v", &mut self.v)] {
                let key = format!("{prefix}.{name}");
                let found = entries.iter().find(|(n, _)| *n == key).ok_or_else(|| {
                    Error::Checkpoint(format!("missing optimizer tensor {key:?}"))
                })?;
                if found.1.shape() != buf[i].shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer tensor {key:?} has wrong shape"
                    )));
                }
                buf[i] = found.1.clone();
            }
        }
        self.t = t;
        Ok(())
    }
}

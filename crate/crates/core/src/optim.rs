//! Adam optimizer over a [`ParamStore`](crate::model::ParamStore).
//!
//! Moments are kept as plain arrays aligned with the store's entries so
//! the whole optimizer state round-trips through checkpoints bit-exactly.

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Real;

/// Adam hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0002,
            beta1: 0.1,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Adam state: first/second moments per entry plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// Completed update count (drives bias correction).
    pub t: u64,
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
}

impl Adam {
    /// Fresh zero-moment state shaped after the store.
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Result<Adam> {
        cfg.validate()?;
        let m = store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        let v = store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Ok(Adam { cfg, t: 0, m, v })
    }

    /// Restore saved moments, verifying alignment with the store.
    pub fn from_state(
        cfg: AdamConfig,
        store: &ParamStore,
        t: u64,
        m: Vec<Vec<Real>>,
        v: Vec<Vec<Real>>,
    ) -> Result<Adam> {
        cfg.validate()?;
        if m.len() != store.len() || v.len() != store.len() {
            return Err(Error::Shape {
                op: "adam_state",
                detail: format!(
                    "{} first / {} second moments vs {} parameters",
                    m.len(),
                    v.len(),
                    store.len()
                ),
            });
        }
        for (i, e) in store.entries().iter().enumerate() {
            if m[i].len() != e.data.len() || v[i].len() != e.data.len() {
                return Err(Error::Shape {
                    op: "adam_state",
                    detail: format!("moment size mismatch at '{}'", e.name),
                });
            }
        }
        Ok(Adam { cfg, t, m, v })
    }

    /// One update. `grads[i]` is the gradient of entry `i` (missing
    /// gradients count as zero: the moments still decay).
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Option<Vec<Real>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape {
                op: "adam_apply",
                detail: format!("{} gradients vs {} parameters", grads.len(), store.len()),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            let n = store.entry(i).data.len();
            if let Some(g) = &grads[i] {
                if g.len() != n {
                    return Err(Error::Shape {
                        op: "adam_apply",
                        detail: format!(
                            "gradient size {} vs parameter '{}' size {n}",
                            g.len(),
                            store.entry(i).name
                        ),
                    });
                }
            }
            let zero = vec![0.0; 0];
            let g: &[Real] = grads[i].as_deref().unwrap_or(&zero);
            let mut data = store.entry(i).data.clone();
            for j in 0..n {
                let gj = if g.is_empty() { 0.0 } else { g[j] };
                if !gj.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for '{}' at index {j}",
                        store.entry(i).name
                    )));
                }
                self.m[i][j] = self.cfg.beta1 * self.m[i][j] + (1.0 - self.cfg.beta1) * gj;
                self.v[i][j] = self.cfg.beta2 * self.v[i][j] + (1.0 - self.cfg.beta2) * gj * gj;
                let mhat = self.m[i][j] / c1;
                let vhat = self.v[i][j] / c2;
                data[j] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
            store.set_data(i, data)?;
        }
        Ok(())
    }
}

//! Parameter updates: heavy-ball momentum or Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `m ← μ m + g; w ← w − lr m`.
    Momentum,
    /// Adam with bias correction; `momentum` is β₁.
    Adam,
}

/// Update rule and its cosine-annealed step size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    /// Adam's second-moment decay; unused by plain momentum.
    pub beta2: f64,
    /// Adam's denominator floor; unused by plain momentum.
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr_max: 3e-3,
            lr_min: 1e-4,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return Err(Error::config("optimizer", "need 0 <= lr_min <= lr_max"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        Ok(())
    }
}

const FIRST: &str = "momentum.";
const SECOND: &str = "velocity.";

/// Optimizer buffers, one per parameter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: ParamStore,
    second: ParamStore,
}

fn zeros_like(params: &ParamStore) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (name, t) in params.iter() {
        out.insert(name, Tensor::zeros(t.shape().to_vec())?);
    }
    Ok(out)
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, params: &ParamStore) -> Result<Self> {
        Ok(Optimizer {
            cfg: cfg.clone(),
            first: zeros_like(params)?,
            second: match cfg.kind {
                OptimizerKind::Momentum => ParamStore::new(),
                OptimizerKind::Adam => zeros_like(params)?,
            },
        })
    }

    /// Restore buffers saved by [`Optimizer::state`]; missing buffers start at zero.
    pub fn restore(cfg: &OptimizerConfig, params: &ParamStore, state: &ParamStore) -> Result<Self> {
        let mut opt = Self::new(cfg, params)?;
        for (name, t) in state.iter() {
            let (store, rest) = if let Some(rest) = name.strip_prefix(FIRST) {
                (&mut opt.first, rest)
            } else if let Some(rest) = name.strip_prefix(SECOND) {
                (&mut opt.second, rest)
            } else {
                continue;
            };
            *store.get_mut(rest)? = t.clone();
        }
        Ok(opt)
    }

    /// Buffers as named records, prefixed so they never clash with parameters.
    pub fn state(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.first.iter() {
            out.insert(format!("{FIRST}{name}"), t.clone());
        }
        for (name, t) in self.second.iter() {
            out.insert(format!("{SECOND}{name}"), t.clone());
        }
        out
    }

    /// Apply gradient `grad` to parameter `name`; `t` counts updates from 1.
    pub fn update(&mut self, param: &mut Tensor, name: &str, grad: &Tensor, lr: f64, t: u64) -> Result<()> {
        let mu = self.cfg.momentum;
        let m = self.first.get_mut(name)?;
        match self.cfg.kind {
            OptimizerKind::Momentum => {
                for ((w, m), &g) in param.data_mut().iter_mut().zip(m.data_mut()).zip(grad.data()) {
                    *m = (mu * *m as f64 + g as f64) as f32;
                    *w = (*w as f64 - lr * *m as f64) as f32;
                }
            }
            OptimizerKind::Adam => {
                let b2 = self.cfg.beta2;
                let v = self.second.get_mut(name)?;
                let c1 = 1.0 - mu.powi(t as i32);
                let c2 = 1.0 - b2.powi(t as i32);
                for (((w, m), v), &g) in param
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                    .zip(grad.data())
                {
                    let g = g as f64;
                    let m1 = mu * *m as f64 + (1.0 - mu) * g;
                    let v1 = b2 * *v as f64 + (1.0 - b2) * g * g;
                    *m = m1 as f32;
                    *v = v1 as f32;
                    let step = lr * (m1 / c1) / ((v1 / c2).sqrt() + self.cfg.eps);
                    *w = (*w as f64 - step) as f32;
                }
            }
        }
        Ok(())
    }
}

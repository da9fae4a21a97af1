//! Parameter update rules.
//!
//! Downpour masters apply momentum SGD. Elastic averaging couples each
//! worker to a center variable: at an exchange both sides read the same
//! pre-exchange snapshots `x` (worker) and `c` (center) and move toward
//! each other by `α·(x − c)`:
//!
//! ```text
//! x' = x − α·(x − c)
//! c' = c + α·(x − c)
//! ```
//!
//! so the gap `x − c` is multiplied by `1 − 2α` per exchange.

use thiserror::Error;

use crate::nn::{Gradient, Tensor, WeightSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient shapes do not match the weights")]
    ShapeMismatch,
    #[error("gradient has non-finite entries; update rejected")]
    NonFinite,
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
}

/// Momentum SGD state: `v' = μ·v − η·g`, `w' = w + v'`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    velocity: Vec<Tensor>,
    learning_rate: f64,
    momentum: f64,
}

impl OptimState {
    pub fn new(learning_rate: f64, momentum: f64, shapes: &[Vec<usize>]) -> Result<Self, OptimError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(OptimError::Hyper(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(OptimError::Hyper(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            velocity: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            learning_rate,
            momentum,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// In-place form of [`sgd_step`]. Leaves `w` and `self` untouched on error.
    pub fn apply(&mut self, w: &mut WeightSet, g: &Gradient) -> Result<(), OptimError> {
        if !g.congruent_with(w) || self.velocity.len() != w.tensors.len() {
            return Err(OptimError::ShapeMismatch);
        }
        if !g.is_finite() {
            return Err(OptimError::NonFinite);
        }
        for ((wt, gt), vt) in w.tensors.iter_mut().zip(&g.tensors).zip(&mut self.velocity) {
            for ((wv, gv), vv) in wt.data_mut().iter_mut().zip(gt.data()).zip(vt.data_mut()) {
                *vv = self.momentum * *vv - self.learning_rate * gv;
                *wv += *vv;
            }
        }
        w.version += 1;
        Ok(())
    }
}

pub fn sgd_step(
    w: &WeightSet,
    g: &Gradient,
    s: &OptimState,
) -> Result<(WeightSet, OptimState), OptimError> {
    let mut w = w.clone();
    let mut s = s.clone();
    s.apply(&mut w, g)?;
    Ok((w, s))
}

/// Elastic coupling strength `α` and exchange period `τ` (in batches).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticConfig {
    alpha: f64,
    tau: u64,
}

impl ElasticConfig {
    /// `α` must lie in `(0, 1]`; `α = 1` is the full-pull boundary.
    pub fn new(alpha: f64, tau: u64) -> Result<Self, OptimError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(OptimError::Hyper(format!(
                "elastic alpha must lie in (0, 1], got {alpha}"
            )));
        }
        if tau < 1 {
            return Err(OptimError::Hyper("elastic tau must be at least 1".into()));
        }
        Ok(Self { alpha, tau })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> u64 {
        self.tau
    }

    pub fn is_exchange(&self, batch_index: u64) -> bool {
        batch_index.is_multiple_of(self.tau)
    }

    /// Factor applied to the worker/center gap by one exchange.
    pub fn gap_factor(&self) -> f64 {
        1.0 - 2.0 * self.alpha
    }
}

/// Plain local SGD step `w − η·g` used by elastic-averaging workers.
pub fn local_step(w: &mut WeightSet, g: &Gradient, learning_rate: f64) -> Result<(), OptimError> {
    if !g.congruent_with(w) {
        return Err(OptimError::ShapeMismatch);
    }
    if !g.is_finite() {
        return Err(OptimError::NonFinite);
    }
    for (wt, gt) in w.tensors.iter_mut().zip(&g.tensors) {
        for (wv, gv) in wt.data_mut().iter_mut().zip(gt.data()) {
            *wv -= learning_rate * gv;
        }
    }
    Ok(())
}

/// Worker half of an exchange: `w ← w − α·(w − center)`.
pub fn elastic_pull(w: &mut WeightSet, center: &WeightSet, alpha: f64) -> Result<(), OptimError> {
    if !w.congruent_with(&center.tensors) {
        return Err(OptimError::ShapeMismatch);
    }
    for (wt, ct) in w.tensors.iter_mut().zip(&center.tensors) {
        for (wv, cv) in wt.data_mut().iter_mut().zip(ct.data()) {
            *wv -= alpha * (*wv - cv);
        }
    }
    Ok(())
}

/// One worker batch: local SGD, then an elastic pull toward `w_center`
/// when `batch_index` falls on the exchange period.
pub fn easgd_worker_step(
    w_worker: &WeightSet,
    w_center: &WeightSet,
    g: &Gradient,
    learning_rate: f64,
    e: &ElasticConfig,
    batch_index: u64,
) -> Result<WeightSet, OptimError> {
    let mut w = w_worker.clone();
    local_step(&mut w, g, learning_rate)?;
    if e.is_exchange(batch_index) {
        elastic_pull(&mut w, w_center, e.alpha)?;
    }
    Ok(w)
}

/// Center half of an exchange: `c ← c + α·(w_worker − c)`, version + 1.
pub fn easgd_center_step(
    w_center: &WeightSet,
    w_worker: &WeightSet,
    e: &ElasticConfig,
) -> Result<WeightSet, OptimError> {
    if !w_center.congruent_with(&w_worker.tensors) {
        return Err(OptimError::ShapeMismatch);
    }
    if !w_worker.is_finite() {
        return Err(OptimError::NonFinite);
    }
    let mut c = w_center.clone();
    for (ct, wt) in c.tensors.iter_mut().zip(&w_worker.tensors) {
        for (cv, wv) in ct.data_mut().iter_mut().zip(wt.data()) {
            *cv += e.alpha * (wv - *cv);
        }
    }
    c.version += 1;
    Ok(c)
}

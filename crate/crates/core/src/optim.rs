//! Warm-up/inverse-square-root learning rate, Adam and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "OptimizerConfig::warmup")]
    pub warmup_steps: u64,
    /// Multiplier on `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
    #[serde(default = "OptimizerConfig::scale")]
    pub lr_scale: Real,
    #[serde(default = "OptimizerConfig::beta1")]
    pub beta1: Real,
    #[serde(default = "OptimizerConfig::beta2")]
    pub beta2: Real,
    #[serde(default = "OptimizerConfig::eps")]
    pub eps: Real,
    /// Global gradient norm cap; `None` disables clipping.
    #[serde(default = "OptimizerConfig::clip")]
    pub clip_norm: Option<Real>,
}

impl OptimizerConfig {
    fn warmup() -> u64 {
        400
    }
    fn scale() -> Real {
        0.096
    }
    fn beta1() -> Real {
        0.9
    }
    fn beta2() -> Real {
        0.98
    }
    fn eps() -> Real {
        1e-9
    }
    fn clip() -> Option<Real> {
        Some(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::config("optimizer.warmup_steps must be positive"));
        }
        if !(self.lr_scale > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("optimizer hyperparameters out of range"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("optimizer.clip_norm must be positive"));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            warmup_steps: Self::warmup(),
            lr_scale: Self::scale(),
            beta1: Self::beta1(),
            beta2: Self::beta2(),
            eps: Self::eps(),
            clip_norm: Self::clip(),
        }
    }
}

/// Learning rate at 1-based `step`. Linear warm-up to the peak at
/// `step == warmup`, then decay as `step^-0.5`.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64, scale: Real) -> Result<Real, TensorError> {
    if step == 0 || warmup == 0 || d_model == 0 {
        return Err(TensorError::Contract("lr_schedule needs step, warmup and d_model ≥ 1".into()));
    }
    let s = step as Real;
    let w = warmup as Real;
    Ok(scale * (d_model as Real).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

pub fn global_norm(grads: &[Tensor]) -> Real {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<Real>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: Real) -> Real {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self { step: 0, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect() }
    }

    /// One bias-corrected update. Non-finite gradients abort the step
    /// before anything is modified.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: Real, cfg: &OptimizerConfig) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TensorError::dimension("adam", "parameter, gradient and moment counts differ"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::dimension("adam", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite { op: "adam" });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params[i].data_mut();
            for (j, &g) in grads[i].data().iter().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_and_decay() {
        let peak = lr_schedule(400, 256, 400, 0.096).unwrap();
        assert!((peak - 3e-4).abs() < 1e-6, "{peak}");
        let later = lr_schedule(1600, 256, 400, 0.096).unwrap();
        assert!((later - peak / 2.0).abs() < 1e-12);
        assert!(lr_schedule(0, 256, 400, 0.096).is_err());
        let a = lr_schedule(100, 256, 400, 0.096).unwrap();
        let b = lr_schedule(200, 256, 400, 0.096).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![Tensor::vector(vec![0.3, 0.4])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut p = vec![Tensor::vector(vec![1.0])];
        let mut adam = Adam::new(&p);
        let bad = vec![Tensor::vector(vec![Real::NAN])];
        assert!(adam.update(&mut p, &bad, 0.1, &OptimizerConfig::default()).is_err());
        assert_eq!(adam.step, 0);
        assert_eq!(p[0].data(), &[1.0]);
    }
}

//! AdamW with decoupled weight decay, and a warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named, trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter { name: name.into(), tensor: tensor.requiring_grad() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Floor reached at the end of the decay, as a fraction of `peak_lr`.
    pub min_ratio: f64,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.peak_lr * self.min_ratio;
        floor + (self.peak_lr - floor) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.01, max_grad_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: usize,
    pub first_moments: Vec<Vec<f64>>,
    pub second_moments: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Parameter]) -> Self {
        AdamW {
            config,
            step: 0,
            first_moments: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            second_moments: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    /// Applies one update in place, replacing each parameter tensor with a fresh
    /// leaf. Parameters without a gradient are left untouched. Matrices (rank ≥ 2)
    /// receive weight decay; vectors do not. Returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut [Parameter], lr: f64) -> Result<f64> {
        if params.len() != self.first_moments.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer tracks {} parameters, model has {}",
                self.first_moments.len(),
                params.len()
            )));
        }
        let grads: Vec<Option<Vec<f64>>> = params.iter().map(|p| p.tensor.grad()).collect();
        let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
        let clip = match self.config.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };

        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            let decay = if param.tensor.rank() >= 2 { c.weight_decay } else { 0.0 };
            let m = &mut self.first_moments[i];
            let v = &mut self.second_moments[i];
            let mut data = param.tensor.data().to_vec();
            for j in 0..data.len() {
                let g = grad[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                data[j] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + decay * data[j]);
            }
            param.tensor = Tensor::param(data, param.tensor.shape())?;
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays_to_floor() {
        let s = CosineSchedule { peak_lr: 1e-3, warmup_steps: 10, total_steps: 110, min_ratio: 0.1 };
        assert!((s.lr(0) - 1e-4).abs() < 1e-15);
        assert!((s.lr(9) - 1e-3).abs() < 1e-15);
        assert!((s.lr(10) - 1e-3).abs() < 1e-15);
        assert!((s.lr(60) - 0.55e-3).abs() < 1e-12);
        assert!((s.lr(110) - 1e-4).abs() < 1e-15);
        assert!((s.lr(500) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![Parameter::new("w", Tensor::new(vec![1.0, -2.0], &[2]).unwrap())];
        let loss = params[0].tensor.scale(3.0).sum();
        loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig { max_grad_norm: None, ..AdamWConfig::default() }, &params);
        opt.update(&mut params, 0.1).unwrap();
        let got = params[0].tensor.data();
        assert!((got[0] - 0.9).abs() < 1e-6);
        assert!((got[1] + 2.1).abs() < 1e-6);
        assert!(params[0].tensor.requires_grad());
        assert!(params[0].tensor.grad().is_none());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let target = [0.5, -1.5, 2.0];
        let mut params = vec![Parameter::new("w", Tensor::zeros(&[3]))];
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        let t = Tensor::new(target.to_vec(), &[3]).unwrap();
        for _ in 0..500 {
            let diff = params[0].tensor.sub(&t).unwrap();
            diff.mul(&diff).unwrap().sum().backward().unwrap();
            opt.update(&mut params, 0.05).unwrap();
        }
        for (got, want) in params[0].tensor.data().iter().zip(target) {
            assert!((got - want).abs() < 1e-2, "{got} vs {want}");
        }
    }
}

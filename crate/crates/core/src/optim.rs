//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// `base_lr * 0.5 * (1 + cos(pi * step / total))`, clamped to the final
/// value once `step` passes `total`.
pub fn cosine_lr(step: u64, total: u64, base_lr: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let s = step.min(total) as f64;
    base_lr * 0.5 * (1.0 + (PI * s / total as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine { total_steps: u64 },
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64, base_lr: f64) -> f64 {
        match *self {
            LrSchedule::Constant => base_lr,
            LrSchedule::Cosine { total_steps } => cosine_lr(step, total_steps, base_lr),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// Key/value lines recorded in checkpoint metadata.
    pub fn metadata(&self) -> Vec<(String, String)> {
        vec![
            ("adamw.lr".into(), self.lr.to_string()),
            ("adamw.beta1".into(), self.beta1.to_string()),
            ("adamw.beta2".into(), self.beta2.to_string()),
            ("adamw.eps".into(), self.eps.to_string()),
            ("adamw.weight_decay".into(), self.weight_decay.to_string()),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    schedule: LrSchedule,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, schedule: LrSchedule, params: &ParamStore) -> Self {
        let zeros = |p: &crate::nn::Parameter| Tensor::zeros(p.value.shape());
        Self {
            config,
            schedule,
            step: 0,
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`AdamW::step`] will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step, self.config.lr)
    }

    /// One AdamW update. Every parameter must carry a gradient; gradients
    /// are left in place for the caller to reset.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(contract("optimizer state does not match parameter count"));
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for ((p, m), v) in params
            .params_mut()
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let g = p
                .grad
                .as_ref()
                .ok_or_else(|| contract(format!("missing gradient for {}", p.name)))?;
            if g.shape() != p.value.shape() {
                return Err(Error::Dimension {
                    left: p.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                    context: "gradient shape",
                });
            }
            let decay = 1.0 - lr * c.weight_decay;
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *w *= decay;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4) - 5e-5).abs() < 1e-18);
        assert_eq!(cosine_lr(150, 100, 1e-4), cosine_lr(100, 100, 1e-4));
    }

    fn store_with(value: Vec<f64>, grad: Vec<f64>) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(value));
        store.params_mut()[0].grad = Some(Tensor::vector(grad));
        store
    }

    #[test]
    fn single_step_closed_form() {
        let g = [0.5, -2.0, 1e-3];
        let mut store = store_with(vec![1.0, 1.0, 1.0], g.to_vec());
        let cfg = AdamWConfig::default().with_lr(1e-3).with_weight_decay(0.0);
        let mut opt = AdamW::new(cfg, LrSchedule::Constant, &store);
        opt.step(&mut store).unwrap();
        for (w, gi) in store.iter().next().unwrap().value.data().iter().zip(g) {
            // m̂ = g, v̂ = g², update = lr * g / (|g| + eps)
            let m_hat = (1.0 - 0.9) * gi / (1.0 - 0.9);
            let v_hat = (1.0 - 0.999) * gi * gi / (1.0 - 0.999);
            let expected = 1.0 - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        }
    }

    #[test]
    fn zero_grad_no_decay_is_stationary() {
        let mut store = store_with(vec![0.3, -4.0], vec![0.0, 0.0]);
        let cfg = AdamWConfig::default().with_weight_decay(0.0);
        let mut opt = AdamW::new(cfg, LrSchedule::Constant, &store);
        for _ in 0..5 {
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.iter().next().unwrap().value.data(), &[0.3, -4.0]);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut store = store_with(vec![2.0, -8.0], vec![0.0, 0.0]);
        let cfg = AdamWConfig::default().with_lr(0.1).with_weight_decay(0.5);
        let mut opt = AdamW::new(cfg, LrSchedule::Constant, &store);
        opt.step(&mut store).unwrap();
        let f = 1.0 - 0.1 * 0.5;
        assert_eq!(store.iter().next().unwrap().value.data(), &[2.0 * f, -8.0 * f]);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0]));
        let mut opt = AdamW::new(AdamWConfig::default(), LrSchedule::Constant, &store);
        assert!(matches!(opt.step(&mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn step_counter_increases() {
        let mut store = store_with(vec![1.0], vec![1.0]);
        let mut opt = AdamW::new(
            AdamWConfig::default(),
            LrSchedule::Cosine { total_steps: 4 },
            &store,
        );
        let mut last = opt.steps_taken();
        for _ in 0..6 {
            opt.step(&mut store).unwrap();
            assert!(opt.steps_taken() > last);
            last = opt.steps_taken();
        }
        assert_eq!(opt.current_lr(), 0.0);
    }
}

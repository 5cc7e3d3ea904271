use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{bounds, contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Per-step noise variances `beta[t]` and their cumulative survival
/// products `alpha_bar[t] = prod_{s<=t} (1 - beta[s])`, indexed `0..T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn build_schedule(
    timesteps: usize,
    beta_min: f64,
    beta_max: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(contract("schedule needs at least one timestep"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(contract(format!(
            "beta range must satisfy 0 < {beta_min} <= {beta_max} < 1"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            if timesteps == 1 {
                vec![beta_min]
            } else {
                let span = (beta_max - beta_min) / (timesteps - 1) as f64;
                (0..timesteps).map(|t| beta_min + span * t as f64).collect()
            }
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| (((t / timesteps as f64) + s) / (1.0 + s) * FRAC_PI_2).cos().powi(2);
            (0..timesteps)
                .map(|t| {
                    let b = 1.0 - f(t as f64 + 1.0) / f(t as f64);
                    b.clamp(beta_min, beta_max)
                })
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut acc = 1.0;
    for &b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        kind,
        beta,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < self.timesteps() {
            Ok(())
        } else {
            Err(bounds(format!("timestep {t} not in 0..{}", self.timesteps())))
        }
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)`.
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }
}

fn same_shape(a: &Tensor, b: &Tensor, context: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
            context,
        });
    }
    Ok(())
}

/// Closed-form marginal `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise`.
pub fn forward_diffuse(
    z0: &Tensor,
    t: usize,
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    same_shape(z0, noise, "forward_diffuse noise")?;
    let a = schedule.alpha_bar[t].sqrt();
    let s = (1.0 - schedule.alpha_bar[t]).sqrt();
    let data = z0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(z, e)| a * z + s * e)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// One transition of the noising chain:
/// `z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) noise`.
pub fn forward_step(
    z_prev: &Tensor,
    t: usize,
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    same_shape(z_prev, noise, "forward_step noise")?;
    let b = schedule.beta[t];
    let (a, s) = ((1.0 - b).sqrt(), b.sqrt());
    let data = z_prev
        .data()
        .iter()
        .zip(noise.data())
        .map(|(z, e)| a * z + s * e)
        .collect();
    Tensor::new(z_prev.shape().to_vec(), data)
}

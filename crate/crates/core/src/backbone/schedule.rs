use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Linear-beta DDPM schedule with precomputed cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }
}

pub fn make_schedule(cfg: ScheduleConfig) -> Result<NoiseSchedule> {
    let ScheduleConfig {
        timesteps: t,
        beta_start,
        beta_end,
    } = cfg;
    if t < 2 {
        return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {t}")));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta bounds must satisfy 0 < {beta_start} <= {beta_end} < 1"
        )));
    }
    let step = (beta_end - beta_start) / (t - 1) as f64;
    let betas: Vec<f64> = (0..t).map(|i| beta_start + step * i as f64).collect();
    let mut acc = 1.0;
    let alphas_cumprod = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas_cumprod,
    })
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε`, one timestep per batch element.
pub fn add_noise(x0: &Tensor, eps: &Tensor, timesteps: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.size() != eps.size() {
        return Err(Error::Shape(format!(
            "x0 {:?} and noise {:?} differ",
            x0.size(),
            eps.size()
        )));
    }
    let b = x0.size().first().copied().unwrap_or(0) as usize;
    if timesteps.len() != b {
        return Err(Error::Shape(format!("{} timesteps for batch of {b}", timesteps.len())));
    }
    if let Some(&t) = timesteps.iter().find(|&&t| t >= sched.len()) {
        return Err(Error::InvalidArgument(format!("timestep {t} >= T = {}", sched.len())));
    }
    let mut shape = vec![b as i64];
    shape.extend(std::iter::repeat(1).take(x0.dim() - 1));
    let coef = |f: &dyn Fn(f64) -> f64| {
        let v: Vec<f64> = timesteps.iter().map(|&t| f(sched.alpha_bar(t))).collect();
        Tensor::from_slice(&v)
            .to_kind(x0.kind())
            .to_device(x0.device())
            .reshape(shape.as_slice())
    };
    let a = coef(&|ab| ab.sqrt());
    let s = coef(&|ab| (1.0 - ab).sqrt());
    Ok(x0 * a + eps * s)
}

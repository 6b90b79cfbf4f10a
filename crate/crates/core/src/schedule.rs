//! Linear noise schedule and the closed-form forward process.

use promptpaint_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.timesteps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Per-step noise levels. `alpha_bars[t]` is the fraction of signal variance
/// left after `t + 1` noising steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn build_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if timesteps < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 steps, got {timesteps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect(),
    };
    let mut alpha_bars = Vec::with_capacity(timesteps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Config(format!("timestep {t} outside 0..{}", self.len())));
        }
        Ok(())
    }
}

/// `sqrt(ab)·x0 + sqrt(1 − ab)·eps` elementwise for a given noise level.
pub fn add_noise_at(x0: &Tensor<f32>, eps: &Tensor<f32>, alpha_bar: f64) -> Result<Tensor<f32>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "image {:?} and noise {:?} differ",
            x0.shape(),
            eps.shape()
        )));
    }
    let a = alpha_bar.sqrt() as f32;
    let s = (1.0 - alpha_bar).max(0.0).sqrt() as f32;
    Ok(x0.zip_map(eps, |x, e| a * x + s * e)?)
}

/// Forward process at timestep `t`.
pub fn add_noise(x0: &Tensor<f32>, t: usize, eps: &Tensor<f32>, sched: &NoiseSchedule) -> Result<Tensor<f32>> {
    sched.check_timestep(t)?;
    add_noise_at(x0, eps, sched.alpha_bar(t))
}

//! Linear noise schedule and the forward (noising) diffusion process, both
//! for a scalar time and for a per-pixel time map.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::image::Image;
use crate::timemap::TimeMap;

/// Parameters of a linear β schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    /// Standard DDPM setting.
    pub const DDPM: ScheduleParams = ScheduleParams { steps: 1000, beta_start: 1e-4, beta_end: 0.02 };

    /// Short schedule for toy runs. β is scaled by 1000/200 so the chain
    /// still ends close to pure noise.
    pub const TOY: ScheduleParams = ScheduleParams { steps: 200, beta_start: 5e-4, beta_end: 0.1 };

    pub fn build(&self) -> Result<ScheduleTable> {
        ScheduleTable::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Precomputed `β_t`, `α_t`, `ᾱ_t` for `t ∈ 0..=T`. Index 0 holds
/// `β = 0`, `α = ᾱ = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleTable {
    params: ScheduleParams,
    beta: Vec<f32>,
    alpha: Vec<f32>,
    alphabar: Vec<f32>,
    sqrt_alphabar: Vec<f32>,
    sqrt_one_minus_alphabar: Vec<f32>,
}

impl ScheduleTable {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid!("schedule needs T ≥ 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid!("need 0 < beta_start ≤ beta_end < 1, got {} and {}", beta_start, beta_end));
        }
        let mut beta = vec![0.0f32];
        for t in 1..=steps {
            let f = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
            beta.push((beta_start + (beta_end - beta_start) * f) as f32);
        }
        let alpha: Vec<f32> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alphabar = vec![1.0f32];
        for t in 1..=steps {
            alphabar.push(alphabar[t - 1] * alpha[t]);
        }
        let sqrt_alphabar = alphabar.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alphabar = alphabar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self {
            params: ScheduleParams { steps, beta_start, beta_end },
            beta,
            alpha,
            alphabar,
            sqrt_alphabar,
            sqrt_one_minus_alphabar,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// `T`
    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn beta(&self, t: usize) -> f32 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f32 {
        self.alpha[t]
    }

    pub fn alphabar(&self, t: usize) -> f32 {
        self.alphabar[t]
    }

    pub fn sqrt_alphabar(&self, t: usize) -> f32 {
        self.sqrt_alphabar[t]
    }

    pub fn sqrt_one_minus_alphabar(&self, t: usize) -> f32 {
        self.sqrt_one_minus_alphabar[t]
    }

    pub fn betas(&self) -> &[f32] {
        &self.beta
    }

    pub fn alphabars(&self) -> &[f32] {
        &self.alphabar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(invalid!("time {} outside 0..={}", t, self.steps()));
        }
        Ok(())
    }

    /// Marginal sample of one value at time `t`. Time 0 returns `x0` as is.
    #[inline]
    fn diffuse_value(&self, x0: f32, eps: f32, t: usize) -> f32 {
        if t == 0 {
            x0
        } else {
            self.sqrt_alphabar[t] * x0 + self.sqrt_one_minus_alphabar[t] * eps
        }
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`
pub fn forward_diffuse_scalar(x0: &Image, t: usize, eps: &Image, table: &ScheduleTable) -> Result<Image> {
    x0.same_shape(eps)?;
    table.check_t(t)?;
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| table.diffuse_value(x, e, t)).collect();
    Image::new(x0.channels(), x0.height(), x0.width(), data)
}

fn check_tmap(x: &Image, tmap: &TimeMap, table: &ScheduleTable) -> Result<()> {
    if tmap.height() != x.height() || tmap.width() != x.width() {
        return Err(shape_err!(
            "time map {}×{} does not match image {}×{}",
            tmap.height(),
            tmap.width(),
            x.height(),
            x.width()
        ));
    }
    tmap.check_range(table.steps())
}

/// Per-pixel marginal sample; each pixel uses its own time for all channels.
pub fn forward_diffuse_pixelwise(x0: &Image, tmap: &TimeMap, eps: &Image, table: &ScheduleTable) -> Result<Image> {
    x0.same_shape(eps)?;
    check_tmap(x0, tmap, table)?;
    let n = x0.pixels();
    let t = tmap.values();
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&x, &e))| table.diffuse_value(x, e, t[i % n] as usize))
        .collect();
    Image::new(x0.channels(), x0.height(), x0.width(), data)
}

/// `ᾱ` looked up per pixel, row-major `h×w`.
pub fn alphabar_field(table: &ScheduleTable, tmap: &TimeMap) -> Result<Vec<f32>> {
    tmap.check_range(table.steps())?;
    Ok(tmap.values().iter().map(|&t| table.alphabar(t as usize)).collect())
}

/// One forward transition `x_t = √α_t·x_{t−1} + √β_t·ε`, applied to every
/// value of `x`.
pub fn forward_step(x_prev: &Image, t: usize, eps: &Image, table: &ScheduleTable) -> Result<Image> {
    x_prev.same_shape(eps)?;
    table.check_t(t)?;
    if t == 0 {
        return Err(invalid!("forward transition needs t ≥ 1"));
    }
    let (a, b) = (table.alpha(t).sqrt(), table.beta(t).sqrt());
    let data = x_prev.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Image::new(x_prev.channels(), x_prev.height(), x_prev.width(), data)
}

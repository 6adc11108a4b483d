//! Ancestral sampling: unconditional DDPM, time-map inpainting, and the
//! resampling baseline that conditions through a re-noised known region.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::image::Image;
use crate::metrics::masked_mse;
use crate::model::UNet;
use crate::rng::{normal_vec, stream, StreamRng};
use crate::schedule::{forward_diffuse_scalar, forward_step, ScheduleTable};
use crate::timemap::{generation_timemap, Mask, TimeMap};

/// A noise predictor `ε_θ(x, τ)`.
pub trait Denoiser {
    fn predict_eps(&self, x: &Image, tmap: &TimeMap) -> Result<Image>;

    /// Prediction with one time shared by every pixel.
    fn predict_eps_scalar(&self, x: &Image, t: u32) -> Result<Image> {
        self.predict_eps(x, &TimeMap::uniform(x.height(), x.width(), t))
    }
}

impl Denoiser for UNet {
    fn predict_eps(&self, x: &Image, tmap: &TimeMap) -> Result<Image> {
        self.forward(x, tmap)
    }

    fn predict_eps_scalar(&self, x: &Image, t: u32) -> Result<Image> {
        self.forward_scalar(x, t)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_eps(&self, x: &Image, tmap: &TimeMap) -> Result<Image> {
        (**self).predict_eps(x, tmap)
    }

    fn predict_eps_scalar(&self, x: &Image, t: u32) -> Result<Image> {
        (**self).predict_eps_scalar(x, t)
    }
}

/// Adapts a closure into a [`Denoiser`].
pub struct FnDenoiser<F>(pub F);

impl<F: Fn(&Image, &TimeMap) -> Result<Image>> Denoiser for FnDenoiser<F> {
    fn predict_eps(&self, x: &Image, tmap: &TimeMap) -> Result<Image> {
        (self.0)(x, tmap)
    }
}

/// Counts evaluations of the wrapped denoiser.
pub struct NfeCounter<D> {
    inner: D,
    count: Cell<u64>,
}

impl<D: Denoiser> NfeCounter<D> {
    pub fn new(inner: D) -> Self {
        Self { inner, count: Cell::new(0) }
    }

    pub fn forward_evals(&self) -> u64 {
        self.count.get()
    }
}

impl<D: Denoiser> Denoiser for NfeCounter<D> {
    fn predict_eps(&self, x: &Image, tmap: &TimeMap) -> Result<Image> {
        self.count.set(self.count.get() + 1);
        self.inner.predict_eps(x, tmap)
    }

    fn predict_eps_scalar(&self, x: &Image, t: u32) -> Result<Image> {
        self.count.set(self.count.get() + 1);
        self.inner.predict_eps_scalar(x, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ddpm,
    Tdpaint,
    Repaint,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ddpm => "ddpm",
            Method::Tdpaint => "tdpaint",
            Method::Repaint => "repaint",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Ddpm, Method::Tdpaint, Method::Repaint]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid!("unknown method `{}` (valid: ddpm, tdpaint, repaint)", s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: Method,
    pub seed: u64,
    /// Total passes per step for the resampling baseline.
    pub resample_r: usize,
    /// Steps the resampling baseline jumps back up before re-denoising.
    pub jump_j: usize,
    /// Re-noise the generated region at every step exactly as the
    /// generation algorithm's line 6 is printed (off: the region keeps its
    /// current noise level).
    #[serde(default)]
    pub literal_renoise: bool,
    /// Call the denoiser through its scalar-time entry point where the
    /// time is uniform.
    #[serde(default)]
    pub scalar_path: bool,
}

impl SamplerConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self { method, seed, resample_r: 1, jump_j: 1, literal_renoise: false, scalar_path: false }
    }

    pub fn repaint(seed: u64, resample_r: usize, jump_j: usize) -> Self {
        Self { resample_r, jump_j, ..Self::new(Method::Repaint, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Repaint && (self.resample_r == 0 || self.jump_j == 0) {
            return Err(invalid!("resampling needs resample_r ≥ 1 and jump_j ≥ 1"));
        }
        Ok(())
    }
}

/// Closed-form number of denoiser evaluations.
///
/// The resampling baseline makes `T` regular steps; at each `t` with
/// `t + j ≤ T` it then `r − 1` times re-noises `x_{t−1}` up to `x_{t+j}` and
/// denoises back, costing `j + 1` evaluations per round.
pub fn nfe_count(method: Method, steps: usize, resample_r: usize, jump_j: usize) -> Result<u64> {
    let t = steps as u64;
    match method {
        Method::Ddpm | Method::Tdpaint => Ok(t),
        Method::Repaint => {
            if resample_r == 0 || jump_j == 0 {
                return Err(invalid!("resampling needs resample_r ≥ 1 and jump_j ≥ 1"));
            }
            let (r, j) = (resample_r as u64, jump_j as u64);
            Ok(t + t.saturating_sub(j) * (r - 1) * (j + 1))
        }
    }
}

/// What the sampler saw at one denoiser evaluation.
pub struct StepView<'a> {
    /// Time of the evaluated state (time of the unknown region).
    pub t: usize,
    /// Denoiser input.
    pub input: &'a Image,
    /// Predicted noise.
    pub eps: &'a Image,
    /// State after the reverse step, at time `t − 1`.
    pub state: &'a Image,
}

/// A finished sample and the evaluations it cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub nfe: u64,
}

fn noise_like(rng: &mut StreamRng, c: usize, h: usize, w: usize) -> Image {
    Image::new(c, h, w, normal_vec(rng, c * h * w)).expect("sized noise")
}

/// `x_{t−1} = (x − β_t/√(1−ᾱ_t)·ε̂)/√α_t + √β_t·z`
fn reverse_value(x: f32, eps: f32, z: f32, t: usize, table: &ScheduleTable) -> f32 {
    let coef = table.beta(t) / table.sqrt_one_minus_alphabar(t);
    (x - coef * eps) / table.alpha(t).sqrt() + table.beta(t).sqrt() * z
}

fn check_finite(img: &Image, t: usize, what: &str) -> Result<()> {
    if !img.is_finite() {
        return Err(Error::NonFinite { step: t, what: what.to_string() });
    }
    Ok(())
}

fn check_condition(table: &ScheduleTable, condition: &Image, mask: &Mask) -> Result<()> {
    if (mask.height(), mask.width()) != (condition.height(), condition.width()) {
        return Err(shape_err!(
            "mask {}×{} does not match image {}×{}",
            mask.height(),
            mask.width(),
            condition.height(),
            condition.width()
        ));
    }
    mask.require_unknown()?;
    if !condition.is_finite() {
        return Err(invalid!("condition image has non-finite values"));
    }
    if table.steps() == 0 {
        return Err(invalid!("empty schedule"));
    }
    Ok(())
}

/// Clamps pixels where `keep` is false into `[-1, 1]`.
fn clamp_where(img: &mut Image, keep: &[bool]) {
    let n = img.pixels();
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        if !keep[i % n] {
            *v = v.clamp(-1.0, 1.0);
        }
    }
}

/// Unconditional ancestral sampling from `x_T ∼ N(0, I)`.
pub fn ddpm_sample<D: Denoiser>(
    denoiser: &D,
    table: &ScheduleTable,
    config: &SamplerConfig,
    shape: [usize; 3],
    hook: &mut dyn FnMut(&StepView),
) -> Result<Sample> {
    let counter = NfeCounter::new(denoiser);
    let [c, h, w] = shape;
    let mut x = noise_like(&mut stream(config.seed, "sample/init", 0), c, h, w);
    let mut rng = stream(config.seed, "sample/step", 0);
    for t in (1..=table.steps()).rev() {
        let eps = counter.predict_eps_scalar(&x, t as u32)?;
        let z = if t > 1 { noise_like(&mut rng, c, h, w) } else { Image::zeros(c, h, w) };
        let data = (0..x.data().len()).map(|i| reverse_value(x.data()[i], eps.data()[i], z.data()[i], t, table)).collect();
        let next = Image::new(c, h, w, data)?;
        check_finite(&next, t, "ddpm state")?;
        hook(&StepView { t, input: &x, eps: &eps, state: &next });
        x = next;
    }
    Ok(Sample { image: x.clamped(), nfe: counter.forward_evals() })
}

/// Time-map inpainting: known pixels enter every evaluation clean, at
/// time 0, while the unknown region descends from `T` to 0. One denoiser
/// evaluation per step; the known pixels of the output equal the
/// condition exactly.
pub fn tdpaint_inpaint<D: Denoiser>(
    denoiser: &D,
    table: &ScheduleTable,
    condition: &Image,
    mask: &Mask,
    config: &SamplerConfig,
    hook: &mut dyn FnMut(&StepView),
) -> Result<Sample> {
    check_condition(table, condition, mask)?;
    let counter = NfeCounter::new(denoiser);
    let [c, h, w] = condition.shape();
    let n = h * w;
    let known = mask.known();
    let mut x = noise_like(&mut stream(config.seed, "sample/init", 0), c, h, w);
    let mut rng = stream(config.seed, "sample/step", 0);
    let mut renoise_rng = stream(config.seed, "sample/renoise", 0);
    for t in (1..=table.steps()).rev() {
        let z = if t > 1 { noise_like(&mut rng, c, h, w) } else { Image::zeros(c, h, w) };
        if config.literal_renoise {
            let e = noise_like(&mut renoise_rng, c, h, w);
            x = forward_diffuse_scalar(&x, t, &e, table)?;
        }
        let mut input = x;
        for (i, v) in input.data_mut().iter_mut().enumerate() {
            if known[i % n] {
                *v = condition.data()[i];
            }
        }
        let tmap = generation_timemap(mask, t as u32);
        let eps = counter.predict_eps(&input, &tmap)?;
        let mut next = input.clone();
        for (i, v) in next.data_mut().iter_mut().enumerate() {
            if !known[i % n] {
                *v = reverse_value(input.data()[i], eps.data()[i], z.data()[i], t, table);
            }
        }
        check_finite(&next, t, "inpainting state")?;
        hook(&StepView { t, input: &input, eps: &eps, state: &next });
        x = next;
    }
    clamp_where(&mut x, known);
    Ok(Sample { image: x, nfe: counter.forward_evals() })
}

/// The resampling baseline. Every step denoises the whole image at a
/// scalar time and overwrites the known region with the condition noised
/// to the new level; with `resample_r > 1` the result is pushed back up
/// `jump_j + 1` forward steps and denoised again, `resample_r − 1` extra
/// times per step.
pub fn repaint_inpaint<D: Denoiser>(
    denoiser: &D,
    table: &ScheduleTable,
    condition: &Image,
    mask: &Mask,
    config: &SamplerConfig,
    hook: &mut dyn FnMut(&StepView),
) -> Result<Sample> {
    config.validate()?;
    check_condition(table, condition, mask)?;
    let counter = NfeCounter::new(denoiser);
    let [c, h, w] = condition.shape();
    let n = h * w;
    let known = mask.known();
    let steps = table.steps();
    let (r, j) = (config.resample_r, config.jump_j);
    let mut rng = stream(config.seed, "sample/step", 0);
    let mut known_rng = stream(config.seed, "sample/known", 0);
    let mut jump_rng = stream(config.seed, "sample/jump", 0);

    let mut denoise = |x: &Image, t: usize, hook: &mut dyn FnMut(&StepView)| -> Result<Image> {
        let eps = if config.scalar_path {
            counter.predict_eps_scalar(x, t as u32)?
        } else {
            counter.predict_eps(x, &TimeMap::uniform(h, w, t as u32))?
        };
        let z = if t > 1 { noise_like(&mut rng, c, h, w) } else { Image::zeros(c, h, w) };
        let noise = noise_like(&mut known_rng, c, h, w);
        let noisy_known = forward_diffuse_scalar(condition, t - 1, &noise, table)?;
        let mut next = Image::zeros(c, h, w);
        for (i, v) in next.data_mut().iter_mut().enumerate() {
            *v = if known[i % n] {
                noisy_known.data()[i]
            } else {
                reverse_value(x.data()[i], eps.data()[i], z.data()[i], t, table)
            };
        }
        check_finite(&next, t, "resampling state")?;
        hook(&StepView { t, input: x, eps: &eps, state: &next });
        Ok(next)
    };

    let mut x = noise_like(&mut stream(config.seed, "sample/init", 0), c, h, w);
    for t in (1..=steps).rev() {
        x = denoise(&x, t, hook)?;
        if t + j > steps {
            continue;
        }
        for _ in 1..r {
            for s in t..=t + j {
                let e = noise_like(&mut jump_rng, c, h, w);
                x = forward_step(&x, s, &e, table)?;
            }
            for s in (t..=t + j).rev() {
                x = denoise(&x, s, hook)?;
            }
        }
    }
    drop(denoise);
    clamp_where(&mut x, known);
    Ok(Sample { image: x, nfe: counter.forward_evals() })
}

/// Dispatches on `config.method`. Plain DDPM ignores the condition.
pub fn inpaint<D: Denoiser>(
    denoiser: &D,
    table: &ScheduleTable,
    condition: &Image,
    mask: &Mask,
    config: &SamplerConfig,
) -> Result<Sample> {
    let mut hook = |_: &StepView| {};
    match config.method {
        Method::Tdpaint => tdpaint_inpaint(denoiser, table, condition, mask, config, &mut hook),
        Method::Repaint => repaint_inpaint(denoiser, table, condition, mask, config, &mut hook),
        Method::Ddpm => ddpm_sample(denoiser, table, config, condition.shape(), &mut hook),
    }
}

/// Unknown-region error of the clean-image estimate after every step.
#[derive(Clone, Debug)]
pub struct QualityCurve {
    /// `(t, masked MSE)` for `t = T, .., 1`.
    pub points: Vec<(usize, f64)>,
    pub sample: Sample,
    /// Masked MSE of the final sample.
    pub final_mse: f64,
}

impl QualityCurve {
    /// Index of the first point after which the curve stays within
    /// `tolerance` (relative) of its last value.
    pub fn settling_index(&self, tolerance: f64) -> usize {
        let last = self.points.last().map_or(0.0, |p| p.1);
        let band = tolerance * last.abs();
        let mut idx = self.points.len();
        for (i, &(_, v)) in self.points.iter().enumerate().rev() {
            if (v - last).abs() > band {
                break;
            }
            idx = i;
        }
        idx
    }
}

/// `x̂_0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, clamped to `[-1, 1]`.
pub fn predict_x0(x: &Image, eps: &Image, t: usize, table: &ScheduleTable) -> Result<Image> {
    x.same_shape(eps)?;
    let (a, b) = (table.sqrt_alphabar(t), table.sqrt_one_minus_alphabar(t));
    let data = x.data().iter().zip(eps.data()).map(|(&x, &e)| ((x - b * e) / a).clamp(-1.0, 1.0)).collect();
    Image::new(x.channels(), x.height(), x.width(), data)
}

/// Runs an inpainting sampler and records, for each time, the masked MSE
/// against `truth` of the clean-image estimate from the last evaluation
/// at that time.
pub fn quality_vs_step<D: Denoiser>(
    denoiser: &D,
    table: &ScheduleTable,
    truth: &Image,
    mask: &Mask,
    config: &SamplerConfig,
) -> Result<QualityCurve> {
    let mut by_t = vec![f64::NAN; table.steps() + 1];
    let mut failure = None;
    let mut hook = |v: &StepView| {
        let r = predict_x0(v.input, v.eps, v.t, table).and_then(|x0| masked_mse(&x0, truth, mask));
        match r {
            Ok(m) => by_t[v.t] = m,
            Err(e) => failure = Some(e),
        }
    };
    let sample = match config.method {
        Method::Tdpaint => tdpaint_inpaint(denoiser, table, truth, mask, config, &mut hook)?,
        Method::Repaint => repaint_inpaint(denoiser, table, truth, mask, config, &mut hook)?,
        Method::Ddpm => return Err(invalid!("quality curves need an inpainting method")),
    };
    if let Some(e) = failure {
        return Err(e);
    }
    let points = (1..=table.steps()).rev().map(|t| (t, by_t[t])).collect();
    let final_mse = masked_mse(&sample.image, truth, mask)?;
    Ok(QualityCurve { points, sample, final_mse })
}

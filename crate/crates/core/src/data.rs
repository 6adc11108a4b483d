//! Synthetic image sets with enough spatial structure to make inpainting
//! learnable.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::{stream, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// A few Gaussian bumps over a flat background.
    GaussianBlobs,
    /// Linear ramps in a random direction.
    Gradients,
    /// Smoothed low-frequency checkerboards.
    CheckerTextures,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [DatasetKind::GaussianBlobs, DatasetKind::Gradients, DatasetKind::CheckerTextures];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::GaussianBlobs => "gaussian_blobs",
            DatasetKind::Gradients => "gradients",
            DatasetKind::CheckerTextures => "checker_textures",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid!("unknown dataset kind `{}`", s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDatasetSpec {
    pub kind: DatasetKind,
    pub image_side: usize,
    pub channels: usize,
    pub count: usize,
    pub seed: u64,
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(invalid!("dataset count must be positive"));
        }
        if self.image_side < 2 || self.channels == 0 {
            return Err(invalid!("dataset needs image_side ≥ 2 and channels ≥ 1"));
        }
        Ok(())
    }

    /// Image `index` of the set; equal to `make_toy_dataset(self)[index]`.
    pub fn image(&self, index: usize) -> Image {
        let mut rng = stream(self.seed, self.kind.name(), index as u64);
        let (c, n) = (self.channels, self.image_side);
        let data = match self.kind {
            DatasetKind::GaussianBlobs => blobs(&mut rng, c, n),
            DatasetKind::Gradients => ramps(&mut rng, c, n),
            DatasetKind::CheckerTextures => checkers(&mut rng, c, n),
        };
        let data = data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Image::new(c, n, n, data).expect("generator emits c·n·n values")
    }
}

impl ToyDatasetSpec {
    /// `n` images from the same generator that follow the training set,
    /// so they never coincide with a training image index.
    pub fn held_out(&self, n: usize) -> Vec<Image> {
        (self.count..self.count + n).map(|i| self.image(i)).collect()
    }
}

pub fn make_toy_dataset(spec: &ToyDatasetSpec) -> Result<Vec<Image>> {
    spec.validate()?;
    Ok((0..spec.count).map(|i| spec.image(i)).collect())
}

fn blobs(rng: &mut StreamRng, c: usize, n: usize) -> Vec<f32> {
    let side = n as f32;
    let background: f32 = rng.gen_range(-0.9..-0.3);
    let count = rng.gen_range(1..=3);
    let bumps: Vec<(f32, f32, f32, Vec<f32>)> = (0..count)
        .map(|_| {
            let cy = rng.gen_range(0.0..side);
            let cx = rng.gen_range(0.0..side);
            let sigma = rng.gen_range(side / 8.0..side / 3.0);
            let amps = (0..c).map(|_| rng.gen_range(0.6..1.6)).collect();
            (cy, cx, sigma, amps)
        })
        .collect();
    let mut out = Vec::with_capacity(c * n * n);
    for ch in 0..c {
        for y in 0..n {
            for x in 0..n {
                let v = bumps.iter().fold(background, |acc, (cy, cx, s, amps)| {
                    let r2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    acc + amps[ch] * (-r2 / (2.0 * s * s)).exp()
                });
                out.push(v);
            }
        }
    }
    out
}

fn ramps(rng: &mut StreamRng, c: usize, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(c * n * n);
    for _ in 0..c {
        let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let slope = rng.gen_range(1.0..2.0) / n as f32;
        let (gy, gx) = (slope * angle.sin(), slope * angle.cos());
        let offset = rng.gen_range(-0.5..0.5);
        let mid = (n as f32 - 1.0) / 2.0;
        for y in 0..n {
            for x in 0..n {
                out.push(offset + gy * (y as f32 - mid) + gx * (x as f32 - mid));
            }
        }
    }
    out
}

fn checkers(rng: &mut StreamRng, c: usize, n: usize) -> Vec<f32> {
    let period = n as f32 / rng.gen_range(1..=2) as f32;
    let (py, px): (f32, f32) = (rng.gen_range(0.0..period), rng.gen_range(0.0..period));
    let sharp = rng.gen_range(2.0..5.0);
    let tau = std::f32::consts::TAU;
    let mut out = Vec::with_capacity(c * n * n);
    for _ in 0..c {
        let amp = rng.gen_range(0.5..0.9);
        let offset = rng.gen_range(-0.1..0.1);
        for y in 0..n {
            for x in 0..n {
                let s = ((y as f32 + py) * tau / period).sin() * ((x as f32 + px) * tau / period).sin();
                out.push(offset + amp * (sharp * s).tanh());
            }
        }
    }
    out
}

//! Per-pixel diffusion times, inpainting masks, and the generators that
//! produce them for training and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

/// Integer diffusion time for every pixel of an `h×w` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeMap {
    height: usize,
    width: usize,
    values: Vec<u32>,
}

impl TimeMap {
    pub fn new(height: usize, width: usize, values: Vec<u32>) -> Result<Self> {
        if height * width != values.len() {
            return Err(shape_err!("time map {}×{} needs {} values, got {}", height, width, height * width, values.len()));
        }
        Ok(Self { height, width, values })
    }

    pub fn uniform(height: usize, width: usize, t: u32) -> Self {
        Self { height, width, values: vec![t; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, t: u32) {
        self.values[y * self.width + x] = t;
    }

    pub fn max(&self) -> u32 {
        self.values.iter().copied().max().unwrap_or(0)
    }

    /// The shared value when every entry is equal.
    pub fn constant_value(&self) -> Option<u32> {
        let first = *self.values.first()?;
        self.values.iter().all(|&v| v == first).then_some(first)
    }

    /// Rejects entries above `steps`.
    pub fn check_range(&self, steps: usize) -> Result<()> {
        match self.values.iter().find(|&&v| v as usize > steps) {
            Some(v) => Err(invalid!("time map entry {} outside 0..={}", v, steps)),
            None => Ok(()),
        }
    }
}

/// Binary inpainting mask; `true` marks a known pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    known: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, known: Vec<bool>) -> Result<Self> {
        if height * width != known.len() {
            return Err(shape_err!("mask {}×{} needs {} values, got {}", height, width, height * width, known.len()));
        }
        Ok(Self { height, width, known })
    }

    pub fn all_unknown(height: usize, width: usize) -> Self {
        Self { height, width, known: vec![false; height * width] }
    }

    pub fn all_known(height: usize, width: usize) -> Self {
        Self { height, width, known: vec![true; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.known.len()
    }

    pub fn known(&self) -> &[bool] {
        &self.known
    }

    pub fn is_known(&self, y: usize, x: usize) -> bool {
        self.known[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, known: bool) {
        self.known[y * self.width + x] = known;
    }

    pub fn known_count(&self) -> usize {
        self.known.iter().filter(|&&k| k).count()
    }

    pub fn unknown_count(&self) -> usize {
        self.pixels() - self.known_count()
    }

    pub fn known_fraction(&self) -> f64 {
        self.known_count() as f64 / self.pixels() as f64
    }

    /// Fails unless something remains to inpaint.
    pub fn require_unknown(&self) -> Result<()> {
        if self.unknown_count() == 0 {
            return Err(invalid!("mask has no unknown pixels"));
        }
        Ok(())
    }
}

/// Time map for generation: known pixels at time 0, the rest at `t`.
pub fn generation_timemap(mask: &Mask, t: u32) -> TimeMap {
    let values = mask.known.iter().map(|&k| if k { 0 } else { t }).collect();
    TimeMap { height: mask.height, width: mask.width, values }
}

/// Patch sizes available on an `h×w` grid: powers of two up to `w` that tile
/// both dimensions.
pub fn patch_sizes(height: usize, width: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |p| p.checked_mul(2))
        .take_while(|&p| p <= width)
        .filter(|&p| height % p == 0 && width % p == 0)
        .collect()
}

/// Marks `floor(fraction · n)` of the `n` patches of side `patch` as known,
/// chosen uniformly, keeping at least one patch unknown.
pub fn patch_timemap<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    patch: usize,
    fraction: f64,
    t_unknown: u32,
) -> Result<(TimeMap, Mask)> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(invalid!("patch size {} does not tile a {}×{} grid", patch, height, width));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid!("known fraction {} outside [0, 1]", fraction));
    }
    let (py, px) = (height / patch, width / patch);
    let n = py * px;
    let known_patches = ((fraction * n as f64).floor() as usize).min(n - 1);
    let mut mask = Mask::all_unknown(height, width);
    for idx in sample(rng, n, known_patches).into_iter() {
        let (gy, gx) = (idx / px, idx % px);
        for y in gy * patch..(gy + 1) * patch {
            for x in gx * patch..(gx + 1) * patch {
                mask.set(y, x, true);
            }
        }
    }
    Ok((generation_timemap(&mask, t_unknown), mask))
}

/// Training-time map: random power-of-two patch size, uniform known
/// fraction in `[0, 1]`, known patches at time 0 and the rest at `t_unknown`.
pub fn sample_train_timemap<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    steps: usize,
    t_unknown: u32,
) -> Result<(TimeMap, Mask)> {
    if t_unknown == 0 || t_unknown as usize > steps {
        return Err(invalid!("t_unknown {} outside 1..={}", t_unknown, steps));
    }
    let sizes = patch_sizes(height, width);
    if sizes.is_empty() {
        return Err(invalid!("no patch size tiles a {}×{} grid", height, width));
    }
    let patch = sizes[rng.gen_range(0..sizes.len())];
    let fraction = rng.gen_range(0.0..=1.0);
    patch_timemap(rng, height, width, patch, fraction, t_unknown)
}

/// Bilinear resize with half-pixel centers (corners not aligned).
///
/// Interpolation uses `a + (b − a)·f`, so constant regions stay bit-exact.
pub fn bilinear_resize(field: &[f32], height: usize, width: usize, out_h: usize, out_w: usize) -> Result<Vec<f32>> {
    if field.len() != height * width {
        return Err(shape_err!("field of {} values is not {}×{}", field.len(), height, width));
    }
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("cannot resize to {}×{}", out_h, out_w));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, height);
    let xs = taps(out_w, width);
    let lerp = |a: f32, b: f32, f: f32| a + (b - a) * f;
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = lerp(field[y0 * width + x0], field[y0 * width + x1], fx);
            let bottom = lerp(field[y1 * width + x0], field[y1 * width + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    Ok(out)
}

/// Real-valued time field at a coarser resolution.
pub fn downscale_timemap(tmap: &TimeMap, out_h: usize, out_w: usize) -> Result<Vec<f32>> {
    if out_h > tmap.height || out_w > tmap.width {
        return Err(invalid!(
            "cannot downscale a {}×{} time map to {}×{}",
            tmap.height,
            tmap.width,
            out_h,
            out_w
        ));
    }
    let field: Vec<f32> = tmap.values.iter().map(|&v| v as f32).collect();
    bilinear_resize(&field, tmap.height, tmap.width, out_h, out_w)
}

/// Evaluation and training mask families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFamily {
    /// Random known patches, as drawn for training.
    Patch,
    /// Random rectangles and thick strokes.
    Brush,
    /// Keep every other pixel along both axes.
    Sr2x,
    /// Keep every other row.
    Lines,
    /// Keep the left half.
    Half,
    /// Keep a centered square of a quarter of the side.
    Expand,
}

impl MaskFamily {
    pub const ALL: [MaskFamily; 6] = [
        MaskFamily::Patch,
        MaskFamily::Brush,
        MaskFamily::Sr2x,
        MaskFamily::Lines,
        MaskFamily::Half,
        MaskFamily::Expand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskFamily::Patch => "patch",
            MaskFamily::Brush => "brush",
            MaskFamily::Sr2x => "sr2x",
            MaskFamily::Lines => "lines",
            MaskFamily::Half => "half",
            MaskFamily::Expand => "expand",
        }
    }

    /// Draws a mask of this family. Deterministic families ignore `rng`.
    pub fn generate<R: Rng + ?Sized>(self, rng: &mut R, height: usize, width: usize) -> Result<Mask> {
        match self {
            MaskFamily::Patch => {
                let sizes: Vec<usize> = patch_sizes(height, width).into_iter().filter(|&p| p < width.min(height)).collect();
                if sizes.is_empty() {
                    return Err(invalid!("no patch size tiles a {}×{} grid", height, width));
                }
                let patch = sizes[rng.gen_range(0..sizes.len())];
                let fraction = rng.gen_range(0.25..0.75);
                Ok(patch_timemap(rng, height, width, patch, fraction, 1)?.1)
            }
            MaskFamily::Brush => {
                let coverage = rng.gen_range(0.2..0.5);
                gen_box_brush(rng, height, width, coverage)
            }
            MaskFamily::Sr2x => gen_super_resolve_2x(height, width),
            MaskFamily::Lines => gen_altern_lines(height, width),
            MaskFamily::Half => gen_half(height, width),
            MaskFamily::Expand => gen_expand(height, width, height.min(width) / 4),
        }
    }
}

impl fmt::Display for MaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskFamily::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = MaskFamily::ALL.iter().map(|f| f.name()).collect();
            invalid!("unknown mask family `{}` (valid: {})", s, valid.join(", "))
        })
    }
}

fn require_even(name: &str, height: usize, width: usize) -> Result<()> {
    if height % 2 != 0 || width % 2 != 0 || height == 0 || width == 0 {
        return Err(invalid!("{} mask needs even, non-zero dimensions, got {}×{}", name, height, width));
    }
    Ok(())
}

/// Known pixels at even row and even column.
pub fn gen_super_resolve_2x(height: usize, width: usize) -> Result<Mask> {
    require_even("sr2x", height, width)?;
    let known = (0..height * width).map(|i| (i / width) % 2 == 0 && (i % width) % 2 == 0).collect();
    Mask::new(height, width, known)
}

/// Known even rows, unknown odd rows.
pub fn gen_altern_lines(height: usize, width: usize) -> Result<Mask> {
    require_even("lines", height, width)?;
    let known = (0..height * width).map(|i| (i / width) % 2 == 0).collect();
    Mask::new(height, width, known)
}

/// Left half known, right half unknown.
pub fn gen_half(height: usize, width: usize) -> Result<Mask> {
    if width < 2 || height == 0 {
        return Err(invalid!("half mask needs width ≥ 2, got {}×{}", height, width));
    }
    let known = (0..height * width).map(|i| i % width < width / 2).collect();
    Mask::new(height, width, known)
}

/// Only a centered `keep×keep` square is known.
pub fn gen_expand(height: usize, width: usize, keep: usize) -> Result<Mask> {
    if keep == 0 || keep >= height.min(width) {
        return Err(invalid!("expand keep {} must be in 1..{}", keep, height.min(width)));
    }
    let (y0, x0) = ((height - keep) / 2, (width - keep) / 2);
    let known = (0..height * width)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            (y0..y0 + keep).contains(&y) && (x0..x0 + keep).contains(&x)
        })
        .collect();
    Mask::new(height, width, known)
}

/// Random rectangles and thick polyline strokes marked unknown until at
/// least `coverage` of the pixels are unknown. At least one pixel always
/// stays known.
pub fn gen_box_brush<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, coverage: f64) -> Result<Mask> {
    if height < 2 || width < 2 {
        return Err(invalid!("brush mask needs at least 2×2, got {}×{}", height, width));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(invalid!("brush coverage {} outside (0, 1)", coverage));
    }
    let target = (coverage * (height * width) as f64).ceil() as usize;
    let mut mask = Mask::all_known(height, width);
    let side = height.min(width);
    let mut attempts = 0;
    while mask.unknown_count() < target && attempts < 1000 {
        attempts += 1;
        let mut next = mask.clone();
        if rng.gen_bool(0.5) {
            let rh = rng.gen_range(1..=(height / 2).max(1));
            let rw = rng.gen_range(1..=(width / 2).max(1));
            let y0 = rng.gen_range(0..=height - rh);
            let x0 = rng.gen_range(0..=width - rw);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    next.set(y, x, false);
                }
            }
        } else {
            let radius = rng.gen_range(0.5..(side as f64 / 8.0).max(1.0));
            let mut py = rng.gen_range(0.0..height as f64);
            let mut px = rng.gen_range(0.0..width as f64);
            for _ in 0..rng.gen_range(1..=4) {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let len = rng.gen_range(side as f64 / 8.0..side as f64 / 2.0);
                let (ny, nx) = (py + len * angle.sin(), px + len * angle.cos());
                stamp_segment(&mut next, (py, px), (ny, nx), radius);
                py = ny.clamp(0.0, (height - 1) as f64);
                px = nx.clamp(0.0, (width - 1) as f64);
            }
        }
        if next.known_count() > 0 {
            mask = next;
        }
    }
    Ok(mask)
}

fn stamp_segment(mask: &mut Mask, from: (f64, f64), to: (f64, f64), radius: f64) {
    let steps = ((to.0 - from.0).hypot(to.1 - from.1) * 2.0).ceil().max(1.0) as usize;
    let r2 = radius * radius;
    for s in 0..=steps {
        let f = s as f64 / steps as f64;
        let cy = from.0 + (to.0 - from.0) * f;
        let cx = from.1 + (to.1 - from.1) * f;
        let ylo = (cy - radius).floor().max(0.0) as usize;
        let xlo = (cx - radius).floor().max(0.0) as usize;
        let yhi = ((cy + radius).ceil() as isize).min(mask.height as isize - 1);
        let xhi = ((cx + radius).ceil() as isize).min(mask.width as isize - 1);
        if yhi < 0 || xhi < 0 {
            continue;
        }
        for y in ylo..=yhi as usize {
            for x in xlo..=xhi as usize {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if dy * dy + dx * dx <= r2 {
                    mask.set(y, x, false);
                }
            }
        }
    }
}

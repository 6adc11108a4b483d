//! Image quality metrics: masked MSE, PSNR, SSIM and a pixel-space
//! diversity score.

use crate::error::{invalid, shape_err, Result};
use crate::image::Image;
use crate::timemap::Mask;

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of images in `[-1, 1]`.
const DATA_RANGE: f64 = 2.0;

fn check_mask(img: &Image, mask: &Mask) -> Result<()> {
    if (mask.height(), mask.width()) != (img.height(), img.width()) {
        return Err(shape_err!(
            "mask {}×{} does not match image {}×{}",
            mask.height(),
            mask.width(),
            img.height(),
            img.width()
        ));
    }
    Ok(())
}

/// Mean squared error over the unknown pixels (all channels).
pub fn masked_mse(pred: &Image, target: &Image, mask: &Mask) -> Result<f64> {
    pred.same_shape(target)?;
    check_mask(pred, mask)?;
    if mask.unknown_count() == 0 {
        return Err(invalid!("masked_mse: mask has no unknown pixels"));
    }
    let n = pred.pixels();
    let known = mask.known();
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .filter(|(i, _)| !known[i % n])
        .map(|(_, (&a, &b))| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / (mask.unknown_count() * pred.channels()) as f64)
}

pub fn mse(pred: &Image, target: &Image) -> Result<f64> {
    pred.same_shape(target)?;
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(sum / pred.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB for images in `[-1, 1]`. Identical
/// images give `+∞`.
pub fn psnr(pred: &Image, target: &Image) -> Result<f64> {
    let e = mse(pred, target)?;
    Ok(10.0 * (DATA_RANGE * DATA_RANGE / e).log10())
}

/// Mean SSIM and mean contrast-structure term over all valid windows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParts {
    pub ssim: f64,
    pub contrast_structure: f64,
}

/// Summed-area table with a zero border row and column.
fn integral(values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += values[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let w1 = w + 1;
    s[(y + k) * w1 + x + k] - s[y * w1 + x + k] - s[(y + k) * w1 + x] + s[y * w1 + x]
}

/// SSIM with a uniform 7×7 window, averaged over windows and channels.
pub fn ssim_parts(pred: &Image, target: &Image) -> Result<SsimParts> {
    pred.same_shape(target)?;
    let (h, w, k) = (pred.height(), pred.width(), SSIM_WINDOW);
    if h < k || w < k {
        return Err(invalid!("ssim needs images of at least {}×{}, got {}×{}", k, k, h, w));
    }
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let np = (k * k) as f64;
    let cov_norm = np / (np - 1.0);
    let (mut total, mut total_cs, mut count) = (0.0, 0.0, 0usize);
    for (a, b) in pred.data().chunks(h * w).zip(target.data().chunks(h * w)) {
        let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let prod = |f: &dyn Fn(usize) -> f64| integral(&(0..h * w).map(f).collect::<Vec<_>>(), h, w);
        let (sa, sb) = (integral(&a, h, w), integral(&b, h, w));
        let saa = prod(&|i| a[i] * a[i]);
        let sbb = prod(&|i| b[i] * b[i]);
        let sab = prod(&|i| a[i] * b[i]);
        for y in 0..=h - k {
            for x in 0..=w - k {
                let ma = window_sum(&sa, w, y, x, k) / np;
                let mb = window_sum(&sb, w, y, x, k) / np;
                let va = cov_norm * (window_sum(&saa, w, y, x, k) / np - ma * ma);
                let vb = cov_norm * (window_sum(&sbb, w, y, x, k) / np - mb * mb);
                let cov = cov_norm * (window_sum(&sab, w, y, x, k) / np - ma * mb);
                let cs = (2.0 * cov + c2) / (va + vb + c2);
                let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
                total += lum * cs;
                total_cs += cs;
                count += 1;
            }
        }
    }
    Ok(SsimParts { ssim: total / count as f64, contrast_structure: total_cs / count as f64 })
}

pub fn ssim(pred: &Image, target: &Image) -> Result<f64> {
    ssim_parts(pred, target).map(|p| p.ssim)
}

/// Mean over all sample pairs of the root masked MSE between them.
pub fn diversity_proxy(samples: &[Image], mask: &Mask) -> Result<f64> {
    if samples.len() < 2 {
        return Err(invalid!("diversity needs at least 2 samples, got {}", samples.len()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            total += masked_mse(&samples[i], &samples[j], mask)?.sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

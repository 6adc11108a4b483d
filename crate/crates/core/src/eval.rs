//! Per-mask-family evaluation of an inpainting sampler.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::metrics::{diversity_proxy, masked_mse, psnr, ssim};
use crate::rng::stream;
use crate::samplers::{inpaint, nfe_count, Denoiser, Method, SamplerConfig};
use crate::schedule::ScheduleTable;
use crate::timemap::{Mask, MaskFamily};

fn default_diversity_samples() -> usize {
    2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Method, resampling settings and base seed. Each image gets its own
    /// seed derived from this one.
    pub sampler: SamplerConfig,
    /// Samples drawn per image; diversity is reported when this is ≥ 2.
    #[serde(default = "default_diversity_samples")]
    pub diversity_samples: usize,
}

impl EvalConfig {
    pub fn new(sampler: SamplerConfig) -> Self {
        Self { sampler, diversity_samples: default_diversity_samples() }
    }
}

/// Aggregates for one mask family. Quality metrics are means over images
/// of the first sample; `wall_ms_mean` is the mean sampling time of that
/// sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub mask_family: MaskFamily,
    pub masked_mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub diversity: Option<f64>,
    pub nfe: u64,
    pub wall_ms_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub resample_r: usize,
    pub jump_j: usize,
    pub seed: u64,
    pub n_images: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// One row per family. Wall time is left out so that reruns with the
    /// same seed produce identical bytes; it is kept in the JSON form.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| invalid!("csv: {}", e);
        w.write_record(["mask_family", "masked_mse", "psnr", "ssim", "diversity", "nfe"]).map_err(io)?;
        for r in &self.rows {
            let div = r.diversity.map_or(String::new(), |d| format!("{d:.6e}"));
            w.write_record([
                r.mask_family.name().to_string(),
                format!("{:.6e}", r.masked_mse),
                format!("{:.4}", r.psnr),
                format!("{:.6}", r.ssim),
                div,
                r.nfe.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| invalid!("csv: {}", e))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Mask used for image `index` of `family`.
pub fn eval_mask(family: MaskFamily, seed: u64, index: usize, height: usize, width: usize) -> Result<Mask> {
    let mut rng = stream(seed, &format!("eval/mask/{}", family.name()), index as u64);
    family.generate(&mut rng, height, width)
}

/// Seed of sample `k` of image `index`.
pub fn sample_seed(seed: u64, index: usize, k: usize) -> u64 {
    stream(seed, "eval/sample", ((index as u64) << 16) | k as u64).gen()
}

struct ImageResult {
    masked_mse: f64,
    psnr: f64,
    ssim: f64,
    diversity: Option<f64>,
    nfe: u64,
    wall_ms: f64,
}

/// Inpaints every image under every mask family and aggregates metrics.
/// Images run in parallel; results are reduced in image order.
pub fn run_eval<D: Denoiser + Sync>(
    denoiser: &D,
    table: &ScheduleTable,
    images: &[Image],
    families: &[MaskFamily],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(invalid!("evaluation needs at least one image"));
    }
    config.sampler.validate()?;
    let s = &config.sampler;
    let expected_nfe = nfe_count(s.method, table.steps(), s.resample_r, s.jump_j)?;
    let mut rows = Vec::with_capacity(families.len());
    for &family in families {
        let results: Vec<ImageResult> = images
            .par_iter()
            .enumerate()
            .map(|(i, truth)| -> Result<ImageResult> {
                let mask = eval_mask(family, s.seed, i, truth.height(), truth.width())?;
                let mut samples = Vec::new();
                let mut wall_ms = 0.0;
                for k in 0..config.diversity_samples.max(1) {
                    let cfg = SamplerConfig { seed: sample_seed(s.seed, i, k), ..*s };
                    let start = Instant::now();
                    let sample = inpaint(denoiser, table, truth, &mask, &cfg)?;
                    if k == 0 {
                        wall_ms = start.elapsed().as_secs_f64() * 1e3;
                    }
                    if sample.nfe != expected_nfe {
                        return Err(invalid!("sampler made {} evaluations, expected {}", sample.nfe, expected_nfe));
                    }
                    samples.push(sample.image);
                }
                let first = &samples[0];
                Ok(ImageResult {
                    masked_mse: masked_mse(first, truth, &mask)?,
                    psnr: psnr(first, truth)?,
                    ssim: ssim(first, truth)?,
                    diversity: if samples.len() >= 2 { Some(diversity_proxy(&samples, &mask)?) } else { None },
                    nfe: expected_nfe,
                    wall_ms,
                })
            })
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        let mean = |f: &dyn Fn(&ImageResult) -> f64| results.iter().map(f).sum::<f64>() / n;
        rows.push(EvalRow {
            mask_family: family,
            masked_mse: mean(&|r| r.masked_mse),
            psnr: mean(&|r| r.psnr),
            ssim: mean(&|r| r.ssim),
            diversity: results.iter().map(|r| r.diversity).sum::<Option<f64>>().map(|d| d / n),
            nfe: results[0].nfe,
            wall_ms_mean: mean(&|r| r.wall_ms),
        });
    }
    Ok(EvalReport {
        method: s.method,
        resample_r: s.resample_r,
        jump_j: s.jump_j,
        seed: s.seed,
        n_images: images.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec;
    use crate::samplers::FnDenoiser;
    use crate::timemap::TimeMap;

    fn images(n: usize) -> Vec<Image> {
        (0..n)
            .map(|i| Image::new(1, 8, 8, normal_vec(&mut stream(i as u64, "e", 0), 64)).unwrap().clamped())
            .collect()
    }

    fn shrink() -> FnDenoiser<impl Fn(&Image, &TimeMap) -> Result<Image> + Sync> {
        FnDenoiser(|x: &Image, _: &TimeMap| Image::new(1, 8, 8, x.data().iter().map(|v| 0.5 * v).collect()))
    }

    #[test]
    fn one_row_per_family_and_nfe_from_formula() {
        let table = ScheduleTable::linear(10, 1e-3, 0.3).unwrap();
        let fams = [MaskFamily::Half, MaskFamily::Sr2x, MaskFamily::Brush];
        for cfg in [SamplerConfig::new(Method::Tdpaint, 1), SamplerConfig::repaint(1, 3, 2)] {
            let report = run_eval(&shrink(), &table, &images(3), &fams, &EvalConfig::new(cfg)).unwrap();
            assert_eq!(report.rows.len(), 3);
            for row in &report.rows {
                assert_eq!(row.nfe, nfe_count(cfg.method, 10, cfg.resample_r, cfg.jump_j).unwrap());
                assert!((-1.0..=1.0).contains(&row.ssim));
                assert!(row.diversity.unwrap() > 0.0);
            }
            assert_eq!(report.to_csv().unwrap().lines().count(), 4);
        }
    }

    #[test]
    fn csv_is_reproducible() {
        let table = ScheduleTable::linear(6, 1e-3, 0.3).unwrap();
        let run = || {
            let cfg = EvalConfig::new(SamplerConfig::new(Method::Tdpaint, 4));
            run_eval(&shrink(), &table, &images(2), &[MaskFamily::Half], &cfg).unwrap().to_csv().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn metrics_are_means_over_images() {
        let table = ScheduleTable::linear(6, 1e-3, 0.3).unwrap();
        let imgs = images(4);
        let cfg = EvalConfig { diversity_samples: 1, ..EvalConfig::new(SamplerConfig::new(Method::Tdpaint, 2)) };
        let all = run_eval(&shrink(), &table, &imgs, &[MaskFamily::Half], &cfg).unwrap();
        assert!(all.rows[0].diversity.is_none());
        let mut total = 0.0;
        for (i, img) in imgs.iter().enumerate() {
            let mask = eval_mask(MaskFamily::Half, 2, i, 8, 8).unwrap();
            let sc = SamplerConfig { seed: sample_seed(2, i, 0), ..cfg.sampler };
            let s = inpaint(&shrink(), &table, img, &mask, &sc).unwrap();
            total += masked_mse(&s.image, img, &mask).unwrap();
        }
        assert!((all.rows[0].masked_mse - total / 4.0).abs() < 1e-12);
    }
}

//! Training with per-pixel noise levels.
//!
//! Each example gets a two-valued time map: known pixels stay clean at
//! time 0, the rest are noised to a shared random time. The network is
//! trained to recover the drawn noise everywhere (or only on the unknown
//! pixels when `masked_loss` is set).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, Tensor};
use crate::data::{make_toy_dataset, ToyDatasetSpec};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::model::{UNet, UNetConfig};
use crate::rng::{normal_vec, stream};
use crate::schedule::{forward_diffuse_pixelwise, ScheduleParams, ScheduleTable};
use crate::timemap::{gen_box_brush, generation_timemap, sample_train_timemap, Mask, TimeMap};

/// Source of training masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMix {
    /// Random known patches.
    Patch,
    /// Random rectangles and strokes.
    Brush,
    /// Patch or brush with equal probability per example.
    Mix,
}

impl MaskMix {
    pub const ALL: [MaskMix; 3] = [MaskMix::Patch, MaskMix::Brush, MaskMix::Mix];

    pub fn name(self) -> &'static str {
        match self {
            MaskMix::Patch => "patch",
            MaskMix::Brush => "brush",
            MaskMix::Mix => "mix",
        }
    }
}

impl fmt::Display for MaskMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskMix::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| invalid!("unknown mask mix `{}`", s))
    }
}

fn default_log_interval() -> usize {
    10
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub mask_mix: MaskMix,
    pub seed: u64,
    /// Restrict the loss to unknown pixels.
    #[serde(default)]
    pub masked_loss: bool,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 8, lr: 1e-4, mask_mix: MaskMix::Patch, seed: 0, masked_loss: false, log_interval: 10 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return Err(invalid!("steps, batch_size and log_interval must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid!("learning rate must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// Everything needed to train one model, as read from a config file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: ToyDatasetSpec,
    pub model: UNetConfig,
    pub schedule: ScheduleParams,
    pub training: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        self.model.check_input(self.dataset.channels, self.dataset.image_side, self.dataset.image_side)?;
        self.schedule.build().map(|_| ())
    }
}

/// One noised training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub x0: Image,
    pub tmap: TimeMap,
    pub mask: Mask,
    pub eps: Image,
    pub x_tau: Image,
}

/// Draws example `index` of training step `step`: image, time map, mask
/// and noise each come from a stream keyed by `(seed, step, index)`.
pub fn draw_example(
    dataset: &[Image],
    table: &ScheduleTable,
    config: &TrainConfig,
    step: u64,
    index: usize,
) -> Result<Example> {
    let key = step * config.batch_size as u64 + index as u64;
    let mut rng = stream(config.seed, "train/example", key);
    let x0 = dataset[rng.gen_range(0..dataset.len())].clone();
    let (c, h, w) = (x0.channels(), x0.height(), x0.width());
    let t_unknown = rng.gen_range(1..=table.steps() as u32);
    let use_brush = match config.mask_mix {
        MaskMix::Patch => false,
        MaskMix::Brush => true,
        MaskMix::Mix => rng.gen_bool(0.5),
    };
    let (tmap, mask) = if use_brush {
        let coverage = rng.gen_range(0.1..0.9);
        let mask = gen_box_brush(&mut rng, h, w, coverage)?;
        (generation_timemap(&mask, t_unknown), mask)
    } else {
        sample_train_timemap(&mut rng, h, w, table.steps(), t_unknown)?
    };
    let mut noise_rng = stream(config.seed, "train/noise", key);
    let eps = Image::new(c, h, w, normal_vec(&mut noise_rng, c * h * w))?;
    let x_tau = forward_diffuse_pixelwise(&x0, &tmap, &eps, table)?;
    Ok(Example { x0, tmap, mask, eps, x_tau })
}

/// Mean loss over `examples` and, when `with_grads`, its gradient for
/// every parameter. Example losses are summed in order, then divided by
/// the batch size.
pub fn batch_loss(
    net: &UNet,
    examples: &[Example],
    masked_loss: bool,
    with_grads: bool,
) -> Result<(f32, BTreeMap<String, Tensor>)> {
    if examples.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, with_grads);
    let mut total = None;
    for ex in examples {
        let conds = net.condition_pixelwise(&mut g, &p, &ex.tmap)?;
        let x = g.constant(ex.x_tau.to_tensor());
        let pred = net.forward_graph(&mut g, &p, x, &conds)?;
        let target = g.constant(ex.eps.to_tensor());
        let loss = if masked_loss {
            let weights: Vec<f32> = ex.mask.known().iter().map(|&k| if k { 0.0 } else { 1.0 }).collect();
            g.weighted_mse_loss(pred, target, weights.repeat(ex.x0.channels()))?
        } else {
            g.mse_loss(pred, target)?
        };
        total = Some(match total {
            None => loss,
            Some(acc) => g.add(acc, loss)?,
        });
    }
    let loss = g.scale(total.expect("non-empty batch"), 1.0 / examples.len() as f32);
    let value = g.value(loss).item();
    let mut grads = BTreeMap::new();
    if with_grads {
        let all = g.backward(loss)?;
        for (name, var) in p.iter() {
            if let Some(t) = all.get(var) {
                grads.insert(name.to_string(), t.clone());
            }
        }
    }
    Ok((value, grads))
}

/// A loss value logged during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f32,
    pub wall_ms: f64,
}

/// Model, optimizer and data of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub net: UNet,
    pub optimizer: Adam,
    table: ScheduleTable,
    dataset: Vec<Image>,
}

impl Trainer {
    /// Fresh run: weights initialized from the training seed.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let net = UNet::init(config.model, config.training.seed)?;
        let optimizer = Adam::new(AdamConfig { lr: config.training.lr, ..AdamConfig::default() }, net.params());
        Self::resume(config, net, optimizer)
    }

    /// Continues from saved weights and optimizer state.
    pub fn resume(config: RunConfig, net: UNet, optimizer: Adam) -> Result<Self> {
        config.validate()?;
        let table = config.schedule.build()?;
        let dataset = make_toy_dataset(&config.dataset)?;
        Ok(Self { config, net, optimizer, table, dataset })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn table(&self) -> &ScheduleTable {
        &self.table
    }

    pub fn dataset(&self) -> &[Image] {
        &self.dataset
    }

    /// The examples the next step will train on.
    pub fn next_batch(&self) -> Result<Vec<Example>> {
        let tc = &self.config.training;
        (0..tc.batch_size).map(|i| draw_example(&self.dataset, &self.table, tc, self.step(), i)).collect()
    }

    /// One optimizer update; returns the batch loss before the update.
    pub fn train_step(&mut self) -> Result<f32> {
        let batch = self.next_batch()?;
        let (loss, grads) = batch_loss(&self.net, &batch, self.config.training.masked_loss, true)?;
        let step = self.step() as usize + 1;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, what: format!("training loss {loss}") });
        }
        self.optimizer.step(self.net.params_mut(), &grads)?;
        if let Some((name, _)) = self.net.params().iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite { step, what: format!("parameter `{name}` after update") });
        }
        Ok(loss)
    }

    /// Runs until `config.training.steps` updates have been made. Every
    /// step `s` (1-based) with `(s − 1) % log_interval == 0` is reported
    /// to `log`.
    pub fn run(&mut self, mut log: impl FnMut(MetricRow) -> Result<()>) -> Result<()> {
        let start = std::time::Instant::now();
        let total = self.config.training.steps as u64;
        while self.step() < total {
            let loss = self.train_step()?;
            let s = self.step();
            if (s - 1) % self.config.training.log_interval as u64 == 0 {
                log(MetricRow { step: s, loss, wall_ms: start.elapsed().as_secs_f64() * 1e3 })?;
            }
        }
        Ok(())
    }
}

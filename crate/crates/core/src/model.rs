//! Tiny U-Net noise predictor with per-pixel time conditioning.
//!
//! Every residual block normalizes its features with group norm and then
//! modulates each pixel with a scale and shift projected from that pixel's
//! time embedding. The time map is bilinearly resized to each resolution
//! before embedding, so a constant map degenerates to ordinary scalar
//! conditioning.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, Parameters, Tensor, Var};
use crate::error::{invalid, shape_err, Result};
use crate::image::Image;
use crate::rng::stream;
use crate::timemap::{downscale_timemap, TimeMap};

const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of down/up levels; level `l` has `base_width·2^l` channels.
    pub depth: usize,
    pub time_embed_dim: usize,
    /// Upper bound on the group count of every group norm.
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_blocks")]
    pub blocks_per_level: usize,
}

fn default_groups() -> usize {
    8
}

fn default_blocks() -> usize {
    2
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { in_channels: 1, base_width: 32, depth: 2, time_embed_dim: 64, groups: 8, blocks_per_level: 2 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.depth == 0 || self.blocks_per_level == 0 {
            return Err(invalid!("in_channels, base_width, depth and blocks_per_level must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(invalid!("time_embed_dim must be even and positive, got {}", self.time_embed_dim));
        }
        if self.groups == 0 {
            return Err(invalid!("groups must be positive"));
        }
        Ok(())
    }

    /// Rejects spatial sizes the encoder cannot halve `depth` times.
    pub fn check_input(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        if channels != self.in_channels {
            return Err(shape_err!("model expects {} channels, got {}", self.in_channels, channels));
        }
        let m = 1usize << self.depth;
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(shape_err!("spatial size {}×{} not divisible by 2^{} = {}", height, width, self.depth, m));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// `groups` if it divides `channels`, otherwise the largest divisor
    /// of `channels` below it.
    pub fn group_count(&self, channels: usize) -> usize {
        let g = if channels >= self.groups { self.groups } else { channels };
        (1..=g).rev().find(|d| channels % d == 0).unwrap_or(1)
    }

    /// Name and shape of every parameter tensor.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.time_embed_dim;
        let mut out = vec![
            ("time.l1.weight".into(), vec![d, d]),
            ("time.l1.bias".into(), vec![d]),
            ("time.l2.weight".into(), vec![d, d]),
            ("time.l2.bias".into(), vec![d]),
            ("conv_in.weight".into(), vec![self.base_width, self.in_channels, 3, 3]),
            ("conv_in.bias".into(), vec![self.base_width]),
        ];
        for block in self.blocks() {
            block.shapes(d, &mut out);
        }
        out.push(("conv_out.weight".into(), vec![self.in_channels, self.base_width, 3, 3]));
        out.push(("conv_out.bias".into(), vec![self.in_channels]));
        out
    }

    fn encoder_block(&self, level: usize, b: usize) -> ResBlock {
        let c = self.level_channels(level);
        let c_in = if b > 0 { c } else if level == 0 { self.base_width } else { self.level_channels(level - 1) };
        ResBlock { name: format!("enc{level}.{b}"), c_in, c_out: c }
    }

    fn middle_block(&self) -> ResBlock {
        let c = self.level_channels(self.depth - 1);
        ResBlock { name: "mid".into(), c_in: c, c_out: c }
    }

    fn decoder_block(&self, level: usize, b: usize) -> ResBlock {
        let c = self.level_channels(level);
        let below = self.level_channels((level + 1).min(self.depth - 1));
        let c_in = if b > 0 { c } else { below + c };
        ResBlock { name: format!("dec{level}.{b}"), c_in, c_out: c }
    }

    fn blocks(&self) -> Vec<ResBlock> {
        let mut v = Vec::new();
        for l in 0..self.depth {
            for b in 0..self.blocks_per_level {
                v.push(self.encoder_block(l, b));
            }
        }
        v.push(self.middle_block());
        for l in (0..self.depth).rev() {
            for b in 0..self.blocks_per_level {
                v.push(self.decoder_block(l, b));
            }
        }
        v
    }
}

struct ResBlock {
    name: String,
    c_in: usize,
    c_out: usize,
}

impl ResBlock {
    fn shapes(&self, d: usize, out: &mut Vec<(String, Vec<usize>)>) {
        let n = &self.name;
        for (norm, c) in [("norm1", self.c_in), ("norm2", self.c_out)] {
            for part in ["scale", "shift"] {
                out.push((format!("{n}.{norm}.{part}.weight"), vec![c, d]));
                out.push((format!("{n}.{norm}.{part}.bias"), vec![c]));
            }
        }
        out.push((format!("{n}.conv1.weight"), vec![self.c_out, self.c_in, 3, 3]));
        out.push((format!("{n}.conv1.bias"), vec![self.c_out]));
        out.push((format!("{n}.conv2.weight"), vec![self.c_out, self.c_out, 3, 3]));
        out.push((format!("{n}.conv2.bias"), vec![self.c_out]));
        if self.c_in != self.c_out {
            out.push((format!("{n}.skip.weight"), vec![self.c_out, self.c_in, 1, 1]));
            out.push((format!("{n}.skip.bias"), vec![self.c_out]));
        }
    }
}

/// Sinusoidal embedding of every value, `n×d`. Row `i` is
/// `[sin(t_i·f_0), .., sin(t_i·f_{d/2−1}), cos(t_i·f_0), ..]` with
/// `f_k = 10000^(−k/(d/2))`.
pub fn sinusoidal_embed(values: &[f32], d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(invalid!("embedding dimension must be even and positive, got {}", d));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp()).collect();
    let mut out = Vec::with_capacity(values.len() * d);
    for &t in values {
        let t = t as f64;
        out.extend(freqs.iter().map(|f| (t * f).sin() as f32));
        out.extend(freqs.iter().map(|f| (t * f).cos() as f32));
    }
    Tensor::new(vec![values.len(), d], out)
}

/// `Γ = L2(E ⊙ σ(L1(E)))`, row-wise.
pub fn time_mlp(g: &mut Graph, p: &BoundParams, embedding: Var) -> Result<Var> {
    let l1 = g.linear(embedding, p.var("time.l1.weight")?, p.var("time.l1.bias")?)?;
    let gate = g.sigmoid(l1);
    let gated = g.mul(embedding, gate)?;
    g.linear(gated, p.var("time.l2.weight")?, p.var("time.l2.bias")?)
}

/// Conditioning at one resolution: a table of `Γ` rows and, for each pixel,
/// the row it uses.
#[derive(Clone, Debug)]
pub struct LevelCondition {
    pub gamma: Var,
    pub index: Vec<usize>,
}

/// Group norm followed by the per-pixel affine `(1 + L_scale(Γ))`, `L_shift(Γ)`.
pub fn scale_shift_norm(
    g: &mut Graph,
    h: Var,
    cond: &LevelCondition,
    groups: usize,
    scale: (Var, Var),
    shift: (Var, Var),
) -> Result<Var> {
    let normed = g.group_norm(h, groups, NORM_EPS)?;
    let s = g.linear(cond.gamma, scale.0, scale.1)?;
    let b = g.linear(cond.gamma, shift.0, shift.1)?;
    g.pixel_affine(normed, s, b, cond.index.clone())
}

/// Distinct values of `field` (compared bit for bit, in first-seen order)
/// and the position of each entry among them.
fn dedup_bits(field: &[f32]) -> (Vec<f32>, Vec<usize>) {
    let mut seen: HashMap<u32, usize> = HashMap::new();
    let mut values = Vec::new();
    let index = field
        .iter()
        .map(|&v| {
            *seen.entry(v.to_bits()).or_insert_with(|| {
                values.push(v);
                values.len() - 1
            })
        })
        .collect();
    (values, index)
}

/// The denoiser network: configuration plus named weights.
#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    params: Parameters,
}

impl UNet {
    /// Default initialization: weights uniform in `±1/√fan_in`, biases
    /// zero, output convolution zero.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Parameters::new();
        for (i, (name, shape)) in config.parameter_shapes().into_iter().enumerate() {
            let numel: usize = shape.iter().product();
            let tensor = if name.ends_with(".bias") || name.starts_with("conv_out.") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f32).sqrt();
                let mut rng = stream(seed, "init", i as u64);
                Tensor::new(shape, (0..numel).map(|_| rng.gen_range(-bound..bound)).collect())?
            };
            params.insert(name, tensor);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing weights after checking every expected name and shape.
    pub fn from_parameters(config: UNetConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        if shapes.len() != params.len() {
            return Err(invalid!("expected {} parameter tensors, got {}", shapes.len(), params.len()));
        }
        for (name, shape) in &shapes {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err!("parameter `{}` has shape {:?}, expected {:?}", name, t.shape(), shape));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    fn level_condition(&self, g: &mut Graph, p: &BoundParams, values: &[f32], index: Vec<usize>) -> Result<LevelCondition> {
        let emb = sinusoidal_embed(values, self.config.time_embed_dim)?;
        let e = g.constant(emb);
        let gamma = time_mlp(g, p, e)?;
        Ok(LevelCondition { gamma, index })
    }

    /// Conditioning for every resolution from a per-pixel time map.
    pub fn condition_pixelwise(&self, g: &mut Graph, p: &BoundParams, tmap: &TimeMap) -> Result<Vec<LevelCondition>> {
        (0..=self.config.depth)
            .map(|l| {
                let field = downscale_timemap(tmap, tmap.height() >> l, tmap.width() >> l)?;
                let (values, index) = dedup_bits(&field);
                self.level_condition(g, p, &values, index)
            })
            .collect()
    }

    /// Conditioning for every resolution from one scalar time.
    pub fn condition_scalar(&self, g: &mut Graph, p: &BoundParams, t: f32, height: usize, width: usize) -> Result<Vec<LevelCondition>> {
        (0..=self.config.depth)
            .map(|l| self.level_condition(g, p, &[t], vec![0; (height >> l) * (width >> l)]))
            .collect()
    }

    fn res_block(&self, g: &mut Graph, p: &BoundParams, block: &ResBlock, x: Var, cond: &LevelCondition) -> Result<Var> {
        let n = &block.name;
        let v = |s: String| p.var(&s);
        let h = scale_shift_norm(
            g,
            x,
            cond,
            self.config.group_count(block.c_in),
            (v(format!("{n}.norm1.scale.weight"))?, v(format!("{n}.norm1.scale.bias"))?),
            (v(format!("{n}.norm1.shift.weight"))?, v(format!("{n}.norm1.shift.bias"))?),
        )?;
        let h = g.silu(h);
        let h = g.conv2d(h, v(format!("{n}.conv1.weight"))?, v(format!("{n}.conv1.bias"))?, 1)?;
        let h = scale_shift_norm(
            g,
            h,
            cond,
            self.config.group_count(block.c_out),
            (v(format!("{n}.norm2.scale.weight"))?, v(format!("{n}.norm2.scale.bias"))?),
            (v(format!("{n}.norm2.shift.weight"))?, v(format!("{n}.norm2.shift.bias"))?),
        )?;
        let h = g.silu(h);
        let h = g.conv2d(h, v(format!("{n}.conv2.weight"))?, v(format!("{n}.conv2.bias"))?, 1)?;
        let skip = if block.c_in != block.c_out {
            g.conv2d(x, v(format!("{n}.skip.weight"))?, v(format!("{n}.skip.bias"))?, 0)?
        } else {
            x
        };
        g.add(h, skip)
    }

    /// Records the network on `g`: input `x` (`c×h×w`) and one
    /// [`LevelCondition`] per resolution, finest first.
    pub fn forward_graph(&self, g: &mut Graph, p: &BoundParams, x: Var, conds: &[LevelCondition]) -> Result<Var> {
        let cfg = &self.config;
        let [c, h, w] = match g.value(x).shape() {
            [c, h, w] => [*c, *h, *w],
            s => return Err(shape_err!("model input must be c×h×w, got {:?}", s)),
        };
        cfg.check_input(c, h, w)?;
        if conds.len() != cfg.depth + 1 {
            return Err(invalid!("need {} conditioning levels, got {}", cfg.depth + 1, conds.len()));
        }
        let mut hcur = g.conv2d(x, p.var("conv_in.weight")?, p.var("conv_in.bias")?, 1)?;
        let mut skips = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            for b in 0..cfg.blocks_per_level {
                hcur = self.res_block(g, p, &cfg.encoder_block(l, b), hcur, &conds[l])?;
            }
            skips.push(hcur);
            hcur = g.avg_pool2(hcur)?;
        }
        hcur = self.res_block(g, p, &cfg.middle_block(), hcur, &conds[cfg.depth])?;
        for l in (0..cfg.depth).rev() {
            hcur = g.upsample2(hcur)?;
            hcur = g.concat_channels(hcur, skips[l])?;
            for b in 0..cfg.blocks_per_level {
                hcur = self.res_block(g, p, &cfg.decoder_block(l, b), hcur, &conds[l])?;
            }
        }
        let hcur = g.group_norm(hcur, cfg.group_count(cfg.base_width), NORM_EPS)?;
        let hcur = g.silu(hcur);
        g.conv2d(hcur, p.var("conv_out.weight")?, p.var("conv_out.bias")?, 1)
    }

    fn check_tmap(&self, x: &Image, tmap: &TimeMap) -> Result<()> {
        if (tmap.height(), tmap.width()) != (x.height(), x.width()) {
            return Err(shape_err!(
                "time map {}×{} does not match image {}×{}",
                tmap.height(),
                tmap.width(),
                x.height(),
                x.width()
            ));
        }
        Ok(())
    }

    /// `ε̂ = ε_θ(x, τ)` with a per-pixel time map.
    pub fn forward(&self, x: &Image, tmap: &TimeMap) -> Result<Image> {
        self.check_tmap(x, tmap)?;
        self.config.check_input(x.channels(), x.height(), x.width())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let conds = self.condition_pixelwise(&mut g, &p, tmap)?;
        let xv = g.constant(x.to_tensor());
        let out = self.forward_graph(&mut g, &p, xv, &conds)?;
        Image::from_tensor(g.value(out))
    }

    /// `ε̂ = ε_θ(x, t)` with one time for every pixel.
    pub fn forward_scalar(&self, x: &Image, t: u32) -> Result<Image> {
        self.config.check_input(x.channels(), x.height(), x.width())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let conds = self.condition_scalar(&mut g, &p, t as f32, x.height(), x.width())?;
        let xv = g.constant(x.to_tensor());
        let out = self.forward_graph(&mut g, &p, xv, &conds)?;
        Image::from_tensor(g.value(out))
    }
}

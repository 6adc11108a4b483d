//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape, so node order is a
//! topological order by construction. `backward` walks the tape once in
//! reverse and only materializes gradients for nodes that depend on a leaf
//! created with `requires_grad = true`.

use super::gemm::{gemm, Layout};
use super::tensor::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        kernel: usize,
        padding: usize,
        /// im2col buffer, kept only when the weight needs a gradient.
        cols: Option<Vec<f32>>,
    },
    GroupNorm {
        input: Var,
        groups: usize,
        inv_std: Vec<f32>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Sigmoid {
        input: Var,
    },
    Silu {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Sub {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    PixelAffine {
        input: Var,
        scale: Var,
        shift: Var,
        index: Vec<usize>,
    },
    AvgPool2 {
        input: Var,
    },
    Upsample2 {
        input: Var,
    },
    ConcatChannels {
        lhs: Var,
        rhs: Var,
    },
    Mse {
        pred: Var,
        target: Var,
        weights: Option<Vec<f32>>,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward computation recorded for differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Number of materialized gradient tensors.
    pub fn materialized(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn channels_pixels(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, h * w)),
        _ => Err(shape_err!("expected a c×h×w tensor, got {:?}", shape)),
    }
}

fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D cross-correlation of a `c_in×h×w` input with a
    /// `c_out×c_in×k×k` kernel, zero padding on every side.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (c_in, h, wd) = match x.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(shape_err!("conv2d input must be c×h×w, got {:?}", s)),
        };
        let (c_out, k) = match w.shape() {
            [o, i, k1, k2] if *i == c_in && k1 == k2 => (*o, *k1),
            s => {
                return Err(shape_err!(
                    "conv2d weight {:?} incompatible with input channels {}",
                    s,
                    c_in
                ))
            }
        };
        if b.shape() != [c_out] {
            return Err(shape_err!("conv2d bias {:?}, expected [{}]", b.shape(), c_out));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(shape_err!("conv2d kernel {} larger than padded input {}×{}", k, h, wd));
        }
        let oh = h + 2 * padding + 1 - k;
        let ow = wd + 2 * padding + 1 - k;
        let cols = im2col(x.data(), c_in, h, wd, k, padding, oh, ow);
        let mut out = vec![0.0f32; c_out * oh * ow];
        for (o, row) in out.chunks_mut(oh * ow).enumerate() {
            row.fill(b.data()[o]);
        }
        gemm(c_out, c_in * k * k, oh * ow, w.data(), Layout::Normal, &cols, Layout::Normal, 1.0, &mut out);
        let requires = self.any_grad(&[input, weight, bias]);
        let keep_cols = self.requires_grad(weight);
        let value = Tensor::new(vec![c_out, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel: k,
                padding,
                cols: keep_cols.then_some(cols),
            },
            requires,
        ))
    }

    /// Group normalization without affine parameters.
    pub fn group_norm(&mut self, input: Var, groups: usize, eps: f32) -> Result<Var> {
        let x = self.value(input);
        let (c, p) = channels_pixels(x.shape())?;
        if groups == 0 || c % groups != 0 {
            return Err(invalid!("group_norm: {} channels not divisible into {} groups", c, groups));
        }
        let per = (c / groups) * p;
        let mut out = vec![0.0f32; c * p];
        let mut inv_std = Vec::with_capacity(groups);
        for (src, dst) in x.data().chunks(per).zip(out.chunks_mut(per)) {
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
            let is = (1.0 / (var + eps as f64).sqrt()) as f32;
            let mean = mean as f32;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let requires = self.any_grad(&[input]);
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::GroupNorm { input, groups, inv_std }, requires))
    }

    /// Row-wise affine map. `input` is `n×in` (or a vector of length `in`),
    /// `weight` is `out×in`, `bias` is `out`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (rows, n_in, vector) = match x.shape() {
            [n] => (1, *n, true),
            [r, n] => (*r, *n, false),
            s => return Err(shape_err!("linear input must be 1-D or 2-D, got {:?}", s)),
        };
        let n_out = match w.shape() {
            [o, i] if *i == n_in => *o,
            s => return Err(shape_err!("linear weight {:?} incompatible with input width {}", s, n_in)),
        };
        if b.shape() != [n_out] {
            return Err(shape_err!("linear bias {:?}, expected [{}]", b.shape(), n_out));
        }
        let mut out = Vec::with_capacity(rows * n_out);
        for _ in 0..rows {
            out.extend_from_slice(b.data());
        }
        gemm(rows, n_in, n_out, x.data(), Layout::Normal, w.data(), Layout::Transposed, 1.0, &mut out);
        let shape = if vector { vec![n_out] } else { vec![rows, n_out] };
        let requires = self.any_grad(&[input, weight, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { input, weight, bias }, requires))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<f32> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let requires = self.any_grad(&[input]);
        self.push(value, Op::Sigmoid { input }, requires)
    }

    pub fn silu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<f32> = x.data().iter().map(|&v| v * sigmoid_scalar(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let requires = self.any_grad(&[input]);
        self.push(value, Op::Silu { input }, requires)
    }

    fn binary(&mut self, lhs: Var, rhs: Var, name: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(shape_err!("{}: {:?} vs {:?}", name, a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), out)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let value = self.binary(lhs, rhs, "add", |a, b| a + b)?;
        let requires = self.any_grad(&[lhs, rhs]);
        Ok(self.push(value, Op::Add { lhs, rhs }, requires))
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let value = self.binary(lhs, rhs, "sub", |a, b| a - b)?;
        let requires = self.any_grad(&[lhs, rhs]);
        Ok(self.push(value, Op::Sub { lhs, rhs }, requires))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let value = self.binary(lhs, rhs, "mul", |a, b| a * b)?;
        let requires = self.any_grad(&[lhs, rhs]);
        Ok(self.push(value, Op::Mul { lhs, rhs }, requires))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let requires = self.any_grad(&[input]);
        self.push(value, Op::Scale { input, factor }, requires)
    }

    /// Per-pixel modulation `x[c,p] · (1 + scale[index[p], c]) + shift[index[p], c]`.
    ///
    /// `scale` and `shift` are `n×c` tables and `index` selects a table row
    /// for every pixel, so pixels sharing a conditioning value share a row.
    pub fn pixel_affine(&mut self, input: Var, scale: Var, shift: Var, index: Vec<usize>) -> Result<Var> {
        let (x, s, b) = (self.value(input), self.value(scale), self.value(shift));
        let (c, p) = channels_pixels(x.shape())?;
        let rows = match s.shape() {
            [r, cc] if *cc == c => *r,
            sh => return Err(shape_err!("pixel_affine scale {:?} incompatible with {} channels", sh, c)),
        };
        if b.shape() != s.shape() {
            return Err(shape_err!("pixel_affine shift {:?} vs scale {:?}", b.shape(), s.shape()));
        }
        if index.len() != p {
            return Err(shape_err!("pixel_affine index has {} entries for {} pixels", index.len(), p));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(shape_err!("pixel_affine index {} out of {} rows", bad, rows));
        }
        let (xd, sd, bd) = (x.data(), s.data(), b.data());
        let mut out = vec![0.0f32; c * p];
        for ch in 0..c {
            for (px, &row) in index.iter().enumerate() {
                let i = ch * p + px;
                out[i] = xd[i] * (1.0 + sd[row * c + ch]) + bd[row * c + ch];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let requires = self.any_grad(&[input, scale, shift]);
        Ok(self.push(value, Op::PixelAffine { input, scale, shift, index }, requires))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = match x.shape() {
            [c, h, w] if h % 2 == 0 && w % 2 == 0 => (*c, *h, *w),
            s => return Err(shape_err!("avg_pool2 needs even spatial dims, got {:?}", s)),
        };
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[ch * oh * ow + y * ow + xx] =
                        0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
                }
            }
        }
        let requires = self.any_grad(&[input]);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::AvgPool2 { input }, requires))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = match x.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(shape_err!("upsample2 input must be c×h×w, got {:?}", s)),
        };
        let (oh, ow) = (2 * h, 2 * w);
        let xd = x.data();
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[ch * oh * ow + y * ow + xx] = xd[ch * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let requires = self.any_grad(&[input]);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::Upsample2 { input }, requires))
    }

    pub fn concat_channels(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        let (ca, cb, hw) = match (a.shape(), b.shape()) {
            ([ca, h1, w1], [cb, h2, w2]) if h1 == h2 && w1 == w2 => (*ca, *cb, [*h1, *w1]),
            (sa, sb) => return Err(shape_err!("concat_channels {:?} with {:?}", sa, sb)),
        };
        let mut out = Vec::with_capacity(a.numel() + b.numel());
        out.extend_from_slice(a.data());
        out.extend_from_slice(b.data());
        let requires = self.any_grad(&[lhs, rhs]);
        Ok(self.push(Tensor::new(vec![ca + cb, hw[0], hw[1]], out)?, Op::ConcatChannels { lhs, rhs }, requires))
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.mse_impl(pred, target, None)
    }

    /// Weighted mean of squared differences, `Σ w·(p−t)² / Σ w`.
    pub fn weighted_mse_loss(&mut self, pred: Var, target: Var, weights: Vec<f32>) -> Result<Var> {
        self.mse_impl(pred, target, Some(weights))
    }

    fn mse_impl(&mut self, pred: Var, target: Var, weights: Option<Vec<f32>>) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err!("mse_loss: {:?} vs {:?}", p.shape(), t.shape()));
        }
        let (num, denom) = match &weights {
            None => {
                let s: f64 = p.data().iter().zip(t.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
                (s, p.numel() as f64)
            }
            Some(w) => {
                if w.len() != p.numel() {
                    return Err(shape_err!("mse weights: {} entries for {} elements", w.len(), p.numel()));
                }
                let s: f64 = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .zip(w)
                    .map(|((&a, &b), &w)| w as f64 * ((a - b) as f64).powi(2))
                    .sum();
                (s, w.iter().map(|&v| v as f64).sum())
            }
        };
        if denom <= 0.0 {
            return Err(invalid!("mse_loss over an empty set of elements"));
        }
        let requires = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar((num / denom) as f32), Op::Mse { pred, target, weights, denom }, requires))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }
        // Interior nodes keep their gradients only if they are leaves.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let g = gout.data();
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, kernel, padding, cols } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (c_out, oh, ow) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let ckk = c_in * kernel * kernel;
                let hw = oh * ow;
                if self.requires_grad(*weight) {
                    let cols = cols.as_ref().expect("im2col kept for weight gradient");
                    let mut dw = vec![0.0f32; c_out * ckk];
                    gemm(c_out, hw, ckk, g, Layout::Normal, cols, Layout::Transposed, 0.0, &mut dw);
                    self.accumulate(grads, *weight, Tensor::new(w.shape().to_vec(), dw)?);
                }
                if self.requires_grad(*bias) {
                    let db = g.chunks(hw).map(|row| row.iter().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::new(vec![c_out], db)?);
                }
                if self.requires_grad(*input) {
                    let mut dcols = vec![0.0f32; ckk * hw];
                    gemm(ckk, c_out, hw, w.data(), Layout::Transposed, g, Layout::Normal, 0.0, &mut dcols);
                    let dx = col2im(&dcols, c_in, h, wd, *kernel, *padding, oh, ow);
                    self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
            }
            Op::GroupNorm { input, groups, inv_std } => {
                let per = out.numel() / groups;
                let mut dx = vec![0.0f32; out.numel()];
                for (gi, ((xh, gg), dst)) in out
                    .data()
                    .chunks(per)
                    .zip(g.chunks(per))
                    .zip(dx.chunks_mut(per))
                    .enumerate()
                {
                    let sum_g: f64 = gg.iter().map(|&v| v as f64).sum();
                    let sum_gx: f64 = gg.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum();
                    let n = per as f64;
                    let is = inv_std[gi] as f64;
                    for ((d, &gv), &xv) in dst.iter_mut().zip(gg).zip(xh) {
                        *d = (is / n * (n * gv as f64 - sum_g - xv as f64 * sum_gx)) as f32;
                    }
                }
                self.accumulate(grads, *input, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
                let rows = x.numel() / n_in;
                if self.requires_grad(*input) {
                    let mut dx = vec![0.0f32; rows * n_in];
                    gemm(rows, n_out, n_in, g, Layout::Normal, w.data(), Layout::Normal, 0.0, &mut dx);
                    self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![0.0f32; n_out * n_in];
                    gemm(n_out, rows, n_in, g, Layout::Transposed, x.data(), Layout::Normal, 0.0, &mut dw);
                    self.accumulate(grads, *weight, Tensor::new(vec![n_out, n_in], dw)?);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0f32; n_out];
                    for row in g.chunks(n_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![n_out], db)?);
                }
            }
            Op::Sigmoid { input } => {
                let dx = out.data().iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *input, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Silu { input } => {
                let x = self.value(*input);
                let dx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| {
                        let s = sigmoid_scalar(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *input, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Add { lhs, rhs } => {
                self.accumulate(grads, *lhs, gout.clone());
                self.accumulate(grads, *rhs, gout.clone());
            }
            Op::Sub { lhs, rhs } => {
                self.accumulate(grads, *lhs, gout.clone());
                let neg = g.iter().map(|v| -v).collect();
                self.accumulate(grads, *rhs, Tensor::new(out.shape().to_vec(), neg)?);
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.value(*lhs), self.value(*rhs));
                if self.requires_grad(*lhs) {
                    let da = g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect();
                    self.accumulate(grads, *lhs, Tensor::new(out.shape().to_vec(), da)?);
                }
                if self.requires_grad(*rhs) {
                    let db = g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate(grads, *rhs, Tensor::new(out.shape().to_vec(), db)?);
                }
            }
            Op::Scale { input, factor } => {
                let dx = g.iter().map(|&v| v * factor).collect();
                self.accumulate(grads, *input, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::PixelAffine { input, scale, shift, index } => {
                let x = self.value(*input);
                let s = self.value(*scale);
                let (c, p) = (x.shape()[0], index.len());
                if self.requires_grad(*input) {
                    let sd = s.data();
                    let mut dx = vec![0.0f32; c * p];
                    for ch in 0..c {
                        for (px, &row) in index.iter().enumerate() {
                            let i = ch * p + px;
                            dx[i] = g[i] * (1.0 + sd[row * c + ch]);
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                let want_s = self.requires_grad(*scale);
                let want_b = self.requires_grad(*shift);
                if want_s || want_b {
                    let mut ds = vec![0.0f32; s.numel()];
                    let mut db = vec![0.0f32; s.numel()];
                    let xd = x.data();
                    for ch in 0..c {
                        for (px, &row) in index.iter().enumerate() {
                            let i = ch * p + px;
                            ds[row * c + ch] += g[i] * xd[i];
                            db[row * c + ch] += g[i];
                        }
                    }
                    if want_s {
                        self.accumulate(grads, *scale, Tensor::new(s.shape().to_vec(), ds)?);
                    }
                    if want_b {
                        self.accumulate(grads, *shift, Tensor::new(s.shape().to_vec(), db)?);
                    }
                }
            }
            Op::AvgPool2 { input } => {
                let x = self.value(*input);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0f32; x.numel()];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = 0.25 * g[ch * oh * ow + y * ow + xx];
                            let base = ch * h * w + 2 * y * w + 2 * xx;
                            dx[base] += gv;
                            dx[base + 1] += gv;
                            dx[base + w] += gv;
                            dx[base + w + 1] += gv;
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::Upsample2 { input } => {
                let x = self.value(*input);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0f32; x.numel()];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[ch * h * w + (y / 2) * w + xx / 2] += g[ch * oh * ow + y * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::ConcatChannels { lhs, rhs } => {
                let a = self.value(*lhs);
                let b = self.value(*rhs);
                let (ga, gb) = g.split_at(a.numel());
                self.accumulate(grads, *lhs, Tensor::new(a.shape().to_vec(), ga.to_vec())?);
                self.accumulate(grads, *rhs, Tensor::new(b.shape().to_vec(), gb.to_vec())?);
            }
            Op::Mse { pred, target, weights, denom } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let k = (2.0 * g[0] as f64 / denom) as f32;
                let dp: Vec<f32> = match weights {
                    None => p.data().iter().zip(t.data()).map(|(&a, &b)| k * (a - b)).collect(),
                    Some(w) => p
                        .data()
                        .iter()
                        .zip(t.data())
                        .zip(w)
                        .map(|((&a, &b), &wv)| k * wv * (a - b))
                        .collect(),
                };
                if self.requires_grad(*target) {
                    let dt = dp.iter().map(|v| -v).collect();
                    self.accumulate(grads, *target, Tensor::new(p.shape().to_vec(), dt)?);
                }
                self.accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), dp)?);
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut cols = vec![0.0f32; c * k * k * oh * ow];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let src_row = &x[ch * h * w + (sy - pad) * w..][..w];
                    for xx in 0..ow {
                        let sx = xx + kx;
                        if sx >= pad && sx - pad < w {
                            dst[y * ow + xx] = src_row[sx - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut x = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let dst_row = &mut x[ch * h * w + (sy - pad) * w..][..w];
                    for xx in 0..ow {
                        let sx = xx + kx;
                        if sx >= pad && sx - pad < w {
                            dst_row[sx - pad] += src[y * ow + xx];
                        }
                    }
                }
            }
        }
    }
    x
}
